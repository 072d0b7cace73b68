"""Per-switch request/response correlation protocol.

A switch logs every request it sees in a sliding-window Bloom filter and only
lets a response through if its (txn_id, destination) key is present. To cope
with asymmetric routing, retransmitted requests are broadcast to the other
switches; whichever switch later sees the matching response tells the
broadcaster to install a forwarding rule, after which new requests from that
client prefix are duplicated to it directly.

Handlers are plain functions of ``(state, packet fields, now)`` that mutate the
switch state and return a ``SwitchAction`` describing what to do with the
packet and which marked copies to emit. Delivery of those copies is the
simulator's job.
"""

from __future__ import annotations

import enum
from collections import OrderedDict, deque
from dataclasses import dataclass, field

from .filters import SlidingWindowFilter

ALL_SWITCHES = "*"


class MarkKind(str, enum.Enum):
    NONE = "none"
    FORWARD = "forward"
    BROADCAST = "broadcast"
    FORWARD_RULE = "forward_rule"
    BROADCAST_RESPONSE = "broadcast_response"


@dataclass(frozen=True)
class Mark:
    kind: MarkKind = MarkKind.NONE
    origin: int | None = None

    def is_wellformed(self) -> bool:
        return (self.kind is MarkKind.NONE) == (self.origin is None)

    def __str__(self) -> str:
        if self.kind is MarkKind.NONE:
            return "none"
        return f"{self.kind.value}:{self.origin}"


NO_MARK = Mark()


class Verdict(str, enum.Enum):
    FORWARD = "forward_to_destination"
    DROP = "drop"


@dataclass(frozen=True)
class Emission:
    """A marked copy of the handled packet and where it goes.

    ``target`` is a switch id, or ``ALL_SWITCHES`` meaning every switch other
    than the sender.
    """

    mark: Mark
    target: int | str

    def __str__(self) -> str:
        return f"{self.mark}>{self.target}"


@dataclass
class SwitchAction:
    verdict: Verdict
    emissions: list[Emission] = field(default_factory=list)
    error: str | None = None


def prefix_of(ip: int, prefix_len: int) -> int:
    if prefix_len == 0:
        return 0
    return ip & (((1 << prefix_len) - 1) << (32 - prefix_len))


def ip_to_str(ip: int) -> str:
    return ".".join(str((ip >> s) & 0xFF) for s in (24, 16, 8, 0))


def ip_from_str(s: str) -> int:
    parts = [int(p) for p in s.split(".")]
    if len(parts) != 4 or any(not 0 <= p <= 255 for p in parts):
        raise ValueError(f"not an IPv4 address: {s!r}")
    return (parts[0] << 24) | (parts[1] << 16) | (parts[2] << 8) | parts[3]


class RequestForwardingTable:
    """Longest-prefix-match table from client prefix to downstream switch ids.

    Installing a second target for an existing prefix unions it in, which
    gives multicast rules when responses for a prefix cross several switches.
    ``capacity`` (0 = unbounded) evicts the oldest rule; ``ttl`` (0 = never)
    ages rules out.
    """

    def __init__(self, prefix_len: int = 16, capacity: int = 0, ttl: float = 0.0):
        self.prefix_len = prefix_len
        self.capacity = capacity
        self.ttl = ttl
        # (prefix_len, network) -> (targets, installed_at); insertion-ordered for eviction
        self.rules: OrderedDict[tuple[int, int], tuple[set[int], float]] = OrderedDict()
        self._lengths: list[int] = []
        self.evictions = 0

    def __len__(self) -> int:
        return len(self.rules)

    def install(self, client_ip: int, prefix_len: int | None, target: int, now: float = 0.0) -> bool:
        """Add ``target`` for the prefix covering ``client_ip``; True if anything changed."""
        plen = self.prefix_len if prefix_len is None else prefix_len
        if not 0 <= plen <= 32:
            raise ValueError(f"prefix length must be in [0, 32], got {plen}")
        rk = (plen, prefix_of(client_ip, plen))
        entry = self.rules.get(rk)
        if entry is not None and self._expired(entry[1], now):
            self._remove(rk)
            entry = None
        if entry is not None:
            targets = entry[0]
            if target in targets:
                return False
            targets.add(target)
            return True
        if self.capacity and len(self.rules) >= self.capacity:
            oldest = next(iter(self.rules))
            self._remove(oldest)
            self.evictions += 1
        self.rules[rk] = ({target}, now)
        if plen not in self._lengths:
            self._lengths.append(plen)
            self._lengths.sort(reverse=True)
        return True

    def lookup(self, ip: int, now: float = 0.0) -> frozenset[int]:
        for plen in list(self._lengths):
            entry = self.rules.get((plen, prefix_of(ip, plen)))
            if entry is None:
                continue
            if self._expired(entry[1], now):
                self._remove((plen, prefix_of(ip, plen)))
                continue
            return frozenset(entry[0])
        return frozenset()

    def expire(self, now: float) -> int:
        if not self.ttl:
            return 0
        stale = [rk for rk, (_, ts) in self.rules.items() if self._expired(ts, now)]
        for rk in stale:
            self._remove(rk)
        return len(stale)

    def _expired(self, ts: float, now: float) -> bool:
        return bool(self.ttl) and ts <= now - self.ttl

    def _remove(self, rk: tuple[int, int]) -> None:
        del self.rules[rk]
        if not any(p == rk[0] for p, _ in self.rules):
            self._lengths.remove(rk[0])


class ForwardedRequestsTable:
    """Bounded map txn_id -> switch ids that broadcast a request with that id.

    Entries expire ``ttl`` seconds after insertion; at capacity the oldest
    entry is evicted.
    """

    def __init__(self, capacity: int = 2048, ttl: float = 1.0):
        self.capacity = capacity
        self.ttl = ttl
        self.entries: OrderedDict[int, tuple[list[int], float]] = OrderedDict()
        self.evictions = 0

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, txn_id: int, origin: int, now: float) -> None:
        entry = self.entries.get(txn_id)
        if entry is not None and entry[1] <= now - self.ttl:
            del self.entries[txn_id]
            entry = None
        if entry is not None:
            if origin not in entry[0]:
                entry[0].append(origin)
            return
        if len(self.entries) >= self.capacity:
            # drop whatever has already aged out before evicting a live entry
            self.expire(now)
            if len(self.entries) >= self.capacity:
                self.entries.popitem(last=False)
                self.evictions += 1
        self.entries[txn_id] = ([origin], now)

    def lookup(self, txn_id: int, now: float) -> list[int]:
        entry = self.entries.get(txn_id)
        if entry is None or entry[1] <= now - self.ttl:
            return []
        return list(entry[0])

    def expire(self, now: float) -> int:
        cutoff = now - self.ttl
        n = 0
        # insertion order is timestamp order, so stop at the first fresh entry
        while self.entries:
            txn_id, (_, ts) = next(iter(self.entries.items()))
            if ts > cutoff:
                break
            del self.entries[txn_id]
            n += 1
        return n


@dataclass
class ProtocolMode:
    """Switch behaviour knobs.

    ``check_write_window`` selects how retransmissions are detected: True
    probes every non-clean window, False skips the window currently being
    written (only valid when the client timeout exceeds ``tau``).
    """

    check_write_window: bool = False
    prefix_len: int = 16
    ntp_mode: bool = False
    peacetime_mode: bool = False
    unmatched_threshold: float = 0.1
    ratio_window: int = 1000


@dataclass
class SwitchCounters:
    requests: int = 0
    responses: int = 0
    unmatched_responses: int = 0
    broadcasts: int = 0
    forward_copies: int = 0
    rule_copies: int = 0
    response_broadcasts: int = 0
    rules_installed: int = 0
    protocol_errors: int = 0


class SwitchState:
    def __init__(self, switch_id: int, requests_bf: SlidingWindowFilter,
                 mode: ProtocolMode | None = None,
                 forwarding_table: RequestForwardingTable | None = None,
                 forwarded_requests: ForwardedRequestsTable | None = None):
        self.switch_id = switch_id
        self.requests_bf = requests_bf
        self.mode = mode or ProtocolMode()
        self.forwarding_table = forwarding_table or RequestForwardingTable(self.mode.prefix_len)
        self.forwarded_requests = forwarded_requests or ForwardedRequestsTable()
        self.counters = SwitchCounters()
        # prefix -> last time a matched response for it was seen here (ntp mode)
        self.symmetric_evidence: dict[int, float] = {}
        self._recent_unmatched: deque[bool] = deque(maxlen=self.mode.ratio_window)
        self._recent_unmatched_count = 0

    def unmatched_ratio(self) -> float:
        if not self._recent_unmatched:
            return 0.0
        return self._recent_unmatched_count / len(self._recent_unmatched)

    def _record_response(self, unmatched: bool) -> None:
        window = self._recent_unmatched
        if len(window) == window.maxlen and window[0]:
            self._recent_unmatched_count -= 1
        window.append(unmatched)
        self._recent_unmatched_count += unmatched

    def _has_symmetric_evidence(self, ip: int, now: float) -> bool:
        p = prefix_of(ip, self.mode.prefix_len)
        seen = self.symmetric_evidence.get(p)
        if seen is None:
            return False
        ttl = self.forwarding_table.ttl
        if ttl and seen <= now - ttl:
            del self.symmetric_evidence[p]
            return False
        return True

    def _install(self, client_ip: int, target: int, now: float) -> None:
        if install_forwarding_rule(self.forwarding_table, client_ip, self.mode.prefix_len, target, now):
            self.counters.rules_installed += 1


def _reject(state: SwitchState, why: str) -> SwitchAction:
    state.counters.protocol_errors += 1
    return SwitchAction(Verdict.DROP, error=why)


def classify_retransmission(state: SwitchState, key: tuple[int, int], now: float) -> bool:
    return state.requests_bf.check(key, now, include_write_window=state.mode.check_write_window)


def install_forwarding_rule(table: RequestForwardingTable, client_ip: int, prefix_len: int,
                            target: int, now: float = 0.0) -> bool:
    return table.install(client_ip, prefix_len, target, now)


def expire_forwarded_requests(table: ForwardedRequestsTable, now: float) -> int:
    return table.expire(now)


def handle_request(state: SwitchState, src: int, dst: int, txn_id: int, mark: Mark,
                   now: float) -> SwitchAction:
    if not mark.is_wellformed():
        return _reject(state, f"malformed mark {mark!r}")
    bf = state.requests_bf
    key = (txn_id, src)
    me = state.switch_id

    if mark.kind is MarkKind.NONE:
        state.counters.requests += 1
        bf.advance(now)
        idx = bf.hasher.indices(key)
        retry = bf.check_indices(idx, state.mode.check_write_window)
        bf.insert_indices(idx)
        action = SwitchAction(Verdict.FORWARD)
        if retry:
            # re-inserted so the entry is not aged out before the retry's response
            action.emissions.append(Emission(Mark(MarkKind.BROADCAST, me), ALL_SWITCHES))
            state.counters.broadcasts += 1
            return action
        targets = sorted(t for t in state.forwarding_table.lookup(src, now) if t != me)
        for t in targets:
            action.emissions.append(Emission(Mark(MarkKind.FORWARD, me), t))
        state.counters.forward_copies += len(targets)
        if (state.mode.ntp_mode and not targets
                and not state._has_symmetric_evidence(src, now)):
            action.emissions.append(Emission(Mark(MarkKind.BROADCAST, me), ALL_SWITCHES))
            state.counters.broadcasts += 1
        return action

    if mark.kind is MarkKind.FORWARD:
        bf.insert(key, now)
        return SwitchAction(Verdict.DROP)

    if mark.kind is MarkKind.BROADCAST:
        bf.insert(key, now)
        state.forwarded_requests.append(txn_id, mark.origin, now)
        return SwitchAction(Verdict.DROP)

    return _reject(state, f"unexpected mark {mark} on a request")


def handle_response(state: SwitchState, src: int, dst: int, txn_id: int, mark: Mark,
                    now: float) -> SwitchAction:
    if not mark.is_wellformed():
        return _reject(state, f"malformed mark {mark!r}")
    me = state.switch_id
    mode = state.mode

    if mark.kind is MarkKind.NONE:
        c = state.counters
        c.responses += 1
        matched = state.requests_bf.check((txn_id, dst), now, include_write_window=True)
        action = SwitchAction(Verdict.FORWARD if matched else Verdict.DROP)
        if matched:
            if mode.ntp_mode:
                state.symmetric_evidence[prefix_of(dst, mode.prefix_len)] = now
        else:
            c.unmatched_responses += 1
            if mode.peacetime_mode and state.unmatched_ratio() < mode.unmatched_threshold:
                action.verdict = Verdict.FORWARD
                action.emissions.append(
                    Emission(Mark(MarkKind.BROADCAST_RESPONSE, me), ALL_SWITCHES))
                c.response_broadcasts += 1
        state._record_response(not matched)
        for origin in state.forwarded_requests.lookup(txn_id, now):
            if origin != me:
                action.emissions.append(Emission(Mark(MarkKind.FORWARD_RULE, me), origin))
                c.rule_copies += 1
        return action

    if mark.kind is MarkKind.FORWARD_RULE:
        state._install(dst, mark.origin, now)
        return SwitchAction(Verdict.DROP)

    if mark.kind is MarkKind.BROADCAST_RESPONSE:
        if not mode.peacetime_mode:
            return _reject(state, "broadcast_response received with peace-time mode off")
        if state.requests_bf.check((txn_id, dst), now, include_write_window=True):
            state._install(dst, mark.origin, now)
        return SwitchAction(Verdict.DROP)

    return _reject(state, f"unexpected mark {mark} on a response")


TRACE_COLUMNS = ("time", "switch", "direction", "txn_id", "mark", "verdict", "emissions")


def format_trace_line(now: float, switch_id: int, direction: str, txn_id: int,
                      mark: Mark, action: SwitchAction) -> str:
    emissions = ";".join(str(e) for e in action.emissions) or "-"
    return "\t".join((f"{now:.6f}", str(switch_id), direction, str(txn_id), str(mark),
                      action.verdict.value, emissions))
