"""Deterministic discrete-event simulation of switches, clients, a server and an attacker.

Topology: clients sit behind switches, every request enters the network at
``topology.request_switch`` and travels to one server. Responses for a client
prefix come back either through the same switch (symmetric) or through one
fixed other switch (asymmetric), decided once per prefix. Forged responses
enter at any switch. Marked copies travel between switches over the
inter-switch link.

Everything random is drawn from numpy generators spawned from the run seed,
one per concern, so a run is a pure function of (config, seed).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np

from .config import ScenarioConfig, errors_only, validate_config
from .filters import CountingBloomFilter, SlidingWindowFilter
from .metrics import COUNT_COLUMNS, RunResult, rates_of, totals_of
from .protocol import (
    ALL_SWITCHES,
    NO_MARK,
    ForwardedRequestsTable,
    Mark,
    MarkKind,
    ProtocolMode,
    RequestForwardingTable,
    SwitchAction,
    SwitchCounters,
    SwitchState,
    Verdict,
    format_trace_line,
    handle_request,
    handle_response,
)

SERVER_IP = (192 << 24) | (0 << 16) | (2 << 8) | 53

# event kinds
NEW_REQUEST = 0
AT_SWITCH = 1
AT_SERVER = 2
AT_CLIENT = 3
CLIENT_TIMEOUT = 4
FILTER_ROTATION = 5
TABLE_EXPIRY = 6
ROUTE_CHANGE = 7


class Event(NamedTuple):
    time: float
    sequence: int
    kind: int
    data: Any


class ScenarioError(ValueError):
    def __init__(self, issues):
        self.issues = issues
        super().__init__("; ".join(str(i) for i in issues))


@dataclass(slots=True)
class Transaction:
    client_ip: int
    txn_id: int
    first_send: float
    attempts: int = 0
    retries: int = 0
    resolved: bool = False


@dataclass(slots=True)
class Packet:
    is_request: bool
    src: int
    dst: int
    txn_id: int
    mark: Mark
    txn: Transaction | None = None


class _Batched:
    """Pulls rows from numpy draws in chunks to keep per-event RNG cost low."""

    def __init__(self, draw, size: int = 8192):
        self._draw = draw
        self._size = size
        self._cols: list[list] = []
        self._i = size

    def next(self):
        if self._i >= self._size:
            self._cols = [c.tolist() for c in self._draw(self._size)]
            self._i = 0
        i = self._i
        self._i += 1
        return tuple(c[i] for c in self._cols)


class CbfSwitch:
    """Single-switch counting-filter baseline: insert on request, decrement on response."""

    def __init__(self, switch_id: int, cbf: CountingBloomFilter):
        self.switch_id = switch_id
        self.cbf = cbf
        self.counters = SwitchCounters()

    def handle_request(self, src, dst, txn_id, mark, now) -> SwitchAction:
        self.counters.requests += 1
        self.cbf.insert((txn_id, src))
        return SwitchAction(Verdict.FORWARD)

    def handle_response(self, src, dst, txn_id, mark, now) -> SwitchAction:
        self.counters.responses += 1
        if self.cbf.check_and_decrement((txn_id, dst)):
            return SwitchAction(Verdict.FORWARD)
        self.counters.unmatched_responses += 1
        return SwitchAction(Verdict.DROP)


def build_switch(cfg: ScenarioConfig, switch_id: int, hash_seed: int):
    f, p = cfg.filter, cfg.protocol
    if f.engine == "cbf":
        return CbfSwitch(switch_id, CountingBloomFilter(f.per_window_bits, f.k, hash_seed))
    mode = ProtocolMode(
        check_write_window=cfg.check_write_window(),
        prefix_len=p.prefix_len,
        ntp_mode=p.ntp_mode,
        peacetime_mode=p.peacetime_mode,
        unmatched_threshold=p.unmatched_threshold,
        ratio_window=p.ratio_window,
    )
    return SwitchState(
        switch_id,
        SlidingWindowFilter(f.b, f.per_window_bits, f.tau, f.k, hash_seed),
        mode,
        RequestForwardingTable(p.prefix_len, p.forwarding_table.capacity, p.forwarding_table.ttl),
        ForwardedRequestsTable(p.forwarded_requests.capacity, p.forwarded_requests.ttl),
    )


def client_pool(cfg: ScenarioConfig, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Distinct client addresses, spread round-robin over the configured prefixes.

    Returns (ips, prefix index per ip).
    """
    prefixes = cfg.client_prefix_list()
    seen: set[int] = set()
    ips, owner = [], []
    for i in range(cfg.traffic.num_clients):
        pi = i % len(prefixes)
        net, plen = prefixes[pi]
        hosts = (1 << (32 - plen)) - 2
        for _ in range(64):
            ip = net + 1 + int(rng.integers(hosts))
            if ip not in seen:
                break
        else:
            raise ScenarioError([f"prefix {pi} too small for {cfg.traffic.num_clients} clients"])
        seen.add(ip)
        ips.append(ip)
        owner.append(pi)
    return ips, owner


def assign_routes(cfg: ScenarioConfig, n_prefixes: int, rng: np.random.Generator) -> list[int]:
    """Response switch per client prefix.

    round(symmetric_fraction * n_prefixes) prefixes, picked at random, return
    through the request switch; each of the rest gets a random other switch.
    """
    topo = cfg.topology
    up = topo.request_switch
    n_sym = int(round(topo.symmetric_fraction * n_prefixes))
    order = rng.permutation(n_prefixes).tolist()
    others = [s for s in range(topo.num_switches) if s != up]
    routes = [up] * n_prefixes
    for pi in order[n_sym:]:
        routes[pi] = others[int(rng.integers(len(others)))]
    return routes


class Simulation:
    def __init__(self, cfg: ScenarioConfig, seed: int, trace: bool | None = None):
        issues = errors_only(validate_config(cfg))
        if issues:
            raise ScenarioError(issues)
        self.cfg = cfg
        self.seed = seed
        self.trace_enabled = cfg.outputs.trace if trace is None else trace
        self.trace: list[str] = []

        ss = np.random.SeedSequence(seed)
        rng_route, rng_clients, rng_req, rng_attack, rng_delay, rng_hash, rng_txn = (
            np.random.default_rng(s) for s in ss.spawn(7))
        self.rng_txn = rng_txn

        topo, traffic = cfg.topology, cfg.traffic
        hash_base = int(rng_hash.integers(1 << 62))
        self.switches = [build_switch(cfg, sid, hash_base + sid) for sid in range(topo.num_switches)]
        self.react = cfg.filter.engine == "react"

        self.clients, owner = client_pool(cfg, rng_clients)
        self.client_prefix = dict(zip(self.clients, owner))
        self.routes = assign_routes(cfg, len(cfg.client_prefix_list()), rng_route)
        victims = self.clients[: traffic.victims] if traffic.victims else self.clients
        ingress = (list(range(topo.num_switches)) if traffic.attack_ingress == "any"
                   else list(traffic.attack_ingress))

        n_clients = len(self.clients)
        self._requests = _Batched(lambda n: (
            rng_req.exponential(1.0 / traffic.r, n),
            rng_req.integers(n_clients, size=n),
            rng_req.integers(1 << 16, size=n),
        ))
        self._jitter = _Batched(lambda n: (rng_delay.uniform(-1.0, 1.0, n),))
        self._attack = None
        if traffic.a > 0:
            n_victims, n_ingress = len(victims), len(ingress)
            self._attack = _Batched(lambda n: (
                rng_attack.exponential(1.0 / traffic.a, n),
                rng_attack.integers(n_victims, size=n),
                rng_attack.integers(1 << 16, size=n),
                rng_attack.integers(n_ingress, size=n),
            ), size=65536)
            self._victims = victims
            self._ingress = ingress

        self.n_bins = max(1, math.ceil(cfg.duration))
        self.bins = [dict.fromkeys(COUNT_COLUMNS, 0) for _ in range(self.n_bins)]
        self.extra = {
            "transactions": 0, "resolved": 0, "failed": 0, "duplicates": 0,
            "rotations": 0, "inter_switch_copies": 0, "server_requests": 0,
        }
        self._heap: list[Event] = []
        self._seq = 0
        self.now = 0.0

    # -- scheduling -----------------------------------------------------

    def schedule(self, time: float, kind: int, data=None) -> None:
        heapq.heappush(self._heap, Event(time, self._seq, kind, data))
        self._seq += 1

    def delay(self, base: float) -> float:
        j = self.cfg.topology.jitter
        if not j:
            return base
        d = base + j * self._jitter.next()[0]
        return d if d > 0.0 else 0.0

    def _bin(self, t: float) -> dict:
        i = int(t)
        return self.bins[i if i < self.n_bins else self.n_bins - 1]

    # -- main loop ------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        duration = cfg.duration
        tau = cfg.filter.tau
        if self.react:
            for sw in self.switches:
                if tau <= duration:
                    self.schedule(sw.requests_bf.next_rotation_time, FILTER_ROTATION, sw)
                ttl = cfg.protocol.forwarded_requests.ttl
                if ttl <= duration:
                    self.schedule(ttl, TABLE_EXPIRY, sw)
        first = self._requests.next()
        self._pending_request = first
        self.schedule(first[0], NEW_REQUEST)

        heap = self._heap
        attack = self._attack
        next_attack = math.inf
        if attack is not None:
            a_gap, a_victim, a_txn, a_ing = attack.next()
            next_attack = a_gap
        while True:
            t_heap = heap[0].time if heap else math.inf
            if next_attack < t_heap:
                if next_attack > duration:
                    next_attack = math.inf
                    continue
                self.now = next_attack
                self.response_at_switch(self._ingress[a_ing], SERVER_IP, self._victims[a_victim],
                                        a_txn, NO_MARK, None, legit=False)
                a_gap, a_victim, a_txn, a_ing = attack.next()
                next_attack += a_gap
                continue
            if t_heap > duration:
                break
            ev = heapq.heappop(heap)
            self.now = ev.time
            self.dispatch(ev)
        return self.result()

    def dispatch(self, ev: Event) -> None:
        kind = ev.kind
        if kind == AT_SWITCH:
            sid, pkt = ev.data
            if pkt.is_request:
                self.request_at_switch(sid, pkt)
            else:
                self.response_at_switch(sid, pkt.src, pkt.dst, pkt.txn_id, pkt.mark, pkt.txn,
                                        legit=pkt.txn is not None)
        elif kind == NEW_REQUEST:
            self.new_request()
        elif kind == AT_SERVER:
            self.at_server(ev.data)
        elif kind == AT_CLIENT:
            self.at_client(ev.data)
        elif kind == CLIENT_TIMEOUT:
            self.client_timeout(*ev.data)
        elif kind == FILTER_ROTATION:
            sw = ev.data
            self.extra["rotations"] += sw.requests_bf.advance(self.now)
            nxt = sw.requests_bf.next_rotation_time
            if nxt <= self.cfg.duration:
                self.schedule(nxt, FILTER_ROTATION, sw)
        elif kind == TABLE_EXPIRY:
            sw = ev.data
            sw.forwarded_requests.expire(self.now)
            sw.forwarding_table.expire(self.now)
            nxt = self.now + self.cfg.protocol.forwarded_requests.ttl
            if nxt <= self.cfg.duration:
                self.schedule(nxt, TABLE_EXPIRY, sw)
        elif kind == ROUTE_CHANGE:
            prefix_index, switch_id = ev.data
            self.routes[prefix_index] = switch_id

    # -- clients and server ---------------------------------------------

    def new_request(self) -> None:
        _, ci, txn_id = self._pending_request
        ip = self.clients[ci]
        txn = Transaction(ip, txn_id, self.now)
        self.extra["transactions"] += 1
        self.send(txn)
        nxt = self._requests.next()
        self._pending_request = nxt
        t = self.now + nxt[0]
        if t <= self.cfg.duration:
            self.schedule(t, NEW_REQUEST)

    def send(self, txn: Transaction) -> None:
        cfg = self.cfg
        txn.attempts += 1
        self._bin(self.now)["requests_sent"] += 1
        pkt = Packet(True, txn.client_ip, SERVER_IP, txn.txn_id, NO_MARK, txn)
        self.schedule(self.now + self.delay(cfg.topology.delays.client_switch), AT_SWITCH,
                      (cfg.topology.request_switch, pkt))
        self.schedule(self.now + cfg.traffic.timeout, CLIENT_TIMEOUT, (txn, txn.attempts))

    def client_timeout(self, txn: Transaction, attempt: int) -> None:
        if txn.resolved or attempt != txn.attempts:
            return
        if txn.retries >= self.cfg.traffic.max_retries:
            self.extra["failed"] += 1
            return
        txn.retries += 1
        if self.cfg.traffic.txn_id_policy == "ntp":
            txn.txn_id = int(self.rng_txn.integers(1 << 16))
        self._bin(self.now)["retransmissions"] += 1
        self.send(txn)

    def at_server(self, pkt: Packet) -> None:
        self.extra["server_requests"] += 1
        resp = Packet(False, SERVER_IP, pkt.src, pkt.txn_id, NO_MARK, pkt.txn)
        sid = self.routes[self.client_prefix[pkt.src]]
        self.schedule(self.now + self.delay(self.cfg.topology.delays.switch_server), AT_SWITCH,
                      (sid, resp))

    def at_client(self, pkt: Packet) -> None:
        txn = pkt.txn
        if txn.resolved:
            self.extra["duplicates"] += 1
        else:
            txn.resolved = True
            self.extra["resolved"] += 1

    # -- switches -------------------------------------------------------

    def request_at_switch(self, sid: int, pkt: Packet) -> None:
        sw = self.switches[sid]
        if self.react:
            action = handle_request(sw, pkt.src, pkt.dst, pkt.txn_id, pkt.mark, self.now)
        else:
            action = sw.handle_request(pkt.src, pkt.dst, pkt.txn_id, pkt.mark, self.now)
        if self.trace_enabled:
            self.trace.append(format_trace_line(self.now, sid, "request", pkt.txn_id, pkt.mark, action))
        if action.verdict is Verdict.FORWARD and pkt.mark.kind is MarkKind.NONE:
            self.schedule(self.now + self.delay(self.cfg.topology.delays.switch_server),
                          AT_SERVER, pkt)
        if action.emissions:
            self.emit(sid, pkt, action)

    def response_at_switch(self, sid: int, src: int, dst: int, txn_id: int, mark: Mark,
                           txn: Transaction | None, legit: bool) -> None:
        sw = self.switches[sid]
        rules_before = sw.counters.rules_installed
        if self.react:
            action = handle_response(sw, src, dst, txn_id, mark, self.now)
        else:
            action = sw.handle_response(src, dst, txn_id, mark, self.now)
        if self.trace_enabled:
            self.trace.append(format_trace_line(self.now, sid, "response", txn_id, mark, action))
        b = self._bin(self.now)
        if mark.kind is MarkKind.NONE:
            delivered = action.verdict is Verdict.FORWARD
            if legit:
                if delivered:
                    b["legit_delivered"] += 1
                    pkt = Packet(False, src, dst, txn_id, NO_MARK, txn)
                    self.schedule(self.now + self.delay(self.cfg.topology.delays.client_switch),
                                  AT_CLIENT, pkt)
                else:
                    b["legit_dropped"] += 1
            elif delivered:
                b["attack_delivered"] += 1
            else:
                b["attack_dropped"] += 1
        elif sw.counters.rules_installed != rules_before:
            b["rules_installed"] += sw.counters.rules_installed - rules_before
        if action.emissions:
            self.emit(sid, Packet(False, src, dst, txn_id, mark, txn), action)

    def emit(self, sid: int, pkt: Packet, action: SwitchAction) -> None:
        inter = self.cfg.topology.delays.inter_switch
        n = len(self.switches)
        for em in action.emissions:
            if em.target == ALL_SWITCHES:
                targets = [s for s in range(n) if s != sid]
            else:
                targets = [em.target]
            if not targets:
                continue
            if em.mark.kind is MarkKind.BROADCAST:
                self._bin(self.now)["broadcasts"] += 1
            for tgt in targets:
                copy = Packet(pkt.is_request, pkt.src, pkt.dst, pkt.txn_id, em.mark, pkt.txn)
                self.extra["inter_switch_copies"] += 1
                self.schedule(self.now + self.delay(inter), AT_SWITCH, (tgt, copy))

    # -- results --------------------------------------------------------

    def result(self) -> RunResult:
        rows = []
        for i, b in enumerate(self.bins):
            row = {"t": i}
            row.update(b)
            rows.append(row)
        totals = totals_of(rows)
        summary: dict[str, float] = dict(totals)
        summary.update(rates_of(totals))
        summary.update(self.extra)
        agg = SwitchCounters()
        for sw in self.switches:
            for name in vars(agg):
                setattr(agg, name, getattr(agg, name) + getattr(sw.counters, name))
        for name, value in vars(agg).items():
            summary[f"switch_{name}"] = value
        if self.react:
            summary["forwarded_requests_evictions"] = sum(
                sw.forwarded_requests.evictions for sw in self.switches)
            summary["forwarding_rules"] = sum(len(sw.forwarding_table) for sw in self.switches)
        return RunResult(rows, summary, self.cfg.to_dict(), self.seed,
                         self.trace if self.trace_enabled else None)


def run_scenario(cfg: ScenarioConfig, seed: int, trace: bool | None = None,
                 route_changes: list[tuple[float, int, int]] = ()) -> RunResult:
    """Simulate ``cfg`` from t=0 to ``cfg.duration``.

    ``route_changes`` holds (time, prefix index, new response switch) swaps.
    """
    sim = Simulation(cfg, seed, trace)
    for t, prefix_index, switch_id in route_changes:
        sim.schedule(t, ROUTE_CHANGE, (prefix_index, switch_id))
    return sim.run()


def schedule_traffic(cfg: ScenarioConfig, seed: int, kind: str = "requests"):
    """Yield the arrival stream a run with this (cfg, seed) would use.

    ``kind="requests"`` yields (time, client_ip, txn_id); ``kind="attack"``
    yields (time, victim_ip, txn_id, ingress switch).
    """
    sim = Simulation(cfg, seed)
    if kind == "requests":
        t = 0.0
        while True:
            gap, ci, txn = sim._requests.next()
            t += gap
            if t > cfg.duration:
                return
            yield t, sim.clients[ci], txn
    elif kind == "attack":
        if sim._attack is None:
            return
        t = 0.0
        while True:
            gap, vi, txn, ing = sim._attack.next()
            t += gap
            if t > cfg.duration:
                return
            yield t, sim._victims[vi], txn, sim._ingress[ing]
    else:
        raise ValueError(f"unknown traffic kind {kind!r}")
