"""Scenario configuration: TOML files, dotted-path overrides, validation."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .filters import is_power_of_two
from .protocol import ip_from_str


class ConfigError(ValueError):
    """The scenario file could not be parsed or has unknown/mistyped fields."""


@dataclass
class FilterConfig:
    engine: str = "react"
    b: int = 4
    k: int = 2
    per_window_bits: int = 1 << 17
    tau: float = 4.0
    two_filter_mode: bool = False
    # "auto": skip the write window when the client timeout exceeds tau
    retransmission_policy: str = "auto"


@dataclass
class TrafficConfig:
    r: float = 100.0
    a: float = 0.0
    # list of CIDR strings, or an int N meaning N consecutive /16s from 10.0.0.0
    client_prefixes: Any = 4
    num_clients: int = 1024
    victims: int = 0
    attack_ingress: Any = "any"
    txn_id_policy: str = "dns"
    timeout: float = 5.0
    max_retries: int = 3


@dataclass
class DelayConfig:
    client_switch: float = 0.001
    switch_server: float = 0.1
    inter_switch: float = 0.005


@dataclass
class TopologyConfig:
    num_switches: int = 2
    request_switch: int = 0
    symmetric_fraction: float = 1.0
    delays: DelayConfig = field(default_factory=DelayConfig)
    jitter: float = 0.01


@dataclass
class ForwardedRequestsConfig:
    capacity: int = 2048
    ttl: float = 1.0


@dataclass
class ForwardingTableConfig:
    capacity: int = 0
    ttl: float = 0.0


@dataclass
class ProtocolConfig:
    prefix_len: int = 16
    forwarded_requests: ForwardedRequestsConfig = field(default_factory=ForwardedRequestsConfig)
    forwarding_table: ForwardingTableConfig = field(default_factory=ForwardingTableConfig)
    ntp_mode: bool = False
    peacetime_mode: bool = False
    unmatched_threshold: float = 0.1
    ratio_window: int = 1000


@dataclass
class OutputConfig:
    csv_dir: str = "results"
    trace: bool = False


@dataclass
class SweepConfig:
    axis: str = ""
    values: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [1])


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    duration: float = 30.0
    stabilization_time: float = 10.0
    filter: FilterConfig = field(default_factory=FilterConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    outputs: OutputConfig = field(default_factory=OutputConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def check_write_window(self) -> bool:
        policy = self.filter.retransmission_policy
        if policy == "auto":
            return not self.traffic.timeout > self.filter.tau
        return policy == "include_write"

    def client_prefix_list(self) -> list[tuple[int, int]]:
        """(network, prefix_len) pairs for the client address pool."""
        prefixes = self.traffic.client_prefixes
        if isinstance(prefixes, int):
            base = 10 << 24
            return [(base + (i << 16), 16) for i in range(prefixes)]
        out = []
        for cidr in prefixes:
            addr, _, plen = cidr.partition("/")
            plen = int(plen) if plen else 32
            ip = ip_from_str(addr)
            mask = ((1 << plen) - 1) << (32 - plen) if plen else 0
            out.append((ip & mask, plen))
        return out


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a table, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for name, value in data.items():
        if name not in fields:
            where = f"{path}.{name}" if path else name
            raise ConfigError(f"unknown field '{where}'")
        default = getattr(cls(), name)
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        elif fields[name].type == "Any":
            # polymorphic fields are checked by validate_config
            kwargs[name] = value
        else:
            kwargs[name] = _coerce(value, default, sub)
    return cls(**kwargs)


def _coerce(value, default, path: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def config_from_dict(data: dict) -> ScenarioConfig:
    return _build(ScenarioConfig, data, "")


def load_config(path: str | Path, overrides: list[str] | None = None) -> ScenarioConfig:
    raw = Path(path).read_text(encoding="utf-8")
    try:
        data = tomllib.loads(raw)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides or ():
        apply_override(data, item)
    return config_from_dict(data)


def parse_value(text: str):
    """Parse an override value: TOML scalar/array syntax, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(data: dict, item: str) -> None:
    path, sep, text = item.partition("=")
    if not sep or not path.strip():
        raise ConfigError(f"override must look like path=value, got {item!r}")
    set_path(data, path.strip(), parse_value(text.strip()))


def set_path(data: dict, path: str, value) -> None:
    parts = path.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {path}: '{p}' is not a table")
    node[parts[-1]] = value


def get_path(cfg: ScenarioConfig, path: str):
    node: Any = cfg
    for p in path.split("."):
        if not dataclasses.is_dataclass(node) or not hasattr(node, p):
            raise ConfigError(f"unknown field '{path}'")
        node = getattr(node, p)
    return node


def with_value(cfg: ScenarioConfig, path: str, value) -> ScenarioConfig:
    """Copy of ``cfg`` with one dotted field replaced (type-checked like a file value)."""
    data = copy.deepcopy(cfg.to_dict())
    set_path(data, path, value)
    return config_from_dict(data)


def numeric_fields(cfg: ScenarioConfig | None = None, prefix: str = "") -> list[str]:
    """Dotted names of every numeric (non-bool) field; these are the valid sweep axes."""
    node = cfg if cfg is not None else ScenarioConfig()
    out = []
    for f in dataclasses.fields(node):
        if prefix == "" and f.name == "sweep":
            continue
        value = getattr(node, f.name)
        name = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.extend(numeric_fields(value, name + "."))
        elif isinstance(value, (int, float)) and not isinstance(value, bool):
            out.append(name)
    return out


@dataclass(frozen=True)
class Issue:
    severity: str  # "error" or "warning"
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.field}: {self.message}"


def validate_config(cfg: ScenarioConfig) -> list[Issue]:
    """Return every problem found; an empty list means the scenario is runnable."""
    issues: list[Issue] = []

    def err(fld, msg):
        issues.append(Issue("error", fld, msg))

    def warn(fld, msg):
        issues.append(Issue("warning", fld, msg))

    f, t, topo, p = cfg.filter, cfg.traffic, cfg.topology, cfg.protocol
    d = topo.delays

    if cfg.duration <= 0:
        err("duration", "must be positive")
    if cfg.stabilization_time < 0:
        err("stabilization_time", "must be non-negative")
    if f.engine not in ("react", "cbf"):
        err("filter.engine", f"must be 'react' or 'cbf', got {f.engine!r}")
    if f.k < 1:
        err("filter.k", "need at least one index function")
    if not is_power_of_two(f.per_window_bits):
        err("filter.per_window_bits", f"{f.per_window_bits} is not a power of two")
    if f.tau <= 0:
        err("filter.tau", "must be positive")
    if f.b < 2:
        err("filter.b", "sliding window needs at least 2 filters")
    if f.two_filter_mode != (f.b == 2):
        err("filter.two_filter_mode", "two-filter mode is exactly the b = 2 layout")
    if f.retransmission_policy not in ("auto", "include_write", "exclude_write"):
        err("filter.retransmission_policy", "must be auto, include_write or exclude_write")
    if f.retransmission_policy == "exclude_write" and not t.timeout > f.tau:
        warn("filter.retransmission_policy",
             f"skipping the write window needs timeout > tau ({t.timeout} <= {f.tau})")

    if t.r <= 0:
        err("traffic.r", "request rate must be positive")
    if t.a < 0:
        err("traffic.a", "attack rate must be non-negative")
    if t.timeout <= 0:
        err("traffic.timeout", "must be positive")
    if t.max_retries < 0:
        err("traffic.max_retries", "must be non-negative")
    if t.txn_id_policy not in ("dns", "ntp"):
        err("traffic.txn_id_policy", "must be 'dns' (same id on retry) or 'ntp' (fresh id)")
    if t.num_clients < 1:
        err("traffic.num_clients", "need at least one client")
    if t.victims < 0 or t.victims > t.num_clients:
        err("traffic.victims", "must be between 0 (all clients) and num_clients")
    try:
        prefixes = cfg.client_prefix_list()
        if not prefixes:
            err("traffic.client_prefixes", "need at least one client prefix")
        elif any(plen > 30 for _, plen in prefixes):
            err("traffic.client_prefixes", "prefixes longer than /30 leave no room for clients")
    except (ValueError, TypeError) as exc:
        err("traffic.client_prefixes", str(exc))
    if t.attack_ingress != "any":
        if (not isinstance(t.attack_ingress, list) or not t.attack_ingress
                or any(not isinstance(s, int) or not 0 <= s < topo.num_switches
                       for s in t.attack_ingress)):
            err("traffic.attack_ingress", "must be 'any' or a non-empty list of switch ids")

    if topo.num_switches < 1:
        err("topology.num_switches", "every path must traverse at least one switch")
    if not 0 <= topo.request_switch < max(topo.num_switches, 1):
        err("topology.request_switch", "not a switch in this topology")
    if not 0.0 <= topo.symmetric_fraction <= 1.0:
        err("topology.symmetric_fraction", "must lie in [0, 1]")
    if topo.num_switches == 1 and topo.symmetric_fraction < 1.0:
        err("topology.symmetric_fraction", "asymmetric responses need a second switch")
    for name in ("client_switch", "switch_server", "inter_switch"):
        if getattr(d, name) < 0:
            err(f"topology.delays.{name}", "must be non-negative")
    if topo.jitter < 0:
        err("topology.jitter", "must be non-negative")
    if topo.num_switches > 1 and not d.inter_switch + topo.jitter < d.switch_server - topo.jitter:
        err("topology.delays.inter_switch",
            "inter-switch latency must stay below switch-to-server latency "
            f"({d.inter_switch}+{topo.jitter} >= {d.switch_server}-{topo.jitter})")

    if f.engine == "react" and f.b >= 2 and f.tau > 0:
        rtt = 2 * (d.switch_server + topo.jitter)
        window = f.tau * (f.b - 2) if f.b >= 3 else f.tau
        if rtt >= window:
            err("filter.tau",
                f"guaranteed lookup window {window:g}s does not cover the worst-case "
                f"switch round trip {rtt:g}s; legitimate responses would be dropped")
        if f.b >= 3 and topo.symmetric_fraction < 1.0 and not f.tau * (f.b - 2) > t.timeout:
            warn("filter.tau",
                 f"tau*(b-2) = {f.tau * (f.b - 2):g} does not exceed the client timeout "
                 f"{t.timeout:g}; retransmissions may not be recognised")

    if not 0 <= p.prefix_len <= 32:
        err("protocol.prefix_len", "must lie in [0, 32]")
    if p.forwarded_requests.capacity < 1:
        err("protocol.forwarded_requests.capacity", "must be positive")
    if p.forwarded_requests.ttl <= 0:
        err("protocol.forwarded_requests.ttl", "must be positive")
    if p.forwarding_table.capacity < 0 or p.forwarding_table.ttl < 0:
        err("protocol.forwarding_table", "capacity and ttl must be non-negative")
    if not 0.0 <= p.unmatched_threshold <= 1.0:
        err("protocol.unmatched_threshold", "must lie in [0, 1]")
    if p.ratio_window < 1:
        err("protocol.ratio_window", "must be positive")
    if f.engine == "cbf":
        if p.ntp_mode or p.peacetime_mode:
            err("filter.engine", "the counting-filter baseline has no ntp or peace-time mode")
        if topo.num_switches != 1:
            err("filter.engine", "the counting-filter baseline runs on a single switch")

    return issues


def errors_only(issues: list[Issue]) -> list[Issue]:
    return [i for i in issues if i.severity == "error"]


def config_echo(cfg: ScenarioConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
