"""In-network request/response correlation against amplification-reflection DDoS."""

from .filters import BloomFilter, CountingBloomFilter, SlidingWindowFilter, TxnKey
from .config import ScenarioConfig, load_config, validate_config
from .metrics import AnalyticModel, RunResult, analytic_fn_bounds, summarize
from .netsim import run_scenario

__all__ = [
    "AnalyticModel",
    "BloomFilter",
    "CountingBloomFilter",
    "RunResult",
    "ScenarioConfig",
    "SlidingWindowFilter",
    "TxnKey",
    "analytic_fn_bounds",
    "load_config",
    "run_scenario",
    "summarize",
    "validate_config",
]
