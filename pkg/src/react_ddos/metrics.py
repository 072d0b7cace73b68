"""Run metrics, the closed-form misclassification model, and CSV emission."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

PER_SECOND_COLUMNS = (
    "t",
    "legit_delivered",
    "legit_dropped",
    "attack_delivered",
    "attack_dropped",
    "requests_sent",
    "retransmissions",
    "broadcasts",
    "rules_installed",
)
COUNT_COLUMNS = PER_SECOND_COLUMNS[1:]


@dataclass
class RunResult:
    per_second: list[dict[str, int]]
    summary: dict[str, float] = field(default_factory=dict)
    config_echo: dict = field(default_factory=dict)
    seed: int = 0
    trace: list[str] | None = None

    @property
    def duration(self) -> float:
        return float(self.config_echo.get("duration", len(self.per_second)))


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def fn_rate(totals: dict) -> float:
    """Share of attack responses that got through."""
    return _ratio(totals["attack_delivered"], totals["attack_delivered"] + totals["attack_dropped"])


def fp_rate(totals: dict) -> float:
    """Share of legitimate responses that were dropped."""
    return _ratio(totals["legit_dropped"], totals["legit_dropped"] + totals["legit_delivered"])


def broadcast_rate(totals: dict) -> float:
    """Broadcasts per request sent, retransmissions included."""
    return _ratio(totals["broadcasts"], totals["requests_sent"])


def totals_of(rows: list[dict[str, int]]) -> dict[str, int]:
    out = {c: 0 for c in COUNT_COLUMNS}
    for row in rows:
        for c in COUNT_COLUMNS:
            out[c] += row[c]
    return out


def rates_of(totals: dict) -> dict[str, float]:
    return {
        "fn_rate": fn_rate(totals),
        "fp_rate": fp_rate(totals),
        "broadcast_rate": broadcast_rate(totals),
    }


def summarize(run: RunResult, stabilization_time: float = 10.0) -> dict[str, float]:
    """Totals and rates for the whole run, the bootstrap phase and the stable phase.

    Rows are one-second bins keyed by their start time; a bin belongs to the
    stable phase when it starts at or after ``stabilization_time``.
    """
    rows = run.per_second
    early = [r for r in rows if r["t"] < stabilization_time]
    late = [r for r in rows if r["t"] >= stabilization_time]
    out: dict[str, float] = {}
    for label, subset in (("", rows), ("bootstrap_", early), ("stable_", late)):
        totals = totals_of(subset)
        if not label:
            out.update(totals)
        for name, value in rates_of(totals).items():
            out[label + name] = value
    out["stabilization_time"] = stabilization_time
    return out


@dataclass(frozen=True)
class AnalyticModel:
    """Closed-form load and false-positive model of the sliding window.

    ``s`` is the total number of bits across all ``b`` filters.
    """

    b: int
    k: int
    r: float
    tau: float
    s: float

    @property
    def load(self) -> float:
        return self.b * self.r * self.tau / self.s

    @property
    def epsilon(self) -> float:
        return (1.0 - math.exp(-self.k * self.load)) ** self.k

    @classmethod
    def from_config(cls, cfg) -> "AnalyticModel":
        f = cfg.filter
        return cls(b=f.b, k=f.k, r=cfg.traffic.r, tau=f.tau, s=f.b * f.per_window_bits)


def analytic_fn_bounds(model: AnalyticModel, variant: str = "standard") -> tuple[float, float]:
    """Attack pass-through probability just after and just before a rotation.

    ``standard``: b-2 full windows are probed right after a swap, b-1 right
    before. ``two_filter`` (no clean window): b-1 and b.
    """
    if variant not in ("standard", "two_filter"):
        raise ValueError(f"unknown variant {variant!r}")
    shift = 1 if variant == "two_filter" else 0
    keep = 1.0 - model.epsilon
    lo = model.b - 2 + shift
    return 1.0 - keep ** lo, 1.0 - keep ** (lo + 1)


def analytic_false_broadcast_bound(model: AnalyticModel) -> float:
    """Upper bound on fresh requests mistaken for retries when the write window is skipped."""
    if model.b < 3:
        raise ValueError("skipping the write window is only defined for b >= 3")
    return 1.0 - (1.0 - model.epsilon) ** (model.b - 2)


def mean_stderr(values: list[float]) -> tuple[float, float]:
    n = len(values)
    if n == 0:
        return 0.0, 0.0
    mean = sum(values) / n
    if n == 1:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


@dataclass
class AnalyticComparison:
    measured_fn: float
    stderr: float
    low: float
    high: float
    margin: float
    attack_samples: int = 0

    @property
    def within(self) -> bool:
        # nothing to misclassify, nothing to contradict the model
        if self.attack_samples == 0:
            return True
        return self.low - self.margin <= self.measured_fn <= self.high + self.margin


def compare_to_analytic(runs: RunResult | list[RunResult], model: AnalyticModel,
                        variant: str = "standard", warmup: float | None = None,
                        n_sigma: float = 3.0) -> AnalyticComparison:
    """Measured FN (mean over runs, after warm-up) against the analytic band.

    The band is widened by ``n_sigma`` standard errors of the mean across
    runs. Warm-up defaults to the time needed to fill every probed window.
    """
    if isinstance(runs, RunResult):
        runs = [runs]
    if warmup is None:
        warmup = model.tau * (model.b - 1 if variant == "standard" else model.b)
    totals = [totals_of([r for r in run.per_second if r["t"] >= warmup]) for run in runs]
    mean, se = mean_stderr([fn_rate(t) for t in totals])
    lo, hi = analytic_fn_bounds(model, variant)
    samples = sum(t["attack_delivered"] + t["attack_dropped"] for t in totals)
    return AnalyticComparison(mean, se, lo, hi, n_sigma * se, samples)


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def per_second_csv(run: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PER_SECOND_COLUMNS)
    for row in run.per_second:
        w.writerow([format_value(row[c]) for c in PER_SECOND_COLUMNS])
    return buf.getvalue()


SUMMARY_COLUMNS = (
    "scenario", "axis", "value", "seed",
    *COUNT_COLUMNS,
    "fn_rate", "fp_rate", "broadcast_rate",
    "stable_fn_rate", "stable_fp_rate", "stable_broadcast_rate",
)
AGGREGATE_COLUMNS = ("axis", "value", "runs", "metric", "mean", "stderr")
AGGREGATE_METRICS = ("fn_rate", "fp_rate", "broadcast_rate", "stable_fn_rate",
                     "stable_fp_rate", "stable_broadcast_rate")


def summary_row(scenario: str, axis: str, value, seed: int, summary: dict) -> dict:
    row = {"scenario": scenario, "axis": axis, "value": value, "seed": seed}
    for c in SUMMARY_COLUMNS[4:]:
        row[c] = summary[c]
    return row


def rows_to_csv(rows: list[dict], columns: tuple[str, ...]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([format_value(row[c]) for c in columns])
    return buf.getvalue()


def aggregate(rows: list[dict], axis: str) -> list[dict]:
    """Mean and standard error of each rate per axis value, in first-seen value order."""
    groups: dict = {}
    for row in rows:
        groups.setdefault(row["value"], []).append(row)
    out = []
    for value, members in groups.items():
        for metric in AGGREGATE_METRICS:
            mean, se = mean_stderr([float(m[metric]) for m in members])
            out.append({"axis": axis, "value": value, "runs": len(members),
                        "metric": metric, "mean": mean, "stderr": se})
    return out


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
