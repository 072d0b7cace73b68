"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line; the lines are printed in the pytest
terminal summary, and also when this file is run directly with python.
Runtime is a few minutes on one core.
"""

from __future__ import annotations

import json
import math
import subprocess
import sys
from collections import Counter, deque
from pathlib import Path

import numpy as np
import pytest

from react_ddos.cli import bundled_scenarios
from react_ddos.cli import main as cli_main
from react_ddos.config import config_from_dict, load_config, with_value
from react_ddos.filters import IndexHasher, SlidingWindowFilter
from react_ddos.metrics import (
    AnalyticModel,
    compare_to_analytic,
    fn_rate,
    mean_stderr,
    summarize,
    totals_of,
)
from react_ddos.netsim import run_scenario

ROOT = Path(__file__).resolve().parent.parent
RESULTS: list[str] = []


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def sym_config(r, a, tau, bits, duration=60.0, b=4, switches=2, jitter=0.005):
    data = {
        "name": "acc",
        "duration": duration,
        "stabilization_time": 10.0,
        "filter": {"b": b, "k": 2, "per_window_bits": bits, "tau": tau,
                   "two_filter_mode": b == 2},
        "traffic": {"r": r, "a": a, "client_prefixes": 4, "num_clients": 1024},
        "topology": {"num_switches": switches, "symmetric_fraction": 1.0, "jitter": jitter,
                     "delays": {"client_switch": 0.001, "switch_server": 0.05,
                                "inter_switch": 0.005}},
    }
    return config_from_dict(data)


# -- 1 --------------------------------------------------------------------

def criterion_symmetric_zero_fp():
    grid = []
    for i, r in enumerate((100.0, 250.0, 500.0, 750.0, 1000.0)):
        for j, (mult, tau, bits) in enumerate(((0.0, 2.0, 1 << 14), (1.0, 4.0, 1 << 12),
                                               (10.0, 1.0, 1 << 16), (5.0, 3.0, 1 << 10))):
            grid.append((r, mult * r, tau, bits, 100 + 4 * i + j))
    dropped, delivered = 0, 0
    for r, a, tau, bits, seed in grid:
        s = run_scenario(sym_config(r, a, tau, bits), seed).summary
        dropped += s["legit_dropped"]
        delivered += s["legit_delivered"]
    ok = dropped == 0 and delivered > 0 and len(grid) >= 20
    return ok, f"{len(grid)} scenarios, {delivered} legit delivered, {dropped} dropped (need 0)"


def test_symmetric_zero_fp():
    report("symmetric zero false positives", *criterion_symmetric_zero_fp())


# -- 2 --------------------------------------------------------------------

def criterion_analytic_tracking():
    # one device, as in the sensitivity experiments: a second switch that
    # never sees requests would block its share of the attack outright
    points = ((100.0, 2.0), (200.0, 2.0), (100.0, 4.0), (200.0, 4.0))
    bits = 1 << 12
    lines, ok = [], True
    for r, tau in points:
        runs = [run_scenario(sym_config(r, 10 * r, tau, bits, duration=tau * 3 + 20.0,
                                        switches=1), seed)
                for seed in range(1, 11)]
        cfg = sym_config(r, 10 * r, tau, bits)
        model = AnalyticModel.from_config(cfg)
        c = compare_to_analytic(runs, model)
        ok &= c.within
        lines.append(f"(r={r:g},tau={tau:g}) fn={c.measured_fn:.4f}±{c.stderr:.4f} "
                     f"band=[{c.low:.4f},{c.high:.4f}]")
    return ok, "; ".join(lines)


def test_analytic_fn_tracking():
    report("analytic FN tracking", *criterion_analytic_tracking())


# -- 3 --------------------------------------------------------------------

def criterion_attack_volume():
    r, tau, bits = 100.0, 2.0, 1 << 12
    warm = tau * 3
    fns = {}
    for mult in (10, 250):
        vals = []
        for seed in range(1, 11):
            cfg = sym_config(r, mult * r, tau, bits, duration=warm + 14.0, switches=1)
            run = run_scenario(cfg, seed)
            vals.append(fn_rate(totals_of([x for x in run.per_second if x["t"] >= warm])))
        fns[mult] = mean_stderr(vals)
    (m1, s1), (m2, s2) = fns[10], fns[250]
    combined = math.hypot(s1, s2)
    diff = abs(m1 - m2)
    ok = diff < 3 * combined if combined > 0 else diff == 0
    return ok, (f"a=10r fn={m1:.4f}±{s1:.4f}, a=250r fn={m2:.4f}±{s2:.4f}, "
                f"|diff|={diff:.4f} vs 3SE={3 * combined:.4f}")


def test_attack_volume_independence():
    report("attack volume independence", *criterion_attack_volume())


# -- 4, 5 -------------------------------------------------------------------

ASYM_FN = {0.3: 0.025, 0.5: 0.025, 0.7: 0.021}
ASYM_BCAST = {0.3: 0.07, 0.5: 0.04, 0.7: 0.02}
ASYM_SEEDS = (1, 2, 3)
_asym_cache: dict = {}


def asym_runs():
    if not _asym_cache:
        base = load_config(bundled_scenarios()["asymmetric"])
        for frac in ASYM_FN:
            cfg = with_value(base, "topology.symmetric_fraction", frac)
            _asym_cache[frac] = (cfg, [run_scenario(cfg, s) for s in ASYM_SEEDS])
    return _asym_cache


def criterion_asymmetric_fn():
    ok, parts = True, []
    for frac, target in ASYM_FN.items():
        _, runs = asym_runs()[frac]
        fn = float(np.mean([run.summary["fn_rate"] for run in runs]))
        hit = abs(fn - target) <= 0.015
        ok &= hit
        parts.append(f"{int(frac * 100)}% sym fn={100 * fn:.2f}% (target {100 * target:.1f}±1.5)")
    fn70 = float(np.mean([run.summary["fn_rate"] for run in asym_runs()[0.7][1]]))
    blocked = 1 - fn70
    ok &= blocked > 0.97
    parts.append(f"70% sym blocks {100 * blocked:.1f}% (need >97%)")
    return ok, "; ".join(parts)


def test_asymmetric_false_negatives():
    report("asymmetric false negative rates", *criterion_asymmetric_fn())


def criterion_broadcast_stabilization():
    ok, parts = True, []
    for frac, target in ASYM_BCAST.items():
        cfg, runs = asym_runs()[frac]
        stable = float(np.mean([summarize(run, 10.0)["stable_broadcast_rate"] for run in runs]))
        hit = abs(stable - target) <= 0.03
        series = np.sum([[row["broadcasts"] for row in run.per_second] for run in runs], axis=0)
        # the first retransmission wave: the sharpest rise sits at t ~ T and
        # the following seconds run well above the stable level
        T = int(cfg.traffic.timeout)
        jump_t = int(np.argmax(np.diff(series))) + 1
        wave = series[T:T + 5].mean()
        steady = series[10:].mean()
        spike = abs(jump_t - T) <= 1 and wave >= 2 * steady
        peak_t = jump_t
        ok &= hit and spike
        parts.append(f"{int(frac * 100)}% sym stable bcast={100 * stable:.2f}% "
                     f"(target {100 * target:.0f}±3), spike at t={peak_t}s "
                     f"({wave / max(steady, 1):.1f}x steady): {'yes' if spike else 'no'}")
    return ok, "; ".join(parts)


def test_broadcast_stabilization():
    report("broadcast stabilization", *criterion_broadcast_stabilization())


# -- 6 --------------------------------------------------------------------

def _monotone(xs):
    return all(b >= a for a, b in zip(xs, xs[1:]))


def criterion_cbf():
    ratio = load_config(bundled_scenarios()["cbf_ratio"])
    r = ratio.traffic.r
    ratios = (10, 50, 100, 250)
    one_way = (0.05, 0.1, 0.25)  # round trip d = 100, 200, 500 ms
    grid = [("ratio", q, with_value(ratio, "traffic.a", q * r)) for q in ratios]
    heavy = with_value(ratio, "traffic.a", 250 * r)
    grid += [("delay", d, with_value(heavy, "topology.delays.switch_server", d)) for d in one_way]

    cbf_fp, react_fp, react_fn = {}, [], {}
    for axis, value, cfg in grid:
        s = run_scenario(cfg, 1).summary
        cbf_fp[(axis, value)] = s["fp_rate"]
        rcfg = with_value(cfg, "filter.engine", "react")
        rs = run_scenario(rcfg, 1).summary
        react_fp.append(rs["fp_rate"])
        react_fn[(axis, value)] = (rs["fn_rate"], rs["attack_delivered"] + rs["attack_dropped"])

    ratio_fp = [cbf_fp[("ratio", q)] for q in ratios]
    delay_fp = [cbf_fp[("delay", d)] for d in one_way]
    fns = [f for f, _ in react_fn.values()]
    # flat: every pair within 3 combined binomial standard errors
    flat = True
    items = list(react_fn.values())
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            (f1, n1), (f2, n2) = items[i], items[j]
            se = math.sqrt(f1 * (1 - f1) / n1 + f2 * (1 - f2) / n2)
            flat &= abs(f1 - f2) <= 3 * se + 1e-12
    ok = (_monotone(ratio_fp) and _monotone(delay_fp) and delay_fp[-1] > 0.5
          and max(react_fp) == 0.0 and flat)
    detail = (f"cbf fp vs a/r {ratios}: {[round(x, 4) for x in ratio_fp]}; "
              f"vs d (100,200,500 ms): {[round(x, 4) for x in delay_fp]}; "
              f"react fp max={max(react_fp)}, react fn {min(fns):.4f}..{max(fns):.4f} "
              f"({'flat' if flat else 'not flat'})")
    return ok, detail


def test_cbf_degradation():
    report("cbf degradation vs react", *criterion_cbf())


# -- 7 --------------------------------------------------------------------

def criterion_listing_coverage(tmp_dir: Path):
    data = tmp_dir / ".coverage"
    report_json = tmp_dir / "coverage.json"
    proto = ROOT / "src" / "react_ddos" / "protocol.py"
    cmd = [sys.executable, "-m", "coverage", "run", "--branch", f"--data-file={data}",
           f"--include={proto}", "-m", "pytest", "-q", "-p", "no:cacheprovider",
           str(ROOT / "tests" / "test_protocol.py")]
    proc = subprocess.run(cmd, capture_output=True, text=True, cwd=ROOT)
    if proc.returncode != 0:
        return False, "listing unit tests failed:\n" + proc.stdout[-2000:]
    subprocess.run([sys.executable, "-m", "coverage", "json", f"--data-file={data}",
                    "-o", str(report_json)], check=True, capture_output=True, cwd=ROOT)
    files = json.loads(report_json.read_text())["files"]
    funcs = next(iter(files.values()))["functions"]
    ok, parts = True, []
    for name in ("handle_request", "handle_response"):
        f = funcs[name]
        summ = f["summary"]
        complete = not f["missing_lines"] and not f.get("missing_branches")
        ok &= complete and summ["num_branches"] > 0
        parts.append(f"{name}: {summ['covered_lines']}/{summ['num_statements']} lines, "
                     f"{summ['covered_branches']}/{summ['num_branches']} branches")
    n_tests = proc.stdout.strip().splitlines()[-1]
    return ok, "; ".join(parts) + f" ({n_tests})"


def test_listing_conformance(tmp_path):
    report("listing conformance and branch coverage", *criterion_listing_coverage(tmp_path))


# -- 8 --------------------------------------------------------------------

def sliding_window_schedule(seed: int, n_ops: int = 10_000):
    """Random schedule against one filter; returns (violations, checks, negatives)."""
    rng = np.random.default_rng(seed)
    b = int(rng.integers(3, 7))
    tau = float(rng.choice([0.25, 1.0, 2.5]))
    m, k = 1 << 16, 2
    swf = SlidingWindowFilter(b, m, tau, k=k, seed=seed)
    hasher = IndexHasher(m, k, seed)
    keep, gone = tau * (b - 2), tau * (b - 1)
    horizon = tau * b  # superset of everything that can still be stored

    keys = [(int(t), int(ip)) for t, ip in zip(rng.integers(1 << 16, size=2000),
                                               rng.integers(1 << 32, size=2000))]
    last_insert: dict = {}
    recent: deque = deque()  # (time, key) within horizon
    bit_refs: Counter = Counter()
    now = 0.0
    violations = checks = negatives = 0
    gaps = rng.exponential(tau / 40, size=n_ops)
    ops = rng.random(n_ops)
    picks = rng.integers(len(keys), size=n_ops)
    for gap, op, pick in zip(gaps, ops, picks):
        now += gap
        while recent and recent[0][0] <= now - horizon:
            _, old = recent.popleft()
            for i in set(hasher.indices(old)):
                bit_refs[i] -= 1
        key = keys[pick]
        if op < 0.45:
            swf.insert(key, now)
            last_insert[key] = now
            recent.append((now, key))
            for i in set(hasher.indices(key)):
                bit_refs[i] += 1
        elif op < 0.5:
            swf.advance(now)
        else:
            checks += 1
            hit = swf.check(key, now)
            t0 = last_insert.get(key)
            if t0 is not None and now - t0 < keep and not hit:
                violations += 1
            elif (t0 is None or now - t0 >= gone) and hit:
                # a hit is legitimate only if other stored keys cover every index
                own = sum(1 for _, kk in recent if kk == key) if t0 is not None else 0
                covered = all(bit_refs[i] - own > 0 for i in set(hasher.indices(key)))
                if not covered:
                    violations += 1
            if t0 is None or now - t0 >= gone:
                negatives += 1
    return violations, checks, negatives


def criterion_sliding_window(n_seeds: int = 100, n_ops: int = 10_000):
    total_v = total_c = total_n = 0
    for seed in range(n_seeds):
        v, c, n = sliding_window_schedule(seed, n_ops)
        total_v += v
        total_c += c
        total_n += n
    ok = total_v == 0
    return ok, (f"{n_seeds} seeds x {n_ops} ops, {total_c} checks "
                f"({total_n} past expiry), {total_v} violations")


def test_sliding_window_properties():
    report("sliding window guarantees", *criterion_sliding_window())


# -- 9 --------------------------------------------------------------------

def criterion_determinism(tmp_dir: Path):
    parts, ok = [], True
    for name in sorted(bundled_scenarios()):
        outs = []
        for rep in ("a", "b"):
            out = tmp_dir / name / rep
            code = cli_main(["run", name, "--seed", "7", "--out-dir", str(out)])
            if code != 0:
                return False, f"{name} exited {code}"
            outs.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
        same = outs[0] == outs[1] and len(outs[0]) == 2
        ok &= same
        parts.append(f"{name} {'identical' if same else 'DIFFERENT'}")
    return ok, ", ".join(parts)


def test_determinism(tmp_path, capsys):
    ok, detail = criterion_determinism(tmp_path)
    capsys.readouterr()
    report("determinism of bundled scenarios", ok, detail)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
