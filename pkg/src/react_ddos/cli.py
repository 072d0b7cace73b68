"""Command-line entry point: run, sweep, analyze, validate.

Exit codes: 0 success, 1 usage or parse error, 2 validation failure,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

from .config import (
    ConfigError,
    ScenarioConfig,
    errors_only,
    get_path,
    load_config,
    numeric_fields,
    parse_value,
    validate_config,
    with_value,
)
from .metrics import (
    AGGREGATE_COLUMNS,
    SUMMARY_COLUMNS,
    AnalyticModel,
    aggregate,
    analytic_false_broadcast_bound,
    analytic_fn_bounds,
    per_second_csv,
    rows_to_csv,
    summarize,
    summary_row,
    write_text,
)
from .netsim import run_scenario

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def bundled_scenarios() -> dict[str, Path]:
    root = resources.files("react_ddos") / "scenarios"
    return {Path(p.name).stem: Path(str(p)) for p in root.iterdir() if p.name.endswith(".toml")}


def resolve_scenario(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    bundled = bundled_scenarios()
    if name in bundled:
        return bundled[name]
    raise FileNotFoundError(f"file not found: {name} (bundled scenarios: {', '.join(sorted(bundled))})")


def _load(args) -> ScenarioConfig:
    cfg = load_config(resolve_scenario(args.config), args.set)
    issues = validate_config(cfg)
    for issue in issues:
        print(issue, file=sys.stderr)
    if errors_only(issues):
        raise _Invalid()
    return cfg


class _Invalid(Exception):
    pass


def _pct(x: float) -> str:
    return f"{100 * x:.2f}%"


def print_summary(cfg: ScenarioConfig, seed: int, summary: dict, out=None) -> None:
    out = out or sys.stdout
    attack_total = summary["attack_delivered"] + summary["attack_dropped"]
    legit_total = summary["legit_delivered"] + summary["legit_dropped"]
    lines = [
        ("scenario", f"{cfg.name} (seed {seed})"),
        ("requests sent", f"{summary['requests_sent']} ({summary['retransmissions']} retransmissions)"),
        ("legit responses", f"{summary['legit_delivered']} delivered, {summary['legit_dropped']} dropped"),
        ("attack responses", f"{summary['attack_delivered']} delivered, {summary['attack_dropped']} dropped"),
        ("FP rate", _pct(summary["fp_rate"]) if legit_total else "n/a"),
        ("FN rate", _pct(summary["fn_rate"]) if attack_total else "n/a"),
        ("broadcast rate", _pct(summary["broadcast_rate"])),
        (f"stable (t >= {summary['stabilization_time']:g}s) FN",
         _pct(summary["stable_fn_rate"]) if attack_total else "n/a"),
        ("stable broadcast rate", _pct(summary["stable_broadcast_rate"])),
        ("rules installed", str(summary["rules_installed"])),
    ]
    width = max(len(k) for k, _ in lines)
    for k, v in lines:
        print(f"{k:<{width}}  {v}", file=out)


def _one_run(cfg: ScenarioConfig, seed: int):
    run = run_scenario(cfg, seed)
    summary = dict(run.summary)
    summary.update(summarize(run, cfg.stabilization_time))
    return run, summary


def cmd_run(args) -> int:
    cfg = _load(args)
    out_dir = Path(args.out_dir or cfg.outputs.csv_dir)
    if args.trace:
        cfg.outputs.trace = True
    run, summary = _one_run(cfg, args.seed)
    stem = f"{cfg.name}_seed{args.seed}"
    write_text(out_dir / f"{stem}.csv", per_second_csv(run))
    row = summary_row(cfg.name, "", "", args.seed, summary)
    write_text(out_dir / f"{stem}_summary.csv", rows_to_csv([row], SUMMARY_COLUMNS))
    if run.trace is not None:
        write_text(out_dir / f"{stem}_trace.tsv", "\n".join(run.trace) + "\n")
    print_summary(cfg, args.seed, summary)
    return EXIT_OK


def _sweep_job(job):
    cfg, axis, value, seed = job
    run, summary = _one_run(cfg, seed)
    return summary_row(cfg.name, axis, value, seed, summary), per_second_csv(run)


def _split_list(text: str | None):
    if text is None:
        return None
    return [parse_value(v.strip()) for v in text.split(",") if v.strip()]


def cmd_sweep(args) -> int:
    base = _load(args)
    axis = args.axis or base.sweep.axis
    values = _split_list(args.values) or list(base.sweep.values)
    seeds = [int(s) for s in (_split_list(args.seeds) or base.sweep.seeds)]
    valid = numeric_fields(base)
    if axis not in valid:
        print(f"unknown sweep axis {axis!r}; valid axes: {', '.join(valid)}", file=sys.stderr)
        return EXIT_USAGE
    if not values:
        print("no sweep values given", file=sys.stderr)
        return EXIT_USAGE
    jobs = []
    for value in values:
        cfg = with_value(base, axis, value)
        bad = errors_only(validate_config(cfg))
        if bad:
            for issue in bad:
                print(f"{axis}={value}: {issue}", file=sys.stderr)
            return EXIT_INVALID
        for seed in seeds:
            jobs.append((cfg, axis, get_path(cfg, axis), seed))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    # summary order is (value, seed) as listed, independent of completion order
    rows = [r for r, _ in results]
    out_dir = Path(args.out_dir or base.outputs.csv_dir)
    safe_axis = axis.replace(".", "_")
    for (row, per_sec) in results:
        write_text(out_dir / f"{base.name}_{safe_axis}-{row['value']}_seed{row['seed']}.csv", per_sec)
    write_text(out_dir / f"{base.name}_sweep_{safe_axis}.csv", rows_to_csv(rows, SUMMARY_COLUMNS))
    agg = aggregate(rows, axis)
    write_text(out_dir / f"{base.name}_sweep_{safe_axis}_aggregate.csv", rows_to_csv(agg, AGGREGATE_COLUMNS))
    print(f"{'value':>12} {'runs':>5} {'fn_rate':>18} {'fp_rate':>18} {'stable_bcast':>18}")
    by_value: dict = {}
    for a in agg:
        by_value.setdefault(a["value"], {})[a["metric"]] = a
    for value, metrics in by_value.items():
        cells = [f"{metrics[m]['mean']:.4f}±{metrics[m]['stderr']:.4f}"
                 for m in ("fn_rate", "fp_rate", "stable_broadcast_rate")]
        print(f"{value!s:>12} {metrics['fn_rate']['runs']:>5} " + " ".join(f"{c:>18}" for c in cells))
    return EXIT_OK


def cmd_analyze(args) -> int:
    model = AnalyticModel(b=args.b, k=args.k, r=args.r, tau=args.tau, s=args.s)
    lo, hi = analytic_fn_bounds(model, args.variant)
    print(f"load (lambda)         {model.load:.6f}")
    print(f"per-filter FP (eps)   {model.epsilon:.6f}")
    print(f"FN after rotation     {lo:.6f}")
    print(f"FN before rotation    {hi:.6f}")
    if model.b >= 3:
        print(f"false broadcast bound {analytic_false_broadcast_bound(model):.6f}")
    else:
        print("false broadcast bound n/a (needs b >= 3)")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(resolve_scenario(args.config), args.set)
    issues = validate_config(cfg)
    for issue in issues:
        print(issue)
    if errors_only(issues):
        return EXIT_INVALID
    print(f"{cfg.name}: ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="react-ddos", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def scenario_args(p):
        p.add_argument("config", help="scenario file or bundled scenario name")
        p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                       help="override a config field, e.g. traffic.r=500")

    p = sub.add_parser("run", help="simulate one scenario")
    scenario_args(p)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out-dir")
    p.add_argument("--trace", action="store_true", help="also write a per-packet trace")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a parameter sweep over seeds")
    scenario_args(p)
    p.add_argument("--axis", help="dotted numeric field, e.g. traffic.a")
    p.add_argument("--values", help="comma-separated values")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="evaluate the closed-form model")
    p.add_argument("--b", type=int, required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--r", type=float, required=True)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--s", type=float, required=True, help="total bits across all filters")
    p.add_argument("--variant", choices=("standard", "two_filter"), default="standard")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("validate", help="check a scenario against the topology assumptions")
    scenario_args(p)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _Invalid:
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: simulation failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
