"""Command-line front end.

    qsched run            --config PATH --policy NAME [--seed S] [--runs N] [--out DIR]
    qsched compare        --config PATH --policies A,B,... [--seed S] [--runs N] [--out DIR]
    qsched tail           --config PATH --policy NAME --t SLOT [--xs X1,X2,...] [--out DIR]
    qsched slackness      --lambda L1,L2,... --mu "r1c1,r1c2;r2c1,r2c2" [--out FILE]
    qsched counterexample --horizon N --forced BOOL --seed S [--policy NAME] [--out DIR]

Exit status: 0 success, 2 configuration error, 3 runtime contract violation.
``QSCHED_THREADS`` caps the number of worker threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from pathlib import Path

import numpy as np

from .capacity import max_slackness
from .config import load_plan
from .errors import ConfigError, ContractViolation, InfeasibleTarget
from .experiments import (
    ExperimentPlan, RunAggregate, aggregate_runs, run_counterexample, run_policy, tail_estimate,
)

EXIT_CONFIG = 2
EXIT_CONTRACT = 3


def fmt(x: float) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if math.isinf(x):
        return "-inf" if x < 0 else "inf"
    if math.isnan(x):
        return "nan"
    return format(float(x), ".10g")


def write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def write_timeseries(out: Path, agg: RunAggregate) -> Path:
    path = out / f"timeseries_{agg.policy}.csv"
    write_csv(path, ["t", "mean_total_q", "ci_lo", "ci_hi"],
              zip(agg.times, agg.mean_total_q, agg.ci_lo, agg.ci_hi))
    return path


def _plan(args) -> ExperimentPlan:
    plan = load_plan(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "runs", None) is not None:
        changes["num_runs"] = args.runs
    return dataclasses.replace(plan, **changes) if changes else plan


def _parse_floats(text: str, what: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--{what}: expected a comma-separated list of numbers, got {text!r}") from None


def cmd_run(args) -> int:
    plan = _plan(args)
    spec = plan.policy(args.policy)
    agg = aggregate_runs(run_policy(plan, spec))
    path = write_timeseries(Path(args.out), agg)
    print(f"{spec.name}: time_avg_q={fmt(agg.time_avg_q)} final_mean_q={fmt(agg.final_mean_q)} -> {path}")
    return 0


def cmd_compare(args) -> int:
    names = [n.strip() for n in args.policies.split(",") if n.strip()]
    if len(names) < 2:
        raise ConfigError("--policies: compare needs at least two policies")
    plan = _plan(args)
    specs = [plan.policy(n) for n in names]
    out = Path(args.out)
    rows = []
    for spec in specs:
        agg = aggregate_runs(run_policy(plan, spec))
        write_timeseries(out, agg)
        rows.append((spec.name, agg.time_avg_q, agg.final_mean_q, int(agg.stable)))
        print(f"{spec.name}: time_avg_q={fmt(agg.time_avg_q)} final_mean_q={fmt(agg.final_mean_q)} "
              f"stable={int(agg.stable)}")
    with open(out / "summary.csv", "w", encoding="ascii", newline="\n") as fh:
        fh.write("policy,time_avg_q,final_mean_q,stable\n")
        for name, avg, final, stable in rows:
            fh.write(f"{name},{fmt(avg)},{fmt(final)},{stable}\n")
    return 0


def cmd_tail(args) -> int:
    plan = _plan(args)
    if args.t not in plan.tail_slots:
        raise ConfigError(f"--t: slot {args.t} is not in experiment.tail_slots {list(plan.tail_slots)}")
    spec = plan.policy(args.policy)
    trs = run_policy(plan, spec)
    xs = _parse_floats(args.xs, "xs") if args.xs else None
    fit = tail_estimate(trs, xs=xs, t=args.t)
    path = Path(args.out) / f"tail_{spec.name}_t{args.t}.csv"
    write_csv(path, ["x", "survival", "log_survival"], zip(fit.xs, fit.survival, fit.log_survival))
    if fit.available:
        print(f"slope={fmt(fit.slope)} r2={fmt(fit.r2)}")
    else:
        print("slope=unavailable r2=unavailable")
    return 0


def cmd_slackness(args) -> int:
    lam = _parse_floats(args.lam, "lambda")
    try:
        mu = [[float(x) for x in row.split(",")] for row in args.mu.split(";") if row.strip()]
    except ValueError:
        raise ConfigError(f"--mu: expected rows like '0.5,0.5;0.5,0.5', got {args.mu!r}") from None
    if len({len(r) for r in mu}) != 1:
        raise ConfigError("--mu: rows must all have the same length")
    delta, alpha = max_slackness(lam, mu)
    print(f"delta_max={delta:.6f}")
    for row in alpha:
        print(" ".join(f"{a:.6f}" for a in row))
    if args.out:
        write_csv(Path(args.out), ["i", "j", "alpha"],
                  ((i, j, alpha[i, j]) for i in range(alpha.shape[0]) for j in range(alpha.shape[1])))
    return 0


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def cmd_counterexample(args) -> int:
    res = run_counterexample(args.horizon, args.forced, args.seed, policy=args.policy)
    print(f"slope={fmt(res.slope)} mean_total_q={fmt(res.mean_total_q)}")
    if args.out:
        write_csv(Path(args.out) / f"counterexample_{args.policy}.csv", ["t", "total_q"],
                  zip(res.times, res.total_q))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsched", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, policies=False):
        p.add_argument("--config", required=True)
        if policies:
            p.add_argument("--policies", required=True)
        else:
            p.add_argument("--policy", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--runs", type=int)
        p.add_argument("--out", default=".")

    common(sub.add_parser("run", help="simulate one policy"))
    common(sub.add_parser("compare", help="simulate several policies"), policies=True)
    tail = sub.add_parser("tail", help="tail of ||Q(t)||_2 at one slot")
    common(tail)
    tail.add_argument("--t", type=int, required=True)
    tail.add_argument("--xs")

    sl = sub.add_parser("slackness", help="maximum traffic slackness of a stationary instance")
    sl.add_argument("--lambda", dest="lam", required=True)
    sl.add_argument("--mu", required=True)
    sl.add_argument("--out")

    ce = sub.add_parser("counterexample", help="empirical-mean lock-in instance")
    ce.add_argument("--horizon", type=int, default=20000)
    ce.add_argument("--forced", type=_parse_bool, default=True)
    ce.add_argument("--seed", type=int, default=0)
    ce.add_argument("--policy", default="empirical_mean", choices=["empirical_mean", "oracle"])
    ce.add_argument("--out")
    return parser


COMMANDS = {
    "run": cmd_run, "compare": cmd_compare, "tail": cmd_tail,
    "slackness": cmd_slackness, "counterexample": cmd_counterexample,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and args.seed < 0:
        print("error: --seed must be nonnegative", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "runs", None) is not None and args.runs < 1:
        print("error: --runs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InfeasibleTarget) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
