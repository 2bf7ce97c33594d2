"""Command line entry point: ``nmscm {sweep,bridge,counterexample,sampler-demo,selftest}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from typing import Optional, Sequence

from .harness import GridConfig, run_bridge, run_counterexample, run_sampler_demo, run_sweep

log = logging.getLogger("nmscm")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _strings(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in _floats(text)]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nmscm", description="Non-monotone SCM benchmark runner")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-run progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sweep", help="synthetic benchmark sweep")
    s.add_argument("--config", help="JSON grid configuration (defaults to the desk-scale grid)")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--families", type=_strings)
    s.add_argument("--noises", type=_strings)
    s.add_argument("--d", type=_ints)
    s.add_argument("--n-train", type=_ints)
    s.add_argument("--seeds", type=int)
    s.add_argument("--base-seed", type=int)
    s.add_argument("--steps", type=int, help="training steps per model")

    b = sub.add_parser("bridge", help="gain versus non-monotonicity strength")
    b.add_argument("--strengths", type=_floats, default=[0.0, 0.3, 0.6, 0.9])
    b.add_argument("--noises", type=_strings, default=["skewed", "gaussian"])
    b.add_argument("--seeds", type=int, default=3)
    b.add_argument("--base-seed", type=int, default=7)
    b.add_argument("--d", type=int, default=3)
    b.add_argument("--n-train", type=int, default=10000)
    b.add_argument("--steps", type=int)
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--out", required=True)

    c = sub.add_parser("counterexample", help="observationally equivalent SCMs with different counterfactuals")
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("sampler-demo", help="balanced query selection on the toy latch")
    d.add_argument("--rollouts", type=int, default=50)
    d.add_argument("--candidates", type=int, default=8, help="candidates per rollout")
    d.add_argument("--budget", type=int, default=32)
    d.add_argument("--seed", type=int, default=7)
    d.add_argument("--out", required=True)

    sub.add_parser("selftest", help="run the quick property battery")
    return p


def grid_from_args(args) -> GridConfig:
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
    overrides = {"families": args.families, "noises": args.noises, "d": args.d, "n_train": args.n_train,
                 "seeds": args.seeds, "base_seed": args.base_seed}
    doc.update({k: v for k, v in overrides.items() if v is not None})
    if args.steps is not None:
        doc["train"] = {**doc.get("train", {}), "steps": args.steps}
    return GridConfig.from_dict(doc)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    start = time.perf_counter()
    try:
        if args.command == "sweep":
            res = run_sweep(grid_from_args(args), args.out, jobs=args.jobs, log=log.info)
            failed = [r for r in res.records if r.status != "ok"]
            ok = not failed
            print(f"sweep: {len(res.records)} records, {len(failed)} failed -> {args.out}")
        elif args.command == "bridge":
            train = {"steps": args.steps} if args.steps is not None else None
            res = run_bridge(args.strengths, args.noises, args.seeds, args.out, base_seed=args.base_seed,
                             d=args.d, n_train=args.n_train, train=train, jobs=args.jobs, log=log.info)
            failed = [r for r in res.records if r.status != "ok"]
            ok = not failed
            print(f"bridge: {len(res.records)} runs, slope {res.slope:.3f}, Spearman {res.spearman_rho:.3f} "
                  f"(p {res.spearman_p:.3g}) -> {args.out}")
        elif args.command == "counterexample":
            run_counterexample(args.out, seed=args.seed)
            ok = True
            print(f"counterexample -> {args.out}")
        elif args.command == "sampler-demo":
            sel, st = run_sampler_demo(args.rollouts, args.budget, args.seed, args.out, per_rollout=args.candidates)
            ok = not sel.short
            print(f"sampler-demo: {st.queries} queries, change rate {st.change_rate:.3f}, "
                  f"transitions {st.transition_string()} -> {args.out}")
        else:
            from .selftest import run_selftest

            ok = run_selftest()
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    log.info("finished in %.1fs", time.perf_counter() - start)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
