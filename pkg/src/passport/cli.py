"""Command-line entry point: ``passport <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure (or a failed verification), 2 usage
or configuration error.  Every run writes a JSON manifest next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import a2c as a2c_mod
from . import approximator as ap
from . import evaluation as ev
from . import oracle
from . import pg as pg_mod
from .config import ExperimentConfig, load_config
from .env import net_policy, rollout
from .errors import ConfigError, PassportError
from .market import simulate


def _manifest(path: Path, sub: str, cfg: ExperimentConfig | None, seeds: dict, artifacts, t0: float):
    data = {"subcommand": sub, "config": cfg.to_mapping() if cfg is not None else None,
            "seeds": seeds, "artifacts": [str(a) for a in artifacts] + [str(path)],
            "duration_s": time.time() - t0, "version": __version__}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _side_manifest(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _write_rows(path: Path, rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# -- subcommands -----------------------------------------------------------------------
def cmd_simulate(args, t0):
    cfg = load_config(args.config)
    n = args.paths if args.paths is not None else cfg.eval.export_paths
    batch = simulate(cfg.market, cfg.time_grid, n, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    batch.to_csv(out)
    _manifest(_side_manifest(out), "simulate", cfg, {"seed": args.seed}, [out], t0)
    print(f"wrote {n} paths to {out}")


def _trajectories(policy, cfg, seed, out_dir: Path, name: str, mode="sampled"):
    tb = rollout(policy, cfg.market, cfg.time_grid, cfg.eval.export_paths, seed + 1, mode=mode)
    path = out_dir / name
    tb.to_csv(path)
    return path


def cmd_train_pg(args, t0):
    cfg = load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = pg_mod.train(cfg.pg, cfg.market, cfg.time_grid, args.seed)
    ck = out / "policy.txt"
    ap.save(res.net, ck)
    log = out / "pg_log.csv"
    _write_rows(log, res.log)
    traj = _trajectories(net_policy(res.net), cfg, args.seed, out, "pg_trajectories.csv")
    _manifest(out / "manifest.json", "train-pg", cfg, {"seed": args.seed}, [ck, log, traj], t0)
    last = res.log[-1] if res.log else {}
    print(f"policy saved to {ck}; final target agreement {last.get('target_agreement', float('nan')):.3f}")


def cmd_train_a2c(args, t0):
    cfg = load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = a2c_mod.train(cfg.a2c, cfg.market, cfg.time_grid, args.seed)
    actor, critic = out / "actor.txt", out / "critic.txt"
    ap.save(res.actor, actor)
    ap.save(res.critic, critic)
    log = out / "a2c_log.csv"
    _write_rows(log, res.log)
    traj = _trajectories(net_policy(res.actor), cfg, args.seed, out, "a2c_trajectories.csv")
    _manifest(out / "manifest.json", "train-a2c", cfg, {"seed": args.seed}, [actor, critic, log, traj], t0)
    print(f"actor saved to {actor}, critic to {critic}; last mean |x_T| {res.log[-1]['mean_abs_xT']:.4f}"
          if res.log else f"actor saved to {actor}")


def cmd_train_dh(args, t0):
    cfg = load_config(args.config)
    out = Path(args.out_dir)
    res = ev.deep_hedging_train(cfg.market, cfg.time_grid, cfg.eval.deep_hedging, args.seed)
    files = res.save(out)
    log = out / "dh_log.csv"
    _write_rows(log, res.log)
    diag = out / "dh_diagnostics.csv"
    _write_rows(diag, ev.deep_hedging_diagnostics(res.nets, cfg.market, cfg.time_grid,
                                                  cfg.eval.export_paths, args.seed + 1))
    _manifest(out / "manifest.json", "train-dh", cfg, {"seed": args.seed}, files + [log, diag], t0)
    print(f"{len(files)} step networks saved to {out}")


def _estimate_row(label, run):
    p, a = run.price, run.abs_payoff
    return {"strategy": label, "mean": p.mean, "stderr": p.stderr, "ci_low": p.ci_low,
            "ci_high": p.ci_high, "n_paths": p.n_paths, "mean_abs_xT": a.mean,
            "abs_ci_low": a.ci_low, "abs_ci_high": a.ci_high, "mean_xT": run.mean_x,
            "identity_gap": run.identity_gap}


def cmd_price(args, t0):
    cfg = load_config(args.config)
    spec = ev.StrategySpec.parse(args.strategy[0], heuristic=args.heuristic)
    n = args.paths or cfg.eval.n_paths
    run = ev.price(spec, cfg.market, cfg.time_grid, n, args.seed)
    out = Path(args.out)
    _write_rows(out, [_estimate_row(spec.label, run)])
    _manifest(_side_manifest(out), "price", cfg, {"seed": args.seed}, [out], t0)
    p = run.price
    print(f"{spec.label}: price {p.mean:.6f} (95% CI {p.ci_low:.6f} .. {p.ci_high:.6f}), "
          f"mean |x_T| {run.abs_payoff.mean:.6f}")


def cmd_surface(args, t0):
    cfg = load_config(args.config)
    text = args.strategy[0]
    out = Path(args.out)
    s_nodes = list(cfg.eval.surface_s)
    if text.startswith("critic:"):
        table = ev.critic_price_surface(text.partition(":")[2], s_nodes, cfg.eval.surface_x,
                                        d=cfg.market.d)
    else:
        spec = ev.StrategySpec.parse(text, heuristic=args.heuristic)
        n = args.paths or cfg.eval.surface_paths
        table = ev.price_surface(spec, cfg.market, cfg.time_grid, s_nodes, cfg.eval.surface_x, n, args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out)
    _manifest(_side_manifest(out), "surface", cfg, {"seed": args.seed}, [out], t0)
    print(f"wrote {len(table.rows)} surface nodes to {out}")


def cmd_compare(args, t0):
    cfg = load_config(args.config)
    specs = [ev.StrategySpec.parse(s, heuristic=args.heuristic) for s in args.strategy]
    n = args.paths or cfg.eval.n_paths
    report = ev.payoff_report(specs, cfg.market, cfg.time_grid, n, args.seed)
    out = Path(args.out)
    samples = out.with_name(out.stem + "_samples.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(samples, out)
    _manifest(_side_manifest(out), "compare", cfg, {"seed": args.seed}, [out, samples], t0)
    for row in report.summary_rows():
        print(f"{row['strategy']}: mean |x_T| {row['mean_abs_xT']:.6f} "
              f"[{row['ci_low']:.6f}, {row['ci_high']:.6f}]")


def cmd_verify(args, t0):
    cfg = load_config(args.config) if args.config else None
    suites = ["lemmas", "dp", "variance"] if args.suite == "all" else [args.suite]
    nx = cfg.grid.nx if cfg else 201
    ns = cfg.grid.ns if cfg else 41
    results = []
    artifacts = []
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    for suite in suites:
        if suite == "lemmas":
            results += oracle.suite_lemmas(args.seed, nx, ns)
        elif suite == "dp":
            results += oracle.suite_dp(args.seed, nx, ns)
        else:
            var = cfg.eval.variance if cfg else None
            kw = {} if var is None else {"T": var.T, "N_list": var.N_list, "n_iters": var.n_iters}
            params = cfg.market if cfg and cfg.market.d == 1 else None
            checks, res = oracle.suite_variance(params, args.seed, **kw)
            results += checks
            grads = out.with_name(out.stem + "_variance.csv")
            summary = out.with_name(out.stem + "_variance_summary.csv")
            res.to_csv(grads, summary)
            artifacts += [grads, summary]
            print(f"variance study: slope {res.slope:.6g}, r2 {res.r2:.4f}")
    oracle.write_report(results, out)
    _manifest(_side_manifest(out), "verify", cfg, {"seed": args.seed}, [out] + artifacts, t0)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# -- parser -------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="passport", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate discounted asset paths")
    p.add_argument("--config", required=True)
    p.add_argument("--paths", type=int)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    for name, func, desc in (("train-pg", cmd_train_pg, "backward policy-gradient training"),
                             ("train-a2c", cmd_train_a2c, "actor-critic training"),
                             ("train-dh", cmd_train_dh, "deep-hedging baseline training")):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--out-dir", required=True)
        p.set_defaults(func=func)

    for name, func, desc in (("price", cmd_price, "price one strategy"),
                             ("surface", cmd_surface, "price surface over the [eval] grid"),
                             ("compare", cmd_compare, "payoff distributions on shared paths")):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--strategy", action="append", required=True,
                       help="analytic | constant:+e1 | random | policy:PATH | deep-hedging:DIR"
                            + (" | critic:PATH" if name == "surface" else ""))
        p.add_argument("--config", required=True)
        p.add_argument("--paths", type=int)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        p.add_argument("--heuristic", action="store_true",
                       help="allow the closed-form rule on correlated markets")
        p.set_defaults(func=func)

    p = sub.add_parser("verify", help="run oracle and property suites")
    p.add_argument("--suite", choices=("lemmas", "dp", "variance", "all"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out", default="verify_report.csv")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("price", "surface") and len(args.strategy) != 1:
        parser.error(f"{args.command} takes exactly one --strategy")
    if getattr(args, "paths", None) is not None and args.paths < 2:
        parser.error("--paths must be at least 2")
    if getattr(args, "seed", 0) < 0:
        parser.error("--seed must be non-negative")
    t0 = time.time()
    np.seterr(over="ignore", under="ignore")
    try:
        code = args.func(args, t0)
    except ConfigError as exc:
        print(f"passport: error: {exc}", file=sys.stderr)
        return 2
    except (PassportError, OSError) as exc:
        print(f"passport: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
