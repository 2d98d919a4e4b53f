"""Command-line entry point: solve, bench, train and verify workflows.

Machine-readable payloads go to the --out location (or standard output when
--out is absent); human-readable diagnostics go to standard error.  All
behavior is controlled by explicit flags and config files; environment
variables are never consulted.

Exit codes: solve 0=solved 2=max_iter 1=error; bench 3 if any instance
failed; verify nonzero on any theory violation.
"""

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .engine import SolverConfig, load_config, report_to_dict, solve
from .errors import SolverError, TheoryViolationError
from .policy import init_checkpoint, load_checkpoint, policy_from_checkpoint, save_checkpoint
from .problem import load_problem
from .training import TrainConfig, collect_norm_stats, train
from .verify import DriftSchedule, check_descent, reconstruct_drs, record_trajectory, run_drift_experiment


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _load_cfg(args) -> SolverConfig:
    cfg = load_config(args.config) if args.config else SolverConfig()
    if getattr(args, "max_iter", None) is not None:
        cfg = replace(cfg, max_iter=args.max_iter)
    if getattr(args, "adaptive_rho", None) is not None:
        cfg = replace(cfg, adaptive_rho=args.adaptive_rho == "on")
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _policy_for(args, cfg):
    mode = getattr(args, "policy", "fixed")
    if mode == "fixed":
        return None
    if not getattr(args, "checkpoint", None):
        raise SolverError(f"--policy {mode} requires --checkpoint")
    ckpt = load_checkpoint(args.checkpoint[0] if isinstance(args.checkpoint, list) else args.checkpoint)
    if ckpt.variant != mode:
        raise SolverError(f"checkpoint variant {ckpt.variant!r} does not match --policy {mode}")
    return policy_from_checkpoint(ckpt)


def cmd_solve(args) -> int:
    cfg = _load_cfg(args)
    prob = load_problem(args.problem)
    policy = _policy_for(args, cfg)
    report = solve(prob, cfg, policy=policy)
    doc = report_to_dict(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
        with open(out / "residuals.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "r_prim", "r_dual"])
            for it, rp, rd in report.residual_history:
                w.writerow([it, _fmt(rp), _fmt(rd)])
    else:
        json.dump(doc, sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")
    return 0 if report.status == "solved" else 2


def _bench_one(task):
    store, spec_doc, cfg_doc, policy_label, ckpt_path = task
    spec = bench_mod.spec_from_dict(spec_doc)
    cfg = SolverConfig(**cfg_doc)
    prob, _ = bench_mod.ensure_instance(store, spec)
    policy = policy_from_checkpoint(load_checkpoint(ckpt_path)) if ckpt_path else None
    rho_mode = "adaptive" if cfg.adaptive_rho else "fixed"
    try:
        report = solve(prob, cfg, policy=policy)
        return {
            "family": spec.family,
            "size": spec.size,
            "seed": spec.seed,
            "policy": policy_label,
            "rho_mode": rho_mode,
            "iterations": report.iterations,
            "runtime_s": report.runtime_seconds,
            "rho_updates": report.rho_updates,
            "status": report.status,
        }
    except SolverError as exc:
        print(f"bench: {spec.name} [{policy_label}/{rho_mode}] failed: {exc}", file=sys.stderr)
        return {
            "family": spec.family,
            "size": spec.size,
            "seed": spec.seed,
            "policy": policy_label,
            "rho_mode": rho_mode,
            "iterations": "",
            "runtime_s": "",
            "rho_updates": "",
            "status": "failed",
        }


def cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    specs = bench_mod.load_manifest(args.manifest)
    store = args.store or (Path(args.out).parent / "instances" if args.out else "instances")

    runs = [("baseline", None)]
    for ck in args.checkpoint or []:
        runs.append((Path(ck).stem, ck))

    tasks = []
    from .engine import config_to_dict

    for spec in specs:
        for policy_label, ckpt_path in runs:
            for adaptive in (False, True):
                cfg_doc = config_to_dict(replace(cfg, adaptive_rho=adaptive))
                tasks.append((str(store), bench_mod.spec_to_dict(spec), cfg_doc, policy_label, ckpt_path))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_bench_one, tasks))
    else:
        rows = [_bench_one(t) for t in tasks]

    fieldnames = [
        "family", "size", "seed", "policy", "rho_mode",
        "iterations", "runtime_s", "rho_updates", "status",
    ]
    groups: dict = {}
    for row in rows:
        if row["status"] != "failed":
            key = (row["family"], row["policy"], row["rho_mode"])
            groups.setdefault(key, []).append(row)
    summary_rows = []
    for (family, policy_label, rho_mode), grp in sorted(groups.items()):
        summary_rows.append(
            {
                "family": family,
                "size": "",
                "seed": "",
                "policy": policy_label,
                "rho_mode": rho_mode,
                "iterations": f"{np.mean([r['iterations'] for r in grp]):.2f}",
                "runtime_s": f"{np.mean([r['runtime_s'] for r in grp]):.3f}",
                "rho_updates": f"{np.mean([r['rho_updates'] for r in grp]):.2f}",
                "status": "summary",
            }
        )

    def write_rows(fh):
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            out = dict(row)
            if out["status"] != "failed":
                out["runtime_s"] = _fmt(out["runtime_s"])
            w.writerow(out)
        for row in summary_rows:
            w.writerow(row)

    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_rows(fh)
    else:
        write_rows(sys.stdout)
    return 3 if any(r["status"] == "failed" for r in rows) else 0


def cmd_train(args) -> int:
    with open(args.manifest) as fh:
        doc = json.load(fh)
    cfg = _load_cfg(args)
    family = doc["family"]
    variant = doc.get("variant", "scalar")
    tcfg_doc = dict(doc.get("config", {}))
    tcfg_doc.setdefault("seed", doc.get("seed", 0))
    tcfg = TrainConfig(**tcfg_doc)
    store = args.store or "instances"

    def build(split_specs, split):
        out = []
        for d in split_specs:
            spec = bench_mod.spec_from_dict({**d, "family": family, "split": split})
            prob, ref = bench_mod.ensure_instance(store, spec, with_reference=True)
            out.append((prob, ref))
        return out

    train_set = build(doc["train_instances"], "train")
    val_set = build(doc["val_instances"], "val")
    print(f"train: {len(train_set)} training / {len(val_set)} validation instances", file=sys.stderr)

    norm_stats = collect_norm_stats([p for p, _ in train_set], variant, cfg)
    ckpt0 = init_checkpoint(
        variant,
        seed=tcfg.seed,
        norm_stats=norm_stats,
        metadata={"family": family, "optimizer": "spsa"},
    )
    result = train(train_set, val_set, ckpt0, tcfg, cfg)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.ckpt_iter, out / "ckpt_iter.json")
    save_checkpoint(result.ckpt_rho, out / "ckpt_rho.json")
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "mean_train_loss", "mean_val_iters", "mean_val_rho_updates"])
        w.writeheader()
        for row in result.log_rows:
            w.writerow(row)
    if result.warning:
        print(f"train: warning: {result.warning}", file=sys.stderr)
    return 0


def _verify_one(task):
    store, spec_doc, cfg_doc, steps_n, drift_iters = task
    spec = bench_mod.spec_from_dict(spec_doc)
    cfg = SolverConfig(**cfg_doc)
    prob, ref = bench_mod.ensure_instance(store, spec, with_reference=True)
    entry = {"instance": spec.name}
    try:
        steps = record_trajectory(prob, replace(cfg, adaptive_rho=True), steps_n)
        chk = reconstruct_drs(steps, prob)
        entry["max_transition_violation"] = chk.max_transition_violation
        entry["max_perturbation_violation"] = chk.max_perturbation_violation
        z_star = np.clip(prob.A @ ref.x_star, prob.l, prob.u)
        slacks = check_descent(steps, ref.x_star, z_star, ref.lambda_star, cfg.alpha_max)
        entry["min_descent_slack"] = float(np.min(slacks))
        drift = run_drift_experiment(
            prob,
            DriftSchedule.inverse_square(drift_iters),
            drift_iters,
            cfg,
            ref.objective,
            seed=cfg.seed,
        )
        entry["drift_converged"] = drift.converged
    except TheoryViolationError as exc:
        entry["violation"] = str(exc)
    return entry


def cmd_verify(args) -> int:
    from .engine import config_to_dict

    cfg = _load_cfg(args)
    specs = bench_mod.load_manifest(args.manifest)
    store = args.store or "instances"
    tasks = [
        (str(store), bench_mod.spec_to_dict(s), config_to_dict(cfg), args.steps, args.drift_iters)
        for s in specs
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_verify_one, tasks))
    else:
        results = [_verify_one(t) for t in tasks]
    failed = any("violation" in r or not r.get("drift_converged", False) for r in results)
    payload = json.dumps(results, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload + "\n")
    else:
        sys.stdout.write(payload + "\n")
    return 4 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="relaxqp", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="solver config JSON file")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--max-iter", type=int, dest="max_iter", help="override max iterations")
    common.add_argument("--adaptive-rho", choices=("on", "off"), dest="adaptive_rho",
                        help="override penalty adaptation")

    p = sub.add_parser("solve", parents=[common], help="solve one problem file")
    p.add_argument("--problem", required=True)
    p.add_argument("--checkpoint", help="policy checkpoint JSON")
    p.add_argument("--policy", choices=("fixed", "scalar", "vector"), default="fixed")
    p.add_argument("--out", help="output directory for report.json and residuals.csv")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("bench", parents=[common], help="run a benchmark manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", action="append", help="policy checkpoint (repeatable)")
    p.add_argument("--store", help="instance store directory")
    p.add_argument("--out", help="results CSV path")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", parents=[common], help="train a relaxation policy")
    p.add_argument("--manifest", required=True, help="training manifest JSON")
    p.add_argument("--store", help="instance store directory")
    p.add_argument("--out", help="output directory for checkpoints and log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", parents=[common], help="check the convergence theory numerically")
    p.add_argument("--manifest", required=True)
    p.add_argument("--store", help="instance store directory")
    p.add_argument("--steps", type=int, default=200, help="recorded iterations per instance")
    p.add_argument("--drift-iters", type=int, default=10000, dest="drift_iters")
    p.add_argument("--out", help="verification JSON path")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SolverError as exc:
        print(f"relaxqp: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"relaxqp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
