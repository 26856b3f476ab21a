"""Command-line entry point.

Exit codes: 0 success, 1 the method itself failed, 2 bad configuration or
arguments. Results go to ``--results-dir``, else ``$GAMMASEEK_RESULTS``,
else ``./results``.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, dump_config, load_config
from .env import REWARD_VARIANTS, RadioguidedEnv, write_trace_csv
from .harness import (
    METHODS,
    EvalReport,
    MethodError,
    calibrate_cmd,
    evaluate,
    export_ablation,
    export_calibration,
    export_results,
    json_text,
    run_ablation,
    train_variant,
)
from .hybrid import HybridConfig, run_episode
from .policy import TrainingError, write_curves_csv
from .radiation import CalibrationFileError, ConvergenceError
from .scanner import ScanError, run_phase1

RESULTS_ENV_VAR = "GAMMASEEK_RESULTS"
EXIT_OK, EXIT_METHOD, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    pass


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, _, v = text.partition("=")
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", dest="overrides", action="append", type=_kv, default=[], metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--results-dir", help=f"output directory (default ${RESULTS_ENV_VAR} or ./results)")

    p = argparse.ArgumentParser(prog="gammaseek", description="Radio-guided probe localization: scanning, learned search and evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", parents=[common], help="fit the response model")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="calibration data file")
    src.add_argument("--synthetic", action="store_true", help="generate the protocol grid from the reference parameters")
    c.add_argument("--noiseless", action="store_true")
    c.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("scan-demo", parents=[common], help="run the adaptive scan on one sampled source")
    s.add_argument("--sigma", type=float)
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", parents=[common], help="train a policy")
    t.add_argument("--reward", choices=sorted(REWARD_VARIANTS), default="composite")
    t.add_argument("--phase1-init", action="store_true", help="start episodes from an emulated scan (hybrid policy)")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="checkpoint path (default <results>/policy.ckpt)")

    e = sub.add_parser("evaluate", parents=[common], help="batch evaluation of one method")
    e.add_argument("--method", choices=METHODS, required=True)
    e.add_argument("--sigma", type=float, action="append", help="placement spread in mm (repeatable)")
    e.add_argument("--n", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--checkpoint")

    a = sub.add_parser("ablate", parents=[common], help="reward ablation")
    a.add_argument("--reward", choices=sorted(REWARD_VARIANTS) + ["all"], default="all")
    a.add_argument("--seeds", type=int, nargs="+")

    h = sub.add_parser("hybrid-run", parents=[common], help="one scan-then-policy episode with a full trace")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--sigma", type=float)
    h.add_argument("--seed", type=int, default=0)
    return p


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_overrides(dict(args.overrides))


def _results_dir(args) -> Path:
    return Path(args.results_dir or os.environ.get(RESULTS_ENV_VAR) or "results")


def _print_paths(paths) -> None:
    for p in paths:
        print(f"wrote {p}")


def cmd_calibrate(args, cfg: RunConfig, out: Path) -> None:
    if args.noiseless and not args.synthetic:
        raise UsageError("--noiseless needs --synthetic")
    outcome = calibrate_cmd(args.input, synthetic=args.synthetic, noiseless=args.noiseless, seed=args.seed, truth=cfg.env.params)
    p = outcome.params
    print(f"l = {p.l:.6g} mm  c1 = {p.c1:.6g}  c2 = {p.c2:.6g}  (r = {p.r:g} mm fixed)")
    print(f"rmse = {outcome.report.rmse:.6g}  R^2 = {outcome.report.r_squared:.6g}  points = {outcome.report.n_points}")
    _print_paths(export_calibration(outcome, out))


def cmd_scan_demo(args, cfg: RunConfig, out: Path) -> None:
    env_cfg = cfg.env_config(**({"sigma": args.sigma} if args.sigma is not None else {}))
    env = RadioguidedEnv(env_cfg, args.seed)
    res = run_phase1(env, cfg.scan)
    print(f"rounds = {res.rounds_used}  steps = {res.steps_used}  resolved = {res.resolved}  distance = {env.distance:.3f} mm")
    out.mkdir(parents=True, exist_ok=True)
    (out / "scan_demo.json").write_text(res.trace_text())
    write_trace_csv(out / "scan_demo_trace.csv", env.trace)
    _print_paths([out / "scan_demo.json", out / "scan_demo_trace.csv"])


def cmd_train(args, cfg: RunConfig, out: Path) -> None:
    tcfg = cfg.train
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.phase1_init:
        tcfg = replace(tcfg, phase1_init=True)
    cfg = replace(cfg, train=tcfg)
    ckpt = Path(args.out) if args.out else out / "policy.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    res = train_variant(args.reward, tcfg.seed, cfg, checkpoint_path=ckpt)
    print(f"best rolling success = {res.best_success:.3f}  updates = {len(res.curves)}")
    curves = ckpt.with_suffix(".curves.csv")
    write_curves_csv(curves, res.curves)
    _print_paths([ckpt, curves])


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> None:
    n = args.n if args.n is not None else cfg.eval.n_trials
    seed = args.seed if args.seed is not None else cfg.eval.seed
    sigmas = args.sigma or list(cfg.eval.sigmas)
    if n < 1:
        raise UsageError("--n must be at least 1")
    report = EvalReport()
    for sigma in sigmas:
        part = evaluate(args.method, sigma, n, seed, config=cfg, checkpoint=args.checkpoint)
        report.extend(part)
        r = part.rows[0]
        print(f"{r.method} sigma={r.sigma:g}: success {r.success_rate:.3f} +/- {r.ci_half_width:.3f}  mean steps {r.mean_steps:.1f}  (n={r.n_trials})")
    _print_paths(export_results(report, out, stem=f"eval_{args.method}"))


def cmd_ablate(args, cfg: RunConfig, out: Path) -> None:
    variants = list(cfg.ablation.variants) if args.reward == "all" else [args.reward]
    seeds = args.seeds or list(cfg.ablation.seeds)
    results = []
    for v in variants:
        res = run_ablation(v, seeds, cfg, checkpoint_dir=out)
        results.append(res)
        print(f"{v}: final success {res.mean_final_success:.3f}  variance {res.success_variance:.4g}  episode length {res.mean_episode_length:.1f}")
    stem = "ablation" if args.reward == "all" else f"ablation_{args.reward}"
    paths = export_ablation(results, out / stem)
    _print_paths(paths)


def cmd_hybrid_run(args, cfg: RunConfig, out: Path) -> None:
    hcfg = HybridConfig(scan=cfg.scan, checkpoint=args.checkpoint, total_cap=cfg.hybrid.total_cap)
    policy = hcfg.load_policy()
    over = {"horizon": hcfg.total_cap}
    if args.sigma is not None:
        over["sigma"] = args.sigma
    env = RadioguidedEnv(cfg.env_config(**over), args.seed)
    rec = run_episode(env, hcfg, policy)
    print(
        f"success = {rec.success}  phase I {rec.phase1_steps} steps  phase II {rec.phase2_steps} steps  "
        f"final distance {rec.final_distance:.3f} mm" + ("  (scan unresolved)" if rec.degraded else "")
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "hybrid_episode.json").write_text(json_text(rec.to_dict()))
    write_trace_csv(out / "hybrid_trace.csv", env.trace)
    _print_paths([out / "hybrid_episode.json", out / "hybrid_trace.csv"])


COMMANDS = {
    "calibrate": cmd_calibrate,
    "scan-demo": cmd_scan_demo,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "hybrid-run": cmd_hybrid_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit with 2 already
        return int(exc.code or 0)
    torch.set_num_threads(1)  # fixed reduction order keeps reruns byte-identical
    try:
        cfg = _load(args)
        out = _results_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config_used.txt").write_text(dump_config(cfg))
        COMMANDS[args.command](args, cfg, out)
    except (ConfigError, UsageError, CalibrationFileError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MethodError, TrainingError, ConvergenceError, ScanError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_METHOD
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
