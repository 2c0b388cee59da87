"""Single executable for the whole workflow.

Subcommands: ``synth`` (generate a dataset), ``train``, ``eval``,
``ablate`` (variant grid), ``gradcheck`` (finite-difference harness over
the registered op suite), ``fusecheck`` (asymmetric-kernel fusion
deviation), ``report`` (summarize a run directory). Every artifact lands
under ``--out`` together with an ``artifacts.txt`` manifest. Exit codes:
0 success, 1 runtime failure, 2 usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

log = logging.getLogger("lstcn")


def _config_epilog() -> str:
    from .train import TrainConfig

    names = sorted(f.name for f in dataclasses.fields(TrainConfig))
    return (
        "config keys (settable in --config files and via --set KEY=VALUE):\n  "
        + "\n  ".join(names)
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lstcn",
        description="Strip-pooled spatiotemporal gait recognition workflows",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--deterministic", action="store_true", default=None,
                       help="force the seeded deterministic path")

    p = sub.add_parser("synth", help="generate a synthetic walker dataset",
                       epilog=_config_epilog(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--views", default="0,30", help="comma list from {0,30,60,90}")
    p.add_argument("--conditions", default="NM", help="comma list from {NM,BG,CL}")
    p.add_argument("--seqs-per-view", type=int, default=4)
    p.add_argument("--motion-only", action="store_true",
                   help="identical geometry; identity only in stride dynamics")
    common(p, "runs/synth")

    p = sub.add_parser("train", help="train a model from a config file",
                       epilog=_config_epilog(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="config file (key = value lines)")
    p.add_argument("--data", help="dataset directory (overrides config)")
    p.add_argument("--iters", type=int, default=None, help="override max_iters")
    p.add_argument("--variant", default=None, help="ablation variant override")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")
    common(p, "runs/train")

    p = sub.add_parser("eval", help="evaluate a checkpoint",
                       epilog=_config_epilog(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config file; defaults to the run config next to the checkpoint")
    p.add_argument("--data", help="dataset directory (overrides config)")
    p.add_argument("--fuse", action="store_true", help="fuse asymmetric kernels first")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    common(p, "runs/eval")

    p = sub.add_parser("ablate", help="train/evaluate the ablation grid",
                       epilog=_config_epilog(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="base config file")
    p.add_argument("--data", help="dataset directory (overrides config)")
    p.add_argument("--variants", default=None,
                   help="comma list; default static_only,gsp_lstc,h_only,v_only,gbsp_lstc,full,gstp_head")
    p.add_argument("--poolings", default="max", help="comma list from {max,mean,gem}")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    common(p, "runs/ablate")

    p = sub.add_parser("gradcheck", help="finite-difference check of the op suite")
    p.add_argument("--trials", type=int, default=3, help="random trials per op")
    p.add_argument("--tol", type=float, default=1e-4)
    common(p, "runs/gradcheck")

    p = sub.add_parser("fusecheck", help="asymmetric kernel fusion deviation")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    common(p, "runs/fusecheck")

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("--run", required=True, help="directory holding metrics.tsv / eval reports")
    common(p, "runs/report")
    return parser


def _write_artifacts_manifest(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    names = sorted(
        str(p.relative_to(out_dir))
        for p in out_dir.rglob("*")
        if p.is_file() and p.name != "artifacts.txt"
    )
    (out_dir / "artifacts.txt").write_text("\n".join(names) + "\n", encoding="utf-8")


def _resolve_train_config(args):
    """Defaults < config file < command-line flags (--set last)."""
    import typing

    from .configio import parse_value
    from .train import TrainConfig, load_train_config

    cfg = load_train_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if getattr(args, "data", None):
        overrides["data_dir"] = args.data
    if getattr(args, "iters", None) is not None:
        overrides["max_iters"] = args.iters
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    hints = typing.get_type_hints(TrainConfig)
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in hints:
            raise ValueError(f"unknown config key {key!r}")
        overrides[key] = parse_value(value, hints[key])
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def cmd_synth(args) -> int:
    from .synth import SynthProtocol, generate_dataset

    views = tuple(int(v) for v in args.views.split(",") if v.strip())
    conditions = tuple(c.strip().upper() for c in args.conditions.split(",") if c.strip())
    protocol = SynthProtocol(
        n_subjects=args.subjects,
        frames_per_seq=args.frames,
        views=views,
        conditions=conditions,
        seqs_per_view=args.seqs_per_view,
        motion_only=args.motion_only,
        seed=args.seed if args.seed is not None else 0,
    )
    out = Path(args.out)
    index = generate_dataset(protocol, out)
    print(f"wrote {len(index)} sequences under {out}")
    _write_artifacts_manifest(out)
    return 0


def cmd_train(args) -> int:
    from .train import evaluate_model, train, write_eval_report

    cfg = _resolve_train_config(args)
    out = Path(args.out)
    result = train(cfg, out)
    print(f"trained {result.iterations_run} iterations; metrics at {result.metrics_path}")
    if result.interrupted:
        print("interrupted; checkpoint saved")
    else:
        ev = evaluate_model(result.model, cfg)
        write_eval_report(ev, out)
        print(f"aggregate rank-1: {100.0 * ev.aggregate:.2f}%")
    _write_artifacts_manifest(out)
    return 0


def cmd_eval(args) -> int:
    from .model import load_checkpoint
    from .train import evaluate_model, eval_to_text, write_eval_report

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    if not args.config:
        candidate = ckpt.parent / "run_config.cfg"
        if not candidate.exists():
            candidate = ckpt.parent.parent / "run_config.cfg"
        if candidate.exists():
            args.config = str(candidate)
        else:
            raise FileNotFoundError(
                f"no --config given and no run_config.cfg found near {ckpt}"
            )
    cfg = _resolve_train_config(args)
    model = load_checkpoint(ckpt)
    if args.fuse:
        model.fuse()
    ev = evaluate_model(model, cfg)
    out = Path(args.out)
    write_eval_report(ev, out)
    print(eval_to_text(ev))
    _write_artifacts_manifest(out)
    return 0


def cmd_ablate(args) -> int:
    from .train import ABLATION_DEFAULT_VARIANTS, ablation_suite

    cfg = _resolve_train_config(args)
    variants = (
        tuple(v.strip() for v in args.variants.split(",") if v.strip())
        if args.variants
        else ABLATION_DEFAULT_VARIANTS
    )
    poolings = tuple(p.strip() for p in args.poolings.split(",") if p.strip())
    out = Path(args.out)
    rows = ablation_suite(cfg, out, variants=variants, poolings=poolings)
    width = max(len(r.variant) for r in rows) + 2
    print(f"{'variant':<{width}}{'pool':<6}{'head':<6}{'rank-1':>8}")
    for r in rows:
        print(f"{r.variant:<{width}}{r.gbsp_mode:<6}{r.head:<6}{100.0 * r.aggregate:>7.2f}%")
    _write_artifacts_manifest(out)
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import run_gradcheck_suite

    seed = args.seed if args.seed is not None else 0
    reports = run_gradcheck_suite(trials=args.trials, tol=args.tol, seed=seed)
    worst = 0.0
    failed = []
    for name, rep in reports:
        print(f"{'PASS' if rep.passed else 'FAIL'}  {name:<28} max_rel_err={rep.max_rel_err:.3e}")
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            failed.append(name)
    print(f"worst relative error: {worst:.3e} over {len(reports)} cases")
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    return 0


def cmd_fusecheck(args) -> int:
    from .verify import run_fusion_check

    seed = args.seed if args.seed is not None else 0
    deviation = run_fusion_check(trials=args.trials, seed=seed)
    print(f"max |fused - three-branch| over {args.trials} trials: {deviation:.3e}")
    if deviation > args.tol:
        print(f"FAIL: exceeds tolerance {args.tol:.1e}")
        return 1
    print(f"PASS: within tolerance {args.tol:.1e}")
    return 0


def cmd_report(args) -> int:
    from .train import parse_metrics

    run = Path(args.run)
    metrics = run / "metrics.tsv"
    if metrics.exists():
        rows = parse_metrics(metrics)
        if rows:
            first, last = rows[0], rows[-1]
            best = min(rows, key=lambda r: r["total"])
            print(f"iterations: {last['iteration']}")
            print(f"total loss: first {first['total']:.4f}  last {last['total']:.4f}"
                  f"  best {best['total']:.4f} @ {best['iteration']}")
            lrs = sorted({r["lr"] for r in rows}, reverse=True)
            print(f"learning rates used: {', '.join(f'{lr:g}' for lr in lrs)}")
            print(f"active triplets: first {first['n_active']}  last {last['n_active']}")
        else:
            print("metrics.tsv holds no completed iterations")
    else:
        print(f"no metrics.tsv under {run}")
    kv = run / "eval_report.kv"
    if kv.exists():
        for line in kv.read_text(encoding="utf-8").splitlines():
            if line.startswith("aggregate"):
                print(line)
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "fusecheck": cmd_fusecheck,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return _COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures map to exit 1 with a diagnostic
        print(f"error: {e}", file=sys.stderr)
        if args.log_level == "debug":
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
