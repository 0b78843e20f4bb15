"""Command-line front end: ``clcn {train,eval,ablate,synth,gradcheck,viz}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, build_datasets, build_train_config, load_config, parse_config, with_overrides
from .data import export_csv
from .errors import CLCNError
from .experiments import worker_count
from .oracles import main_report
from .report import embedding_svg, emit_report, write_artifact
from .trainer import VARIANT_HELP, VARIANTS, evaluate, load_checkpoint, run_variant

ABLATION_FIELDS = ("variant", "seed", "src_acc", "tgt_acc", "centroid_dist")


class UsageError(Exception):
    pass


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("--seeds is empty")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clcn", description="Cycle label-consistent domain adaptation lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override train.seed")

    p = sub.add_parser("train", help="train one model and write a report")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variant", choices=VARIANTS, help="override train.variant")
    p.add_argument("--no-svg", action="store_true", help="skip the embedding plot")

    p = sub.add_parser("eval", help="metrics of a checkpoint on the config's datasets")
    p.add_argument("--checkpoint", required=True)
    common(p)

    variants_help = "; ".join(f"{k}: {v}" for k, v in VARIANT_HELP.items())
    p = sub.add_parser("ablate", help="run every variant over a seed list", description=variants_help)
    common(p)
    p.add_argument("--seeds", type=_seeds, default=[0, 1, 2, 3, 4])
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default=",".join(VARIANTS), help="comma-separated subset of variants")

    p = sub.add_parser("synth", help="generate a synthetic domain pair and export it as CSV")
    common(p, config_required=False)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("gradcheck", help="run the finite-difference oracle suite")
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("viz", help="SVG scatter of checkpoint embeddings")
    p.add_argument("--checkpoint", required=True)
    common(p)
    p.add_argument("--out", required=True, help="output SVG path")
    return parser


def _experiment(args) -> tuple[ExperimentConfig, object, object]:
    cfg = load_config(args.config)
    source, target = build_datasets(cfg)
    return cfg, source, target


def _train_cfg(cfg, source, args, variant=None):
    tc = build_train_config(cfg, source.dim, source.num_classes)
    return with_overrides(tc, getattr(args, "seed", None), variant or getattr(args, "variant", None))


def cmd_train(args) -> int:
    cfg, source, target = _experiment(args)
    tc = _train_cfg(cfg, source, args)

    def progress(row):
        print(f"episode {row.episode:>6}  L_C {row.loss_c:.4f}  adapt {row.loss_cyc:.4f}  "
              f"src {row.src_acc:.3f}  tgt {row.tgt_acc:.3f}  dist {row.centroid_dist:.4f}", flush=True)

    run = run_variant(source, target, tc, progress=progress)
    manifest = emit_report(run, args.out, source, target, svg=not args.no_svg)
    print(f"wrote {', '.join(manifest.artifacts.values())} and manifest.json to {args.out} ({run.wall_time:.1f}s)")
    return 0


def cmd_eval(args) -> int:
    cfg, source, target = _experiment(args)
    params, banks, _ = load_checkpoint(args.checkpoint)
    if params.arch.input_dim != source.dim:
        raise ConfigError(f"checkpoint expects {params.arch.input_dim}-d inputs, dataset has {source.dim}")
    if banks is None:
        raise CLCNError("checkpoint has no centroid banks")
    src_acc, tgt_acc, dist = evaluate(params, banks, source, target)
    print(json.dumps({"src_acc": src_acc, "tgt_acc": tgt_acc, "centroid_dist": dist}, sort_keys=True))
    return 0


def _ablation_job(job):
    cfg, tc, out = job
    source, target = build_datasets(cfg)
    run = run_variant(source, target, tc)
    emit_report(run, out, source, target, svg=False)
    f = run.final
    return tc.variant, tc.seed, f.src_acc, f.tgt_acc, f.centroid_dist


def ablation_table(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_FIELDS)
    for variant, seed, src, tgt, dist in rows:
        writer.writerow([variant, seed, repr(float(src)), repr(float(tgt)), repr(float(dist))])
    return buf.getvalue()


def cmd_ablate(args) -> int:
    cfg, source, _ = _experiment(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variant(s): {', '.join(unknown)}")
    out = Path(args.out)
    jobs = []
    for variant in variants:
        for seed in args.seeds:
            tc = with_overrides(build_train_config(cfg, source.dim, source.num_classes), seed, variant)
            jobs.append((cfg, tc, out / variant / f"seed{seed}"))
    workers = worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            rows = list(pool.map(_ablation_job, jobs))
    else:
        rows = [_ablation_job(j) for j in jobs]
    table = ablation_table(rows)
    write_artifact(out / "ablation.csv", table)
    sys.stdout.write(table)
    print("median final target accuracy:")
    for variant in variants:
        accs = [r[3] for r in rows if r[0] == variant]
        print(f"  {variant:<20} {np.median(accs):.4f}")
    return 0


def cmd_synth(args) -> int:
    cfg = load_config(args.config) if args.config else parse_config({})
    if cfg.dataset["kind"] not in ("shifted_gaussians", "two_moons"):
        raise ConfigError("synth needs a shifted_gaussians or two_moons dataset section")
    if args.seed is not None:
        cfg.dataset["seed"] = args.seed
    source, target = build_datasets(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_csv(out, source, target)
    print(f"wrote {len(source)} source and {len(target)} target samples to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    return 0 if main_report(args.points, args.seed) else 1


def cmd_viz(args) -> int:
    cfg, source, target = _experiment(args)
    params, banks, _ = load_checkpoint(args.checkpoint)
    if params.arch.input_dim != source.dim:
        raise ConfigError(f"checkpoint expects {params.arch.input_dim}-d inputs, dataset has {source.dim}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_artifact(out, embedding_svg(params, source, target, banks, title=Path(args.checkpoint).name))
    print(f"wrote {out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "synth": cmd_synth,
    "gradcheck": cmd_gradcheck,
    "viz": cmd_viz,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"clcn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CLCNError, OSError) as exc:
        print(f"clcn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
