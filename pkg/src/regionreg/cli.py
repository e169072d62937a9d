"""Command-line entry point: ``regionreg <command> [options]``.

Precedence for every setting: command-line flag > ``--config`` JSON file >
built-in default. The seed additionally falls back to ``REGIONREG_SEED``
when neither a flag nor the config file sets it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cloud import load_cloud, save_cloud
from .config import DataConfig, ModelConfig, NoiseConfig, RunConfig, TrainConfig
from .data import build_datasets
from .evalbench import NOISE_ORDER, ablate, bench, evaluate, parse_noise_kinds
from .pipeline import NetworkParams, load_checkpoint, register, save_checkpoint, train, write_trace_csv

log = logging.getLogger("regionreg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# flag name -> (config section, field, type)
_OVERRIDES = {
    "n_regions": ("model", "n_regions", int),
    "embed_dim": ("model", "embed_dim", int),
    "layers": ("model", "attn_layers", int),
    "attention_mode": ("model", "attention_mode", str),
    "epochs": ("train", "epochs", int),
    "batch_size": ("train", "batch_size", int),
    "lr": ("train", "learning_rate", float),
    "recon_weight": ("train", "recon_weight", float),
    "negatives": ("train", "negatives_per_shape", int),
    "repose": ("train", "repose", bool),
    "weight_average": ("train", "weight_average", float),
    "n_points": ("data", "n_points", int),
    "n_train": ("data", "n_train", int),
    "n_eval": ("data", "n_eval", int),
    "max_angle": ("data", "max_angle_deg", float),
    "max_translation": ("data", "max_translation", float),
    "di_keep": ("noise", "di_keep_ratio", float),
    "pd_sigma": ("noise", "pd_sigma", float),
    "pd_clip": ("noise", "pd_clip", float),
    "do_fraction": ("noise", "do_fraction", float),
    "do_sigma": ("noise", "do_sigma", float),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    d = RunConfig()
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="JSON config file (default: none)")
    g.add_argument("--seed", type=int, default=None,
                   help="seed for model init, data and training (default: config, then $REGIONREG_SEED, then 0)")
    g.add_argument("--threads", type=int, default=1, help="BLAS thread bound (default: 1)")
    g.add_argument("--out", type=Path, default=None, help="output directory (default: none)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    g = p.add_argument_group("model")
    g.add_argument("--n-regions", type=int, help=f"number of regions (default: {d.model.n_regions})")
    g.add_argument("--embed-dim", type=int, help=f"embedding width d (default: {d.model.embed_dim})")
    g.add_argument("--layers", type=int, help=f"attention layers (default: {d.model.attn_layers})")
    g.add_argument("--no-position-encoding", action="store_true",
                   help="disable centroid position encoding (default: enabled)")
    g.add_argument("--attention-mode", choices=["standard", "as_printed"],
                   help=f"value term in attention (default: {d.model.attention_mode})")
    g.add_argument("--logit-scaling", action="store_true", help="scale attention logits by 1/sqrt(d) (default: off)")
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, help=f"(default: {d.train.epochs})")
    g.add_argument("--batch-size", type=int, help=f"(default: {d.train.batch_size})")
    g.add_argument("--lr", type=float, help=f"Adam learning rate (default: {d.train.learning_rate})")
    g.add_argument("--recon-weight", type=float, help=f"reconstruction loss weight (default: {d.train.recon_weight})")
    g.add_argument("--negatives", type=int, help=f"occupancy samples per shape (default: {d.train.negatives_per_shape})")
    g.add_argument("--repose", action=argparse.BooleanOptionalAction, default=None,
                   help=f"redraw each training target from its source every epoch (default: {d.train.repose})")
    g.add_argument("--weight-average", type=float,
                   help=f"per-epoch running-average decay of the returned weights, 0 = off "
                        f"(default: {d.train.weight_average})")
    g = p.add_argument_group("data")
    g.add_argument("--n-points", type=int, help=f"points per cloud (default: {d.data.n_points})")
    g.add_argument("--n-train", type=int, help=f"training pairs (default: {d.data.n_train})")
    g.add_argument("--n-eval", type=int, help=f"held-out pairs (default: {d.data.n_eval})")
    g.add_argument("--kinds", help=f"comma-separated primitive kinds (default: {','.join(d.data.kinds)})")
    g.add_argument("--max-angle", type=float, help=f"max per-axis rotation, degrees (default: {d.data.max_angle_deg})")
    g.add_argument("--max-translation", type=float, help=f"max per-axis translation (default: {d.data.max_translation})")
    g = p.add_argument_group("noise")
    g.add_argument("--di-keep", type=float, help=f"D.I. kept fraction (default: {d.noise.di_keep_ratio})")
    g.add_argument("--pd-sigma", type=float, help=f"P.D. Gaussian sigma (default: {d.noise.pd_sigma})")
    g.add_argument("--pd-clip", type=float, help=f"P.D. clip bound (default: {d.noise.pd_clip})")
    g.add_argument("--do-fraction", type=float, help=f"D.O. replaced fraction (default: {d.noise.do_fraction})")
    g.add_argument("--do-sigma", type=float, help=f"D.O. outlier sigma (default: {d.noise.do_sigma})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regionreg", description="Unsupervised region-aware point-cloud registration.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write a checkpoint + loss trace")
    _add_common(p)

    p = sub.add_parser("register", help="register one source cloud onto a target cloud")
    _add_common(p)
    p.add_argument("--source", type=Path, required=True, help="source cloud (.xyz or .ply)")
    p.add_argument("--target", type=Path, required=True, help="target cloud (.xyz or .ply)")
    p.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint")
    p.add_argument("--aligned", type=Path, default=None, help="write the moved source cloud here (default: none)")

    for name, helptext, kinds in (("eval", "evaluate a model on held-out pairs", "clean,di,pd,do"),
                                  ("bench", "model vs ICP per noise section", "di,pd,do")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        _add_model_source(p)
        p.add_argument("--noise", default=kinds,
                       help=f"comma-separated noise kinds from clean,di,pd,do (default: {kinds})")

    p = sub.add_parser("ablate", help="train and evaluate Models A, B, C")
    _add_common(p)

    p = sub.add_parser("partition-export", help="write a PLY with per-point region labels")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint")
    p.add_argument("--source", type=Path, required=True, help="cloud to partition (.xyz or .ply)")
    p.add_argument("--target", type=Path, default=None,
                   help="partner cloud; when given its labelled PLY is written too (default: none)")
    p.add_argument("--output", type=Path, required=True, help="output PLY path")
    return parser


def _add_model_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path, default=None, help="model checkpoint (default: none)")
    p.add_argument("--train", action="store_true", help="train in place instead of loading a checkpoint (default: off)")


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    sections = {"model": cfg.model, "train": cfg.train, "data": cfg.data, "noise": cfg.noise}
    for flag, (section, field, _) in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            sections[section] = replace(sections[section], **{field: value})
    if getattr(args, "no_position_encoding", False):
        sections["model"] = replace(sections["model"], position_encoding=False)
    if getattr(args, "logit_scaling", False):
        sections["model"] = replace(sections["model"], logit_scaling=True)
    if getattr(args, "kinds", None):
        sections["data"] = replace(sections["data"], kinds=tuple(k.strip() for k in args.kinds.split(",")))
    cfg = RunConfig(**sections)
    seed = args.seed
    if seed is None and not _config_sets_seed(args.config) and os.environ.get("REGIONREG_SEED"):
        seed = int(os.environ["REGIONREG_SEED"])
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def _config_sets_seed(path) -> bool:
    if not path:
        return False
    raw = json.loads(Path(path).read_text())
    return any("seed" in raw.get(s, {}) for s in ("model", "train", "data"))


def _echo_config(cfg: RunConfig, out: Path | None) -> None:
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())


def _progress(verbose: bool):
    if not verbose:
        return None
    return lambda row: log.info("epoch %d  loss %.6g  chamfer %.6g  recon %.4g",
                                row["epoch"], row["loss"], row["chamfer"], row["recon"])


def _model(args, cfg: RunConfig, train_set) -> NetworkParams:
    if args.checkpoint is not None and args.train:
        raise UsageError("give either --checkpoint or --train, not both")
    if args.checkpoint is not None:
        return load_checkpoint(args.checkpoint)
    if args.train:
        items = [p.training_view() for p in train_set]
        result = train(items, cfg.train, NetworkParams.init(cfg.model), progress=_progress(args.verbose))
        if args.out is not None:
            save_checkpoint(args.out / "model.ckpt", result.params)
            write_trace_csv(args.out / "loss_trace.csv", result.trace)
        return result.params
    raise UsageError(f"{args.command} requires --checkpoint or --train")


def cmd_train(args, cfg: RunConfig) -> None:
    if args.out is None:
        raise UsageError("train requires --out")
    train_set, _ = build_datasets(cfg.data, cfg.train.negatives_per_shape)
    items = [p.training_view() for p in train_set]
    result = train(items, cfg.train, NetworkParams.init(cfg.model), progress=_progress(args.verbose))
    save_checkpoint(args.out / "model.ckpt", result.params)
    write_trace_csv(args.out / "loss_trace.csv", result.trace)
    print(f"wrote {args.out / 'model.ckpt'} and {args.out / 'loss_trace.csv'}")


def cmd_register(args, cfg: RunConfig) -> None:
    params = load_checkpoint(args.checkpoint)
    source, target = load_cloud(args.source), load_cloud(args.target)
    T = register(source, target, params).transform
    print("qw qx qy qz tx ty tz")
    print(" ".join(f"{v:.9g}" for v in T.params()))
    if args.aligned is not None:
        save_cloud(args.aligned, T.apply(source.points))


def _report_out(args, name: str, report) -> None:
    print(report.to_table(), end="")
    if args.out is not None:
        (args.out / name).write_text(report.to_csv())


def cmd_eval(args, cfg: RunConfig) -> None:
    kinds = parse_noise_kinds(args.noise.split(","))
    train_set, test_set = build_datasets(cfg.data, cfg.train.negatives_per_shape)
    params = _model(args, cfg, train_set)
    report = evaluate(params, test_set, kinds, cfg.data.seed, "Ours", cfg.noise)
    _report_out(args, "eval_report.csv", report)


def cmd_bench(args, cfg: RunConfig) -> None:
    kinds = parse_noise_kinds(args.noise.split(","))
    train_set, test_set = build_datasets(cfg.data, cfg.train.negatives_per_shape)
    params = _model(args, cfg, train_set)
    report = bench(params, test_set, kinds, cfg.data.seed, cfg.noise)
    _report_out(args, "bench_report.csv", report)


def cmd_ablate(args, cfg: RunConfig) -> None:
    train_set, test_set = build_datasets(cfg.data, cfg.train.negatives_per_shape)
    report, _ = ablate(train_set, test_set, cfg, progress=_progress(args.verbose))
    _report_out(args, "ablation_report.csv", report)


def cmd_partition_export(args, cfg: RunConfig) -> None:
    params = load_checkpoint(args.checkpoint)
    source = load_cloud(args.source)
    target = load_cloud(args.target) if args.target else source
    reg = register(source, target, params)
    save_cloud(args.output, source, fmt="ply", regions=reg.regions_source.labels)
    print(f"wrote {args.output} ({len(source)} points, {int((reg.regions_source.counts > 0).sum())} regions)")
    if args.target:
        tgt_out = args.output.with_name(args.output.stem + "_target.ply")
        save_cloud(tgt_out, target, fmt="ply", regions=reg.regions_target.labels)
        print(f"wrote {tgt_out}")


COMMANDS = {
    "train": cmd_train, "register": cmd_register, "eval": cmd_eval, "bench": cmd_bench,
    "ablate": cmd_ablate, "partition-export": cmd_partition_export,
}


def _limit_threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except (KeyError, ValueError, TypeError, json.JSONDecodeError, OSError) as exc:
        print(f"regionreg {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _echo_config(cfg, args.out)
    limiter = _limit_threads(args.threads)
    try:
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"regionreg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"regionreg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
