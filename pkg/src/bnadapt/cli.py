"""Command-line entry point: gen-data, pretrain, adapt, eval, inspect."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .adaptation import AdaptFlags, AdaptSchedule, adapt_run, channel_distance, format_log, snapshot_drift
from .config import ConfigError, load_config
from .data import DEFAULT_COUNTS, PRESETS, SPLITS, generate_all, load_split
from .metrics import evaluate
from .segnet import NetworkSpec, ToyUNet, pretrain_source
from .tensorio import TensorFormatError

logger = logging.getLogger("bnadapt")


def _data_dir(args, cfg) -> Path:
    d = args.data or cfg.data
    if not d:
        raise ConfigError("no data directory given (use --data or the 'data' config key)")
    return Path(d)


def cmd_gen_data(args) -> int:
    counts = {s: getattr(args, "n_" + s.replace("-", "_")) for s in SPLITS}
    generate_all(args.out, args.preset, args.seed, counts)
    print(f"wrote preset {args.preset} (seed {args.seed}) to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    data = _data_dir(args, cfg)
    dtype = np.dtype(cfg.dtype)
    images, labels = load_split(data, "source-train")
    model = ToyUNet(NetworkSpec(in_channels=images.shape[-1]), seed=cfg.seed, dtype=dtype)
    pretrain_source(model, images.astype(dtype), labels, cfg.epochs, cfg.lr, cfg.seed, cfg.batch_size, cfg.momentum)
    checkpoint.save(model, args.out)
    vi, vl = load_split(data, "source-val")
    sys.stdout.write(evaluate(model, vi.astype(dtype), vl).to_csv())
    return 0


def cmd_adapt(args) -> int:
    cfg = load_config(args.config)
    data = _data_dir(args, cfg)
    model = checkpoint.load(args.model)
    if model.phase != "pretrained":
        raise RuntimeError(f"adapt needs a pretrained checkpoint, got phase {model.phase!r}")
    flags = AdaptFlags(
        adaptive_channels=cfg.adaptive_channels and not args.no_adaptive_channels,
        use_se=cfg.use_se and not args.no_se,
        freeze_non_bn=cfg.freeze_non_bn,
    )
    schedule = AdaptSchedule(cfg.eta0, cfg.tau, cfg.lambda_start, cfg.lambda_end, cfg.adapt_iters)
    images, _ = load_split(data, "target-train")
    reports = adapt_run(model, images.astype(model.dtype), schedule, flags, cfg.adapt_lr, cfg.batch_size, cfg.seed)
    checkpoint.save(model, args.out)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.csv")
    log_path.write_text(format_log(reports, model.spec.num_classes))
    print(f"adapted {len(reports)} steps -> {args.out} (log {log_path})")
    return 0


def cmd_eval(args) -> int:
    if not Path(args.model).is_file():
        raise FileNotFoundError(f"model file not found: {args.model}")
    model = checkpoint.load(args.model)
    images, labels = load_split(args.data, args.split)
    csv = evaluate(model, images.astype(model.dtype), labels).to_csv()
    if args.out:
        Path(args.out).write_text(csv)
    sys.stdout.write(csv)
    return 0


def _summary(a: np.ndarray) -> str:
    return f"min={a.min():.6g} mean={a.mean():.6g} max={a.max():.6g}"


def inspect_text(model: ToyUNet) -> str:
    lines = [
        f"spec: {model.spec.spec_id}",
        f"phase: {model.phase}",
        f"dtype: {model.dtype.name}",
        f"source_iters (K): {model.source_iters}",
        f"adapt_iters (t): {model.adapt_iters}",
        f"bn_channels: {sum(bn.channels for bn in model.bn_layers())}",
    ]
    for name, bn in model.bns.items():
        lines.append(f"layer {name}: channels={bn.channels} eps={bn.eps:g}")
        lines.append(f"  running_mean {_summary(bn.running_mean)}")
        lines.append(f"  running_var  {_summary(bn.running_var)}")
        lines.append(f"  gamma        {_summary(bn.gamma.data)}")
        lines.append(f"  beta         {_summary(bn.beta.data)}")
        if bn.frozen:
            d = channel_distance(bn.source_mean, bn.source_var, bn.running_mean, bn.running_var, bn.eps)
            g, b = snapshot_drift([bn])
            lines.append(f"  snapshot_delta d_mean={float(d.mean())!r} d_max={float(d.max())!r} gamma_delta={g!r} beta_delta={b!r}")
        else:
            lines.append("  snapshot_delta (no source snapshot)")
    if model.frozen:
        g, b = snapshot_drift(model.bn_layers())
        lines.append(f"total gamma_delta={g!r} beta_delta={b!r}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    model = checkpoint.load(args.model)
    sys.stdout.write(inspect_text(model))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnadapt", description="Source-free segmentation adaptation from batch-norm statistics")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    g.add_argument("--preset", required=True, choices=sorted(PRESETS))
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    for s in SPLITS:
        g.add_argument(f"--n-{s}", type=int, default=DEFAULT_COUNTS[s], dest="n_" + s.replace("-", "_"), help=f"samples in {s}")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="supervised training on the source splits")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("adapt", help="adapt a pretrained checkpoint to target-train")
    a.add_argument("--config")
    a.add_argument("--model", required=True)
    a.add_argument("--data")
    a.add_argument("--out", required=True)
    a.add_argument("--log", help="per-iteration CSV log (default: OUT.log.csv)")
    a.add_argument("--no-adaptive-channels", action="store_true", help="uniform channel weights")
    a.add_argument("--no-se", action="store_true", help="drop the entropy term")
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", help="Dice/Hausdorff table for a split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="target-test", choices=SPLITS)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="print checkpoint contents")
    i.add_argument("--model", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, TensorFormatError, checkpoint.CheckpointError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
