"""Command-line entry point: synth, index, train, eval, score.

Configuration comes from a flat key=value file plus flags, flags winning.
Exit codes: 0 success, 1 usage/config, 2 I/O, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation, network, synthetic
from .errors import ConfigError, NumericError

_thread_limiter = None  # keeps the threadpool limit alive for the process


@dataclass
class RunConfig:
    dataset_root: str = ""
    known_classes: list[str] | None = None
    seed: int = 0
    lr: float = 0.0001
    batch: int = 256
    epochs: int = 40
    repetitions: int = 3
    deterministic_reduction: bool = True
    output_dir: str = "out"
    image_size: int = 1024
    blocks: int = 7
    threads: int | None = None


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, value: str):
    if key == "known_classes":
        return [v.strip() for v in value.split(",") if v.strip()]
    if key in ("lr",):
        return float(value)
    if key in ("deterministic_reduction",):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"config: boolean expected for {key}, got {value!r}")
    if key in ("seed", "batch", "epochs", "repetitions", "image_size",
               "blocks", "threads"):
        return int(value)
    return value


def load_config_file(path) -> dict:
    """Parse key=value lines; '#' starts a comment. Unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            setattr(cfg, key, value)
    overrides = {
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", None),
        "output_dir": getattr(args, "out", None),
        "dataset_root": getattr(args, "dataset", None),
        "known_classes": getattr(args, "known_classes", None),
        "lr": getattr(args, "lr", None),
        "batch": getattr(args, "batch", None),
        "epochs": getattr(args, "epochs", None),
        "repetitions": getattr(args, "repetitions", None),
        "image_size": getattr(args, "image_size", None),
        "blocks": getattr(args, "blocks", None),
        "deterministic_reduction": getattr(args, "deterministic", None),
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def _apply_threads(n: int | None) -> None:
    global _thread_limiter
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits
        _thread_limiter = threadpool_limits(limits=n)
    except ImportError:
        pass


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    spec = synthetic.DefectSpec(images_per_type=args.defective_per_type)
    root = synthetic.generate_synthetic_dataset(
        out_dir=cfg.output_dir, seed=cfg.seed, n_classes=args.classes,
        images_per_class=args.images_per_class, image_size=cfg.image_size,
        n_test_good=args.test_good, defect_spec=spec, force=args.force)
    index = data_mod.index_dataset(root, known_classes=None, seed=cfg.seed)
    print(f"synthetic dataset at {root}")
    _print_index(index)
    return 0


def _print_index(index) -> None:
    for cls in sorted(index.classes):
        e = index.classes[cls]
        defects = ",".join(f"{d}:{len(v)}" for d, v in sorted(e.test_defective.items()))
        print(f"{cls} role={e.role} train={len(e.train_images)} "
              f"reserved={len(e.reserved_images)} test_good={len(e.test_good)} "
              f"defects=[{defects}]")


def cmd_index(args) -> int:
    cfg = resolve_config(args)
    index = data_mod.index_dataset(cfg.dataset_root, cfg.known_classes, cfg.seed)
    _print_index(index)
    return 0


def _checkpoint_path(out_dir: Path, rep: int) -> Path:
    return out_dir / f"checkpoint_rep{rep}.ckpt"


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    index = data_mod.index_dataset(cfg.dataset_root, cfg.known_classes, cfg.seed)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rep in range(cfg.repetitions):
        rep_seed = cfg.seed + rep
        net = network.build_feature_extractor(seed=rep_seed, n_blocks=cfg.blocks)
        tc = network.TrainConfig(
            lr=cfg.lr, batch=cfg.batch, epochs=cfg.epochs, seed=rep_seed,
            image_size=cfg.image_size,
            deterministic_reduction=cfg.deterministic_reduction)
        net, history = network.train(net, index, tc)
        ckpt = _checkpoint_path(out_dir, rep)
        network.save_checkpoint(net, ckpt, epoch=cfg.epochs, seed=rep_seed)
        loss_csv = out_dir / f"loss_rep{rep}.csv"
        with open(loss_csv, "w") as fh:
            fh.write("epoch,loss\n")
            for epoch, loss in enumerate(history, start=1):
                fh.write(f"{epoch},{loss:.10g}\n")
        tail = f", last loss {history[-1]:.6f}" if history else ""
        print(f"rep {rep}: checkpoint {ckpt}{tail}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    index = data_mod.index_dataset(cfg.dataset_root, cfg.known_classes, cfg.seed)
    out_dir = Path(cfg.output_dir)
    ckpt_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else out_dir
    nets = []
    for rep in range(cfg.repetitions):
        ckpt = _checkpoint_path(ckpt_dir, rep)
        if not ckpt.is_file():
            raise FileNotFoundError(f"missing checkpoint: {ckpt}")
        nets.append(network.load_checkpoint(ckpt))
    out_dir.mkdir(parents=True, exist_ok=True)
    heatmap_dir = out_dir / "heatmaps" if args.heatmaps else None
    cache: dict = {}
    report = evaluation.evaluate(nets, index, image_size=cfg.image_size,
                                 heatmap_dir=heatmap_dir, image_cache=cache)
    evaluation.export_report(report, out_dir / "report.csv")
    for cls in sorted({c for c, _ in report.cells}):
        entry = index.classes[cls]
        proto = evaluation.build_prototype(
            nets[0], [cache[(str(p), cfg.image_size)] for p in entry.reserved_images],
            class_name=cls)
        np.save(out_dir / f"prototype_{cls}.npy", proto.feature_mean)
    for cls, mean in report.class_means().items():
        print(f"class {cls}: mean AUC {mean:.4f}")
    print(f"report: {out_dir / 'report.csv'}")
    return 0


def cmd_score(args) -> int:
    cfg = resolve_config(args)
    net = network.load_checkpoint(args.checkpoint)
    feature_mean = np.load(args.prototype)
    proto = evaluation.Prototype(class_name="", feature_mean=feature_mean,
                                 source_count=1)
    side = 2 * (feature_mean.shape[0] + 4 * net.n_blocks) + 6
    image = data_mod.load_and_preprocess(args.image, size=side)
    dmap = evaluation.distance_map(net, image, proto)
    mean, mx = evaluation.score_features(dmap)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    heatmap = out_dir / f"heatmap_{Path(args.image).stem}.png"
    evaluation.export_heatmap(dmap, heatmap)
    print(f"{mean:.9g} {mx:.9g}")
    return 0


# ---------------------------------------------------------------------------
# parser


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        raise _UsageError(message)


def _add_common(sub) -> None:
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--threads", type=int)
    sub.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                     default=None)
    sub.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tripletad", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic texture dataset")
    _add_common(p)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--images-per-class", type=int, default=32)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--test-good", type=int, default=8)
    p.add_argument("--defective-per-type", type=int, default=8)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("index", help="index and summarize a dataset tree")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--known-classes", type=lambda s: s.split(","))
    p.set_defaults(func=cmd_index)

    p = subs.add_parser("train", help="train one network per repetition seed")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--known-classes", type=lambda s: s.split(","))
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--blocks", type=int)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="prototype + SVM + AUC evaluation")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--known-classes", type=lambda s: s.split(","))
    p.add_argument("--repetitions", type=int)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--heatmaps", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("score", help="score one image against a prototype")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prototype", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        _apply_threads(getattr(args, "threads", None))
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
