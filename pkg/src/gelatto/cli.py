"""Command-line entry points: synth, train, eval, predict, gradcheck, dump-attention.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as config_mod
from .checks import run_suite
from .data import (CloudFormatError, CoverageError, SceneSpec, coverage_sampler, generate_scene,
                   read_cloud, write_cloud)
from .geometry import PointCloud, denormalize_block
from .metrics import format_keyvalue, format_table
from .tensor import NumericError, Tensor, inject_fault
from .training import Trainer, evaluate, predict_cloud, split_blocks

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CLOUD_SUFFIXES = (".pts", ".ptsb")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run configuration file")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="deterministic neighbour selection")
    p.add_argument("--out", type=Path, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gelatto", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate labelled synthetic scenes")
    _common(p)
    p.add_argument("--scene", type=Path, help="scene description file")
    p.add_argument("--num-train", type=int)
    p.add_argument("--num-test", type=int)
    p.add_argument("--format", choices=("pts", "ptsb"), default="pts")

    p = sub.add_parser("train", help="train a segmentation model")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset directory with train/ and test/")
    p.add_argument("--epochs", type=int)
    p.add_argument("--toy", action="store_true", help="start from the toy network configuration")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--split", default="test")

    p = sub.add_parser("predict", help="label a point cloud file")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--inject-fault", metavar="OP", help="corrupt the backward rule of OP")
    p.add_argument("--skip-network", action="store_true")

    p = sub.add_parser("dump-attention", help="write attention scores around one point")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--point", type=int, required=True, help="index of the traced input point")
    p.add_argument("--channel", type=int, help="channel whose scores are written")
    p.add_argument("input", type=Path)
    return parser


def _threads(cfg: config_mod.RunConfig) -> int:
    env = os.environ.get("GELATTO_THREADS")
    if env is None:
        return cfg.run.threads
    try:
        cap = int(env)
    except ValueError:
        raise UsageError(f"GELATTO_THREADS must be an integer, got {env!r}") from None
    return max(1, min(cfg.run.threads, cap))


def _apply_flags(cfg: config_mod.RunConfig, args) -> config_mod.RunConfig:
    if args.seed is not None:
        cfg.run.seed = cfg.train.seed = args.seed
    if args.deterministic:
        cfg.run.deterministic = True
    if args.out is not None:
        cfg.run.out = str(args.out)
    if getattr(args, "data", None) is not None:
        cfg.run.data = str(args.data)
    cfg.run.threads = _threads(cfg)
    return cfg.validate()


def _load_config(args, base: config_mod.RunConfig | None = None) -> config_mod.RunConfig:
    if base is None:
        base = config_mod.toy_config() if getattr(args, "toy", False) else config_mod.RunConfig()
    if args.config is not None:
        base = config_mod.loads(args.config.read_text(), base)
    return _apply_flags(base, args)


def _cloud_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"no such dataset directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix in CLOUD_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no cloud files in {directory}")
    return files


def load_split(root: Path, split: str, num_classes: int) -> list[PointCloud]:
    clouds = []
    for path in _cloud_files(Path(root) / split):
        cloud = read_cloud(path, num_classes)
        if cloud.labels is None:
            raise CloudFormatError(f"{path}: labels required")
        clouds.append(cloud)
    return clouds


# -- commands -----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    spec = SceneSpec.parse(args.scene.read_text()) if args.scene else SceneSpec()
    out = Path(cfg.run.out)
    counts = {"train": args.num_train if args.num_train is not None else cfg.data.num_train,
              "test": args.num_test if args.num_test is not None else cfg.data.num_test}
    base = spec.seed + cfg.run.seed * 1_000_000
    offsets = {"train": 0, "test": 100_000}
    for split, n in counts.items():
        (out / split).mkdir(parents=True, exist_ok=True)
        for i in range(n):
            spec.seed = base + offsets[split] + i
            write_cloud(generate_scene(spec), out / split / f"scene_{i:04d}.{args.format}")
    print(f"wrote {counts['train']} train and {counts['test']} test scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    c = cfg.network.num_classes
    train = load_split(Path(cfg.run.data), "train", c)
    val_split = "val" if (Path(cfg.run.data) / "val").is_dir() else "test"
    val = load_split(Path(cfg.run.data), val_split, c)
    last, best = out / "last.ckpt", out / "best.ckpt"

    def on_epoch(trainer: Trainer, record):
        meta = {"epoch": record.epoch, "val_miou": record.val_miou}
        ckpt.save(last, trainer.model, cfg, trainer.optimizer, meta)
        if record.val_miou is not None and record.val_miou > trainer.best_miou:
            ckpt.save(best, trainer.model, cfg, trainer.optimizer, meta)

    with open(out / "train.log", "a") as log_file:
        trainer = Trainer(cfg, log_file=log_file, on_epoch=on_epoch)
        ckpt.save(last, trainer.model, cfg, trainer.optimizer, {"epoch": 0})
        try:
            trainer.fit(train, val)
        except NumericError as exc:
            log_file.write(f"abort reason=numeric epoch={len(trainer.history) + 1}\n")
            print(f"numeric failure: {exc}; last good checkpoint: {last}", file=sys.stderr)
            return EXIT_NUMERIC
    if not best.exists():
        ckpt.save(best, trainer.model, cfg, trainer.optimizer, {"epoch": len(trainer.history)})
    final = trainer.history[-1]
    print(final.line())
    return EXIT_OK


def _model_and_config(args):
    model, stored, _, _ = ckpt.load(args.checkpoint)
    stored.run.threads = 1
    if args.config is not None:
        requested = config_mod.loads(args.config.read_text(), config_mod.loads(config_mod.dumps(stored)))
        if requested.network != stored.network:
            raise ckpt.CheckpointError("checkpoint network configuration differs from --config")
        stored = requested
    return model, _apply_flags(stored, args)


def cmd_eval(args) -> int:
    model, cfg = _model_and_config(args)
    clouds = load_split(Path(cfg.run.data), args.split, cfg.network.num_classes)
    cm = evaluate(model, clouds, cfg.data.eval_points, cfg.data.block_size, cfg.run.seed,
                  cfg.run.threads)
    scores = cm.compute()
    print(format_table(scores))
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"metrics_{args.split}.txt").write_text(format_keyvalue(scores))
    return EXIT_OK


def cmd_predict(args) -> int:
    model, cfg = _model_and_config(args)
    cloud = read_cloud(args.input)
    labels = predict_cloud(model, cloud, cfg.data.eval_points, cfg.data.block_size,
                           cfg.run.seed, cfg.run.threads)
    write_cloud(PointCloud(cloud.positions, cloud.colors, labels), args.output)
    print(f"wrote {len(cloud)} labelled points to {args.output}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.inject_fault:
        with inject_fault(args.inject_fault):
            report = run_suite(seed, include_network=not args.skip_network)
    else:
        report = run_suite(seed, include_network=not args.skip_network)
    text = report.format()
    print(text)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "gradcheck.txt").write_text(text + "\n")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def dump_attention(model, cloud: PointCloud, point: int, cfg: config_mod.RunConfig,
                   out: Path, channel: int | None = None) -> dict:
    """Trace ``point`` through the sample levels and write per-block score files.

    Returns a summary with the written files, the channels used and, if the
    point was dropped by sampling, the first level it is missing from.
    """
    if not 0 <= point < len(cloud):
        raise IndexError(f"point {point} outside [0, {len(cloud)})")
    blocks = split_blocks(cloud, cfg.data.block_size)
    block = next(b for b in blocks if point in set(b.index.tolist()))
    local = int(np.flatnonzero(block.index == point)[0])
    window = np.arange(len(block.cloud))
    n = cfg.data.eval_points
    if len(window) > n:
        window = next(w for w in coverage_sampler(block.cloud, n, cfg.run.seed) if local in w)
    elif len(window) < n:
        window = np.resize(window, n)
    sample = block.cloud.subset(window)
    traced = int(np.flatnonzero(window == local)[0])
    _, _, pyramid = model(sample.positions, Tensor(sample.features()), training=False)
    rng = np.random.default_rng(cfg.run.seed)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"files": [], "channels": {}, "eliminated_at": None}
    union: dict[str, list] = {"geometric": [], "latent": []}
    levels = pyramid.levels
    for li in range(1, len(levels)):
        retained = pyramid.original_indices(li)[0]
        hits = np.flatnonzero(retained == traced)
        if hits.size == 0:
            summary["eliminated_at"] = li
            break
        j = int(hits[0])
        lv = levels[li]
        inner = model.config.layers[li - 1].inner_width
        d = channel if channel is not None else int(rng.integers(inner))
        if not 0 <= d < inner:
            raise IndexError(f"channel {d} outside [0, {inner}) at level {li}")
        summary["channels"][li] = d
        for kind, source in (("strided", levels[li - 1].points[0]), ("same", lv.points[0])):
            nb = lv.neighbors[kind][0, j]
            positions = denormalize_block(source[nb], block.offset)
            trace = lv.traces[kind]
            for head in ("geometric", "latent"):
                scores = getattr(trace, head)
                if scores is None:
                    continue
                s = scores[0, j, :, d]
                tag = np.full(len(nb), 2 * (li - 1) + (kind == "same"), dtype=np.int64)
                path = out / f"level{li}_{kind}_{head}.pts"
                write_cloud(PointCloud(positions, None, tag), path, scores=s)
                union[head].append((positions, tag, s))
                summary["files"].append(str(path))
    for head, parts in union.items():
        if not parts:
            continue
        path = out / f"union_{head}.pts"
        write_cloud(PointCloud(np.concatenate([p for p, _, _ in parts]), None,
                               np.concatenate([t for _, t, _ in parts])),
                    path, scores=np.concatenate([s for _, _, s in parts]))
        summary["files"].append(str(path))
    return summary


def cmd_dump_attention(args) -> int:
    model, cfg = _model_and_config(args)
    cloud = read_cloud(args.input)
    summary = dump_attention(model, cloud, args.point, cfg, Path(cfg.run.out), args.channel)
    for f in summary["files"]:
        print(f)
    if summary["eliminated_at"] is not None:
        print(f"point {args.point} eliminated by sampling at level {summary['eliminated_at']}; "
              f"dump covers levels < {summary['eliminated_at']}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "dump-attention": cmd_dump_attention,
}

# config, format, checkpoint, neighbourhood and shape errors are all ValueErrors
DATA_ERRORS = (ValueError, OSError, IndexError, CoverageError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"gelatto: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"gelatto: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"gelatto: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
