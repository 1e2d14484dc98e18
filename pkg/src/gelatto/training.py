"""Training loop and block-wise voting inference."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from . import geometry
from .config import RunConfig
from .data import AugmentOptions, VoteAccumulator, augment, coverage_sampler, sample_fixed
from .geometry import PointCloud
from .metrics import ConfusionMatrix
from .network import Adam, SegmentationNet, composite_loss
from .tensor import NumericError, Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class Block:
    cloud: PointCloud
    offset: np.ndarray
    index: np.ndarray


def split_blocks(cloud: PointCloud, block_size: float) -> list[Block]:
    """Partition into xy blocks, each normalised to its own frame."""
    blocks = []
    for idx in geometry.partition_blocks(cloud, block_size):
        sub = cloud.subset(idx)
        pos, offset = geometry.normalize_block(sub.positions)
        blocks.append(Block(PointCloud(pos, sub.colors, sub.labels), offset, idx))
    return blocks


def _stack(samples: list[PointCloud]):
    positions = np.stack([s.positions for s in samples])
    features = np.stack([s.features() for s in samples])
    labels = None
    if all(s.labels is not None for s in samples):
        labels = np.stack([s.labels for s in samples])
    return positions, features, labels


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_block(model: SegmentationNet, block: PointCloud, n: int, seed: int,
                  batch_size: int = 4) -> VoteAccumulator:
    """Vote softmax outputs of coverage windows into a per-point accumulator."""
    acc = VoteAccumulator.create(len(block), model.config.num_classes)
    windows = coverage_sampler(block, n, seed)
    for start in range(0, len(windows), batch_size):
        chunk = windows[start:start + batch_size]
        positions, features, _ = _stack([block.subset(w) for w in chunk])
        logits, _, _ = model(positions, Tensor(features), training=False)
        probs = softmax_np(logits.data)
        for w, p in zip(chunk, probs):
            acc.update(w, p)
    return acc


def predict_cloud(model: SegmentationNet, cloud: PointCloud, n: int, block_size: float,
                  seed: int = 0, threads: int = 1) -> np.ndarray:
    """Per-point labels for a whole cloud via blocks, coverage windows and voting."""
    blocks = split_blocks(cloud, block_size)
    labels = np.empty(len(cloud), dtype=np.int64)

    def run(i_block):
        i, block = i_block
        return block.index, predict_block(model, block.cloud, n, seed + i).finalize()

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, enumerate(blocks)))
    else:
        results = [run(item) for item in enumerate(blocks)]
    for idx, pred in results:
        labels[idx] = pred
    return labels


def evaluate(model: SegmentationNet, clouds: list[PointCloud], n: int, block_size: float,
             seed: int = 0, threads: int = 1) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.config.num_classes)
    for i, cloud in enumerate(clouds):
        pred = predict_cloud(model, cloud, n, block_size, seed + 1000 * i, threads)
        cm.update(cloud.labels, pred)
    return cm


@dataclass
class EpochRecord:
    epoch: int
    total: float
    main: float
    aux: list[float]
    train_oa: float
    val_miou: float | None = None
    val_oa: float | None = None
    seconds: float = 0.0

    def line(self) -> str:
        parts = [f"epoch={self.epoch}", f"total={self.total:.6f}", f"main={self.main:.6f}"]
        parts += [f"aux{i + 1}={v:.6f}" for i, v in enumerate(self.aux)]
        parts.append(f"train_oa={self.train_oa:.4f}")
        if self.val_miou is not None:
            parts += [f"val_miou={self.val_miou:.4f}", f"val_oa={self.val_oa:.4f}"]
        parts.append(f"time={self.seconds:.1f}")
        return " ".join(parts)


@dataclass
class Trainer:
    """Mini-batch Adam training over block samples of labelled clouds."""

    cfg: RunConfig
    model: SegmentationNet | None = None
    optimizer: Adam | None = None
    log_file: TextIO | None = None
    main_only: bool = False
    history: list[EpochRecord] = field(default_factory=list)
    best_miou: float = -1.0
    on_epoch: Callable[["Trainer", EpochRecord], None] | None = None

    def __post_init__(self):
        cfg = self.cfg.validate()
        if self.model is None:
            self.model = SegmentationNet(cfg.network, seed=cfg.train.seed)
        if self.optimizer is None:
            self.optimizer = Adam.from_config(self.model.parameters(), cfg.train)

    def _seed(self, *keys: int) -> np.random.SeedSequence:
        return np.random.SeedSequence([self.cfg.train.seed, *keys])

    def step(self, positions, features, labels, step_seed: np.random.SeedSequence):
        """One forward/backward/update on a stacked batch; returns loss terms and OA."""
        cfg = self.cfg
        nb_seed, drop_seed = step_seed.spawn(2)
        neighbor_seed = None if cfg.run.deterministic else int(nb_seed.generate_state(1)[0])
        with Tape() as tape:
            main, aux, pyramid = self.model(
                positions, Tensor(features), training=True, neighbor_seed=neighbor_seed,
                dropout_rate=cfg.train.dropout, rng=np.random.default_rng(drop_seed),
            )
            terms = composite_loss(main, aux, labels, pyramid, cfg.train, self.main_only)
        if not np.isfinite(terms.total.data):
            raise NumericError(f"non-finite loss {float(terms.total.data)}")
        self.optimizer.zero_grad()
        tape.backward(terms.total)
        self.optimizer.step()
        oa = float((main.data.argmax(axis=-1) == labels).mean())
        return terms, oa

    def run_epoch(self, blocks: list[PointCloud], epoch: int) -> EpochRecord:
        cfg = self.cfg
        start = time.perf_counter()
        order = np.random.default_rng(self._seed(epoch, 0)).permutation(len(blocks))
        opts = AugmentOptions() if cfg.data.augment else AugmentOptions.none()
        totals, mains, auxes, oas = [], [], [], []
        bs = cfg.train.batch_size
        for step, lo in enumerate(range(0, len(order), bs)):
            samples = []
            for j, bi in enumerate(order[lo:lo + bs]):
                seeds = self._seed(epoch, 1, lo + j).spawn(2)
                sample = blocks[bi].subset(sample_fixed(blocks[bi], cfg.data.points, seeds[0]))
                if cfg.data.augment:
                    sample = augment(sample, seeds[1], opts)
                samples.append(sample)
            positions, features, labels = _stack(samples)
            terms, oa = self.step(positions, features, labels, self._seed(epoch, 2, step))
            totals.append(float(terms.total.data))
            mains.append(terms.main)
            auxes.append(terms.aux)
            oas.append(oa)
        aux_mean = list(np.mean(auxes, axis=0)) if auxes and auxes[0] else []
        return EpochRecord(epoch, float(np.mean(totals)), float(np.mean(mains)), aux_mean,
                           float(np.mean(oas)), seconds=time.perf_counter() - start)

    def fit(self, train: list[PointCloud], val: list[PointCloud] | None = None,
            epochs: int | None = None) -> list[EpochRecord]:
        cfg = self.cfg
        blocks = [b.cloud for cloud in train for b in split_blocks(cloud, cfg.data.block_size)]
        epochs = cfg.train.epochs if epochs is None else epochs
        first = len(self.history) + 1
        for epoch in range(first, first + epochs):
            record = self.run_epoch(blocks, epoch)
            if val and (epoch % cfg.run.val_every == 0 or epoch == first + epochs - 1):
                t0 = time.perf_counter()
                scores = evaluate(self.model, val, cfg.data.eval_points, cfg.data.block_size,
                                  cfg.run.seed, cfg.run.threads).compute()
                record.val_miou, record.val_oa = scores.miou, scores.oa
                record.seconds += time.perf_counter() - t0
            self.history.append(record)
            if self.log_file is not None:
                self.log_file.write(record.line() + "\n")
                self.log_file.flush()
            log.info(record.line())
            if self.on_epoch is not None:
                self.on_epoch(self, record)
            if record.val_miou is not None:
                self.best_miou = max(self.best_miou, record.val_miou)
                if cfg.run.target_miou > 0 and record.val_miou >= cfg.run.target_miou:
                    break
        return self.history
