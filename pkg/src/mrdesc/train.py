"""Siamese training with the contrastive loss.

One batch = 64 labelled pairs. All patches of a batch go through the
network in a single forward pass; pair distances are gathered from the
shared descriptor matrix, so both twins use one parameter set by
construction.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dataset as ds
from . import network
from . import patchpipe as pp
from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, pairs: Sequence[int] = (), epoch: int | None = None):
        super().__init__(message)
        self.pairs = list(pairs)
        self.epoch = epoch


@dataclass
class TrainConfig:
    margin: float = 2.0
    batch_size: int = 64
    batches_per_epoch: int = 1000
    epochs: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.9
    lr_decay_every: int = 10
    seed: int = 0
    subset_size: int = 1024
    match_sample: int = 4096
    precision: str = "32"
    perturb: bool = True
    carry_fraction: float = 0.25
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.batch_size < 4:
            raise ValueError("batch_size must be at least 4")
        for name in ("batches_per_epoch", "epochs", "subset_size", "checkpoint_every", "lr_decay_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        T.resolve_dtype(self.precision)

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_decay_every)

    def items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    pos_mean_dist: float
    neg_mean_dist: float
    substitutions: int
    wall_seconds: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.mean_loss:.6f}\t{self.pos_mean_dist:.6f}\t{self.neg_mean_dist:.6f}"
                f"\t{self.substitutions}\t{self.wall_seconds:.3f}")


@dataclass
class TrainState:
    net: network.DescriptorNet
    velocity: dict[str, np.ndarray]
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    stats: list[EpochStats] = field(default_factory=list)
    substitutions: int = 0
    warnings: int = 0
    carry: dict[int, list] = field(default_factory=dict)

    @classmethod
    def fresh(cls, net: network.DescriptorNet) -> "TrainState":
        return cls(net, {k: np.zeros_like(v.data) for k, v in net.params.items()})


def contrastive_loss(d, y, margin: float = 2.0):
    """1/2 [Y d^2 + (1 - Y) max(0, m - d)^2], element-wise over numpy inputs."""
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if margin <= 0:
        raise ValueError("margin must be positive")
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    hinge = np.maximum(0.0, margin - d)
    out = 0.5 * (y * d * d + (1.0 - y) * hinge * hinge)
    return float(out) if out.ndim == 0 else out


def batch_loss(d: Tensor, y, margin: float) -> Tensor:
    """Mean contrastive loss over a vector of distances, as a graph node."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    if np.any(d.data < 0):
        raise ValueError("distances must be non-negative")
    y = np.asarray(y, dtype=d.dtype)
    m = d.dtype.type(margin)
    hinge = np.maximum(d.dtype.type(0), m - d.data)
    terms = d.dtype.type(0.5) * (y * d.data * d.data + (1 - y) * hinge * hinge)
    n = d.size

    def bw(g):
        return ((y * d.data - (1 - y) * hinge) * (g / n),)

    return T._make(np.asarray(terms.mean(), dtype=d.dtype), (d,), bw, "contrastive_loss")


def _slot_rng(config: TrainConfig, epoch: int, batch: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, epoch, batch, slot, 1])


def batch_patches(scene: ds.SceneStore, batch: ds.PairBatch, config: TrainConfig, epoch: int, b: int):
    """Unique patches for a batch plus row indices of each pair's two sides.

    Without perturbation, repeated patch indices share one row.
    """
    n = len(batch)
    if batch.patches_b is not None:
        # single-image batch: second patches were synthesized already
        patches = np.concatenate([scene.patches[batch.idx_a], batch.patches_b])
        return patches, np.arange(n), np.arange(n, 2 * n)
    if not config.perturb:
        uniq, inv = np.unique(np.concatenate([batch.idx_a, batch.idx_b]), return_inverse=True)
        return scene.patches[uniq], inv[:n], inv[n:]
    patches = np.empty((2 * n, pp.PATCH_SIZE, pp.PATCH_SIZE))
    for k in range(n):
        patches[k] = pp.perturb(scene.patches[batch.idx_a[k]], _slot_rng(config, epoch, b, 2 * k))
        patches[n + k] = pp.perturb(scene.patches[batch.idx_b[k]], _slot_rng(config, epoch, b, 2 * k + 1))
    return patches, np.arange(n), np.arange(n, 2 * n)


def pair_distances(net: network.DescriptorNet, triples: np.ndarray, rows_a, rows_b) -> Tensor:
    triples = np.asarray(triples, dtype=net.precision)
    desc = net.forward(triples[:, 0:1], triples[:, 1:2], triples[:, 2:3])
    return T.euclidean_distance(T.take_rows(desc, rows_a), T.take_rows(desc, rows_b))


def sgd_update(state: TrainState, lr: float, momentum: float) -> None:
    """v <- mu v + g; p <- p - lr v, then clear gradients."""
    for name, p in state.net.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = state.velocity[name]
        v *= p.dtype.type(momentum)
        v += g
        p.data -= p.dtype.type(lr) * v
        p.grad = None


def train_step(state: TrainState, triples: np.ndarray, rows_a, rows_b, labels, config: TrainConfig,
               lr: float | None = None) -> tuple[float, np.ndarray]:
    """Forward, mean contrastive loss, one backward pass, momentum SGD step.

    Returns the batch loss and the per-pair distances before the update.
    """
    net = state.net
    lr = config.learning_rate if lr is None else lr
    try:
        d = pair_distances(net, triples, rows_a, rows_b)
        loss = batch_loss(d, labels, config.margin)
    except T.NonFiniteError as exc:
        raise DivergenceError(f"non-finite values in forward pass: {exc}",
                              pairs=_offending_pairs(net, triples, rows_a, rows_b)) from None
    net.zero_grad()
    T.backward(loss)
    for name, p in net.params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise DivergenceError(f"non-finite gradient for {name}")
    sgd_update(state, lr, config.momentum)
    value = float(loss.data)
    state.loss_history.append(value)
    return value, d.data.astype(np.float64)


def _offending_pairs(net, triples, rows_a, rows_b) -> list[int]:
    prev = T.CHECK_FINITE
    T.CHECK_FINITE = False
    try:
        with np.errstate(all="ignore"):
            d = pair_distances(net, triples, rows_a, rows_b).data
    finally:
        T.CHECK_FINITE = prev
    return np.flatnonzero(~np.isfinite(d)).tolist()


def _misordered(batch: ds.PairBatch, dist: np.ndarray, margin: float) -> list[tuple[int, int, float]]:
    """Negatives with nonzero loss that sit closer than the farthest positive."""
    pos = dist[batch.labels == 1]
    if not len(pos):
        return []
    worst = pos.max()
    out = []
    for k in np.flatnonzero(batch.labels == 0):
        if dist[k] < margin and dist[k] < worst:
            out.append((int(batch.idx_a[k]), int(batch.idx_b[k]), float(dist[k])))
    return out


def fit(config: TrainConfig, scenes: Sequence[ds.SceneStore], net: network.DescriptorNet | None = None,
        run_log=None, checkpoint_path=None, progress: Callable[[EpochStats], None] | None = None) -> TrainState:
    """Train for ``config.epochs`` epochs; batches cycle over ``scenes``.

    Each epoch re-embeds a subset per multi-image scene and re-mines
    negatives. The run log gets ``# key = value`` config lines followed by
    one tab-separated line per epoch.
    """
    if not scenes:
        raise ValueError("fit needs at least one scene")
    if net is None:
        net = network.init(config.seed, precision=config.precision)
    state = TrainState.fresh(net)
    log_fh = open(run_log, "w", encoding="ascii") if run_log else None
    try:
        if log_fh:
            for k, v in config.items():
                log_fh.write(f"# {k} = {v}\n")
            log_fh.write("# epoch\tmean_loss\tpos_mean_dist\tneg_mean_dist\tsubstitutions\twall_seconds\n")
            log_fh.flush()
        for epoch in range(config.epochs):
            try:
                stats = run_epoch(state, config, scenes, epoch)
            except DivergenceError as exc:
                exc.epoch = epoch
                raise DivergenceError(f"epoch {epoch}: {exc}", exc.pairs, epoch) from None
            except ds.SceneError as exc:
                raise type(exc)(f"epoch {epoch}: {exc}") from None
            if log_fh:
                log_fh.write(stats.line() + "\n")
                log_fh.flush()
            if progress:
                progress(stats)
            if checkpoint_path and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                network.save(state.net, Path(f"{checkpoint_path}.epoch{epoch + 1:04d}"))
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        network.save(state.net, checkpoint_path)
    return state


def run_epoch(state: TrainState, config: TrainConfig, scenes: Sequence[ds.SceneStore], epoch: int) -> EpochStats:
    t0 = time.perf_counter()
    lr = config.lr_at(epoch)
    n_pos = config.batch_size // 4
    n_neg = config.batch_size - n_pos
    pools: dict[int, tuple[ds.PoolIndex, ds.NegativePool]] = {}
    for si, scene in enumerate(scenes):
        if scene.kind == "multi-image":
            pool = ds.embed_pool(state.net, scene, config.subset_size, seed=[config.seed, epoch, si, 2],
                                 match_sample=config.match_sample)
            negs = ds.mine_negatives(pool, scene, np.random.default_rng([config.seed, epoch, si, 3]))
            state.warnings += negs.warnings
            pools[si] = (pool, negs)
    carry_cap = int(config.carry_fraction * n_neg)
    carry_in = state.carry
    collected: dict[int, dict[tuple[int, int], float]] = {}
    losses, pos_d, neg_d = [], [], []
    subs = 0
    for b in range(config.batches_per_epoch):
        si = b % len(scenes)
        scene = scenes[si]
        rng = np.random.default_rng([config.seed, epoch, b, 0])
        if scene.kind == "single-image":
            batch = ds.sample_single_image_batch(scene, rng, config.batch_size, n_pos)
        else:
            pool, negs = pools[si]
            batch = ds.sample_batch(scene, pool, negs, rng, config.margin, config.batch_size, n_pos,
                                    carry=carry_in.setdefault(si, []), carry_cap=carry_cap)
        subs += batch.composition.get("substitutions", 0)
        patches, ra, rb = batch_patches(scene, batch, config, epoch, b)
        loss, dist = train_step(state, pp.make_triples(patches), ra, rb, batch.labels, config, lr)
        if not np.isfinite(loss):
            raise DivergenceError("non-finite loss", np.flatnonzero(~np.isfinite(dist)).tolist())
        losses.append(loss)
        pos_d.extend(dist[batch.labels == 1].tolist())
        neg_d.extend(dist[batch.labels == 0].tolist())
        if scene.kind == "multi-image":
            bucket = collected.setdefault(si, {})
            for a, c, dv in _misordered(batch, dist, config.margin):
                bucket[(a, c)] = dv
    # hardest first, capped at a quarter of next epoch's negative slots
    cap = carry_cap * config.batches_per_epoch
    state.carry = {si: [pair for pair, _ in sorted(d.items(), key=lambda kv: (kv[1], kv[0]))][:cap]
                   for si, d in collected.items()}
    state.substitutions += subs
    state.epoch = epoch + 1
    stats = EpochStats(epoch, float(np.mean(losses)) if losses else float("nan"),
                       float(np.mean(pos_d)) if pos_d else float("nan"),
                       float(np.mean(neg_d)) if neg_d else float("nan"),
                       subs, time.perf_counter() - t0)
    state.stats.append(stats)
    return stats
