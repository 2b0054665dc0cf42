"""Class-aware adaptation: pseudo-labels by clustering, ambiguity filtering,
class-aware sampling and the CE + beta * CDD training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import torch

from ._seeding import side_stream
from .backbone import cross_entropy, infer
from .discrepancy import ClassMaskedBatch, KernelConfig, cdd, cdd_layer_sum

log = logging.getLogger(__name__)

LAYERS = ("embedding", "probs")


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class CanConfig:
    beta: float = 0.3
    distance_threshold: float = 0.5  # cosine distance, 1 - cos
    min_class_size: int = 3
    classes_per_batch: int = 4
    samples_per_class: int = 4
    recluster_every: int = 100
    kmeans_max_iter: int = 100
    layers: tuple = ("embedding",)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.distance_threshold <= 0 or self.min_class_size < 1:
            raise ValueError("distance threshold and min class size must be positive")
        if self.classes_per_batch < 1 or self.samples_per_class < 1 or self.recluster_every < 1:
            raise ValueError("batch composition and recluster cadence must be positive")
        if not self.layers or any(l not in LAYERS for l in self.layers):
            raise ValueError(f"layers must be drawn from {LAYERS}, got {self.layers}")


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray       # pseudo-label per target sample
    distances: np.ndarray    # cosine distance to the assigned center
    valid: np.ndarray        # bool per target sample
    centers: np.ndarray      # (M, d), unit norm; NaN rows for unavailable classes
    counts: np.ndarray       # valid members per class
    iterations: int = 0
    degenerate: bool = False

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean()) if len(self.valid) else 0.0


def _unit(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, 1e-12)


def source_class_means(embeddings, labels, num_classes: int) -> np.ndarray:
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    centers = np.full((num_classes, emb.shape[1]), np.nan)
    for c in range(num_classes):
        members = emb[labels == c]
        if len(members):
            centers[c] = members.mean(axis=0)
    return centers


def cluster_targets(target_emb, init_centers, max_iter: int = 100) -> ClusterAssignment:
    """Spherical k-means on cosine similarity, seeded at ``init_centers``.

    Rows of ``init_centers`` containing NaN mark classes with no source
    samples; they are never assigned.  Stops when an assignment repeats or
    after ``max_iter`` rounds.
    """
    X = _unit(np.asarray(target_emb, dtype=np.float64))
    C = np.asarray(init_centers, dtype=np.float64).copy()
    available = np.all(np.isfinite(C), axis=1)
    if not available.any():
        raise ValueError("no usable class centers")
    C[available] = _unit(C[available])
    M = len(C)
    degenerate = len(X) > 1 and bool(np.all(X == X[0]))

    def assign(C):
        sims = X @ np.where(available[:, None], C, 0.0).T
        sims[:, ~available] = -np.inf
        return sims.argmax(axis=1), sims

    labels, sims = assign(C)
    it = 1
    while it < max_iter:
        new_C = C.copy()
        for c in np.flatnonzero(available):
            members = X[labels == c]
            if len(members):
                new_C[c] = _unit(members.sum(axis=0))
        new_labels, new_sims = assign(new_C)
        it += 1
        if np.array_equal(new_labels, labels):
            C, sims = new_C, new_sims
            break
        C, labels, sims = new_C, new_labels, new_sims

    rows = np.arange(len(X))
    dist = np.clip(1.0 - sims[rows, labels], 0.0, 2.0) if len(X) else np.zeros(0)
    counts = np.bincount(labels, minlength=M) if len(X) else np.zeros(M, dtype=int)
    return ClusterAssignment(labels, dist, np.ones(len(X), dtype=bool), C, counts, it, degenerate)


def filter_ambiguous(a: ClusterAssignment, cfg: CanConfig) -> ClusterAssignment:
    """Invalidate targets far from their center, then whole classes left
    with fewer than ``min_class_size`` valid members."""
    valid = a.valid & (a.distances <= cfg.distance_threshold)
    counts = np.bincount(a.labels[valid], minlength=len(a.centers))
    small = counts < cfg.min_class_size
    valid &= ~small[a.labels]
    counts = np.bincount(a.labels[valid], minlength=len(a.centers))
    return replace(a, valid=valid, counts=counts)


@dataclass(frozen=True)
class ClassAwareIndices:
    classes: tuple[int, ...]
    source_idx: np.ndarray
    source_labels: np.ndarray
    target_idx: np.ndarray
    target_labels: np.ndarray

    def masked_batch(self, source_feats, target_feats) -> ClassMaskedBatch:
        return ClassMaskedBatch(source_feats, torch.as_tensor(self.source_labels),
                                target_feats, torch.as_tensor(self.target_labels),
                                classes=self.classes)


def class_aware_sample(source_labels, target_labels, target_valid, cfg: CanConfig,
                       rng: np.random.Generator) -> ClassAwareIndices:
    """Pick up to ``classes_per_batch`` classes present in both pools and draw
    ``samples_per_class`` indices per class from each domain (with
    replacement only when a pool is smaller than that)."""
    source_labels = np.asarray(source_labels)
    target_labels = np.asarray(target_labels)
    target_valid = np.asarray(target_valid, dtype=bool)
    shared = sorted(set(source_labels.tolist()) & set(target_labels[target_valid].tolist()))
    if not shared:
        raise SamplingError("no class has both source and valid target samples")
    k = min(cfg.classes_per_batch, len(shared))
    classes = tuple(sorted(int(c) for c in rng.choice(shared, size=k, replace=False)))
    n = cfg.samples_per_class
    s_idx, t_idx = [], []
    for c in classes:
        s_pool = np.flatnonzero(source_labels == c)
        t_pool = np.flatnonzero((target_labels == c) & target_valid)
        s_idx.append(rng.choice(s_pool, size=n, replace=len(s_pool) < n))
        t_idx.append(rng.choice(t_pool, size=n, replace=len(t_pool) < n))
    s_idx, t_idx = np.concatenate(s_idx), np.concatenate(t_idx)
    return ClassAwareIndices(classes, s_idx, source_labels[s_idx], t_idx, target_labels[t_idx])


@dataclass
class CanPools:
    source_x: torch.Tensor
    source_y: torch.Tensor
    target_x: torch.Tensor


class CanTrainer:
    """Holds the alternating cluster/optimize state across epochs.

    ``on_step(step, source_idx)`` is called with the source indices used at
    every step, which lets a plain cross-entropy run replay the same batches.
    """

    def __init__(self, model, optimizer, pools: CanPools, cfg: CanConfig,
                 kernel: KernelConfig | None = None, seed: int = 0,
                 rng: np.random.Generator | None = None, on_step=None, num_classes: int | None = None):
        self.model = model
        self.optimizer = optimizer
        self.pools = pools
        self.cfg = cfg
        self.kernel = kernel or KernelConfig()
        self.seed = seed
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.on_step = on_step
        self.num_classes = num_classes or int(pools.source_y.max()) + 1
        self.step = 0
        self.assignment: ClusterAssignment | None = None
        self.rounds: list[dict] = []

    def recluster(self) -> ClusterAssignment:
        src_emb, _ = infer(self.model, self.pools.source_x)
        tgt_emb, _ = infer(self.model, self.pools.target_x)
        centers = source_class_means(src_emb, self.pools.source_y.numpy(), self.num_classes)
        raw = cluster_targets(tgt_emb, centers, self.cfg.kmeans_max_iter)
        self.assignment = filter_ambiguous(raw, self.cfg)
        self.rounds.append({"step": self.step, "valid_fraction": self.assignment.valid_fraction,
                            "degenerate": raw.degenerate, "kmeans_iterations": raw.iterations})
        if not self.assignment.valid.any():
            log.info("step %d: no valid target samples after filtering; CE only this round", self.step)
        return self.assignment

    def _fallback_source(self) -> np.ndarray:
        n = self.cfg.classes_per_batch * self.cfg.samples_per_class
        pool = len(self.pools.source_y)
        return self.rng.choice(pool, size=n, replace=pool < n)

    def train_step(self) -> dict:
        if self.assignment is None or self.step % self.cfg.recluster_every == 0:
            self.recluster()
        a = self.assignment
        try:
            idx = class_aware_sample(self.pools.source_y.numpy(), a.labels, a.valid, self.cfg, self.rng)
            s_idx = idx.source_idx
        except SamplingError:
            idx, s_idx = None, self._fallback_source()
        if self.on_step is not None:
            self.on_step(self.step, s_idx)

        self.model.train()
        xs = self.pools.source_x[torch.as_tensor(s_idx)]
        ys = self.pools.source_y[torch.as_tensor(s_idx)]
        out_s = self.model(xs)
        ce = cross_entropy(out_s.logits, ys)
        loss = ce
        rec = {"step": self.step, "ce": ce.item(), "valid_fraction": a.valid_fraction,
               "cdd": 0.0, "cdd_intra": 0.0, "cdd_inter": 0.0, "cdd_skipped": idx is None}
        if idx is not None:
            with side_stream(self.seed, self.step):
                out_t = self.model(self.pools.target_x[torch.as_tensor(idx.target_idx)])
            totals, intra, inter = [], 0.0, 0.0
            for layer in self.cfg.layers:
                if layer == "embedding":
                    fs, ft = out_s.embeddings, out_t.embeddings
                else:
                    fs, ft = torch.softmax(out_s.logits, 1), torch.softmax(out_t.logits, 1)
                res = cdd(idx.masked_batch(fs, ft), self.kernel)
                totals.append(res.total)
                intra += res.intra.item()
                inter += res.inter.item()
            d = cdd_layer_sum(totals)
            loss = ce + self.cfg.beta * d
            rec.update(cdd=d.item(), cdd_intra=intra, cdd_inter=inter)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        rec["loss"] = loss.item()
        if not np.isfinite(rec["loss"]):
            raise FloatingPointError(f"non-finite CAN loss at step {self.step}")
        self.step += 1
        return rec

    def train_epoch(self, steps: int) -> list[dict]:
        return [self.train_step() for _ in range(steps)]


def can_train_epoch(trainer: CanTrainer, steps: int):
    """One epoch of alternating clustering and CE + beta * CDD updates."""
    metrics = trainer.train_epoch(steps)
    return trainer.model, metrics
