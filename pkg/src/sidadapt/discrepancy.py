"""Gaussian multi-kernel MMD and contrastive domain discrepancy (CDD).

All estimators are plain torch expressions, so gradients flow to both
feature sets.  Bandwidths come either from a fixed list or from the median
pairwise distance of the joint batch times a set of multipliers; the median
is treated as a constant (no gradient through it).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch


class DiscrepancyError(ValueError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian kernel family.

    With ``bandwidths`` set, those sigmas are used as-is.  Otherwise sigma_b
    is ``median_pairwise_distance * multipliers[b]`` over the joint batch.
    """

    bandwidths: tuple[float, ...] | None = None
    multipliers: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    unbiased: bool = False

    def __post_init__(self):
        if self.bandwidths is not None:
            object.__setattr__(self, "bandwidths", tuple(float(b) for b in self.bandwidths))
            if not self.bandwidths or min(self.bandwidths) <= 0:
                raise DiscrepancyError(f"bandwidths must be a non-empty list of positive reals, got {self.bandwidths}")
        object.__setattr__(self, "multipliers", tuple(float(m) for m in self.multipliers))
        if not self.multipliers or min(self.multipliers) <= 0:
            raise DiscrepancyError(f"multipliers must be positive, got {self.multipliers}")


def _as_2d(x) -> torch.Tensor:
    x = torch.as_tensor(x)
    if not torch.is_floating_point(x):
        x = x.to(torch.get_default_dtype())
    if x.dim() == 1:
        x = x.unsqueeze(1)
    if x.dim() != 2:
        raise DiscrepancyError(f"expected a (n, d) feature matrix, got shape {tuple(x.shape)}")
    return x


def sq_distances(X: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    # explicit differences: exact zeros on the diagonal and symmetric in (X, Y)
    return ((X.unsqueeze(1) - Y.unsqueeze(0)) ** 2).sum(dim=2)


def median_heuristic(Z: torch.Tensor) -> float:
    """Lower median of pairwise Euclidean distances among rows of ``Z`` (i < j).

    Falls back to 1.0 when there are no pairs or every pair coincides.
    """
    Z = _as_2d(Z).detach()
    n = Z.shape[0]
    if n < 2:
        return 1.0
    iu = torch.triu_indices(n, n, offset=1)
    d = sq_distances(Z, Z)[iu[0], iu[1]].sqrt()
    med = float(torch.sort(d).values[(d.numel() - 1) // 2])
    return med if med > 0 else 1.0


def resolve_bandwidths(cfg: KernelConfig, *feature_sets) -> tuple[float, ...]:
    if cfg.bandwidths is not None:
        return cfg.bandwidths
    Z = torch.cat([_as_2d(f) for f in feature_sets if len(f)], dim=0)
    med = median_heuristic(Z)
    return tuple(med * m for m in cfg.multipliers)


def gaussian_kernel_matrix(X, Y, cfg: KernelConfig | None = None,
                           bandwidths: Sequence[float] | None = None) -> torch.Tensor:
    """``K[i, j] = mean_b exp(-|x_i - y_j|^2 / (2 sigma_b^2))``."""
    X, Y = _as_2d(X), _as_2d(Y)
    if X.shape[1] != Y.shape[1]:
        raise DiscrepancyError(f"feature dimensions differ: {X.shape[1]} vs {Y.shape[1]}")
    if bandwidths is None:
        bandwidths = resolve_bandwidths(cfg or KernelConfig(), X, Y)
    if not bandwidths or min(bandwidths) <= 0:
        raise DiscrepancyError(f"bandwidths must be positive, got {bandwidths}")
    d2 = sq_distances(X, Y)
    K = torch.zeros_like(d2)
    for sigma in bandwidths:
        K = K + torch.exp(-d2 / (2.0 * float(sigma) ** 2))
    return K / len(bandwidths)


def _block_mean(K: torch.Tensor, drop_diagonal: bool) -> torch.Tensor:
    n, m = K.shape
    if drop_diagonal:
        if n < 2:
            raise DiscrepancyError("unbiased estimate needs at least two samples per domain")
        return (K.sum() - torch.diagonal(K).sum()) / (n * (n - 1))
    return K.sum() / (n * m)


def mmd2(Xs, Xt, cfg: KernelConfig | None = None,
         bandwidths: Sequence[float] | None = None) -> torch.Tensor:
    """Squared MMD between two batches.

    Default is the biased V-statistic, diagonal terms included::

        mean K(s, s') + mean K(t, t') - 2 mean K(s, t)

    ``cfg.unbiased`` drops the within-domain diagonals instead.  The result
    is clamped at zero and is bitwise symmetric in its two arguments.
    """
    cfg = cfg or KernelConfig()
    Xs, Xt = _as_2d(Xs), _as_2d(Xt)
    if Xs.shape[0] == 0 or Xt.shape[0] == 0:
        raise DiscrepancyError("mmd2 needs non-empty source and target batches")
    if bandwidths is None:
        bandwidths = resolve_bandwidths(cfg, Xs, Xt)
    k_ss = _block_mean(gaussian_kernel_matrix(Xs, Xs, bandwidths=bandwidths), cfg.unbiased)
    k_tt = _block_mean(gaussian_kernel_matrix(Xt, Xt, bandwidths=bandwidths), cfg.unbiased)
    # summing sorted entries fixes the reduction order, so swapping the
    # arguments (which transposes this block) gives the identical float
    k_st = torch.sort(gaussian_kernel_matrix(Xs, Xt, bandwidths=bandwidths).flatten()).values.sum()
    k_st = k_st / (Xs.shape[0] * Xt.shape[0])
    value = k_ss + k_tt - 2.0 * k_st
    return value if cfg.unbiased else value.clamp_min(0.0)


@dataclass
class ClassMaskedBatch:
    source: torch.Tensor
    source_labels: torch.Tensor
    target: torch.Tensor
    target_labels: torch.Tensor
    target_mask: torch.Tensor | None = None
    classes: tuple[int, ...] | None = None

    def __post_init__(self):
        self.source = _as_2d(self.source)
        self.target = _as_2d(self.target)
        self.source_labels = torch.as_tensor(self.source_labels, dtype=torch.long)
        self.target_labels = torch.as_tensor(self.target_labels, dtype=torch.long)
        if self.target_mask is None:
            self.target_mask = torch.ones(len(self.target), dtype=torch.bool)
        self.target_mask = torch.as_tensor(self.target_mask, dtype=torch.bool)
        if len(self.target_mask) != len(self.target) or len(self.target_labels) != len(self.target):
            raise DiscrepancyError("target labels and mask must match the target batch size")
        if len(self.source_labels) != len(self.source):
            raise DiscrepancyError("source labels must match the source batch size")
        if self.classes is None:
            self.classes = tuple(sorted(set(self.source_labels.tolist())
                                        | set(self.target_labels[self.target_mask].tolist())))
        self.classes = tuple(int(c) for c in self.classes)


@dataclass
class CDDResult:
    total: torch.Tensor
    intra: torch.Tensor
    inter: torch.Tensor
    skipped_classes: tuple[int, ...] = ()
    intra_terms: int = 0
    inter_terms: int = 0
    bandwidths: tuple[float, ...] = field(default=())


def cdd(batch: ClassMaskedBatch, cfg: KernelConfig | None = None,
        bandwidths: Sequence[float] | None = None) -> CDDResult:
    """Contrastive domain discrepancy, ``intra - inter``.

    intra averages MMD^2(source class c, target class c) over classes; inter
    averages MMD^2(source class c, target class c') over ordered pairs c != c'.
    Masked-out targets are dropped before anything else, including the
    bandwidth choice.  Classes missing from either domain are skipped and the
    averages run over the terms that could be evaluated.
    """
    cfg = cfg or KernelConfig()
    keep = batch.target_mask
    tgt, tgt_y = batch.target[keep], batch.target_labels[keep]
    src, src_y = batch.source, batch.source_labels
    if bandwidths is None:
        bandwidths = resolve_bandwidths(cfg, src, tgt) if len(src) + len(tgt) else (1.0,)
    by_src = {c: src[src_y == c] for c in batch.classes}
    by_tgt = {c: tgt[tgt_y == c] for c in batch.classes}
    usable = [c for c in batch.classes if len(by_src[c]) and len(by_tgt[c])]
    skipped = tuple(c for c in batch.classes if c not in usable)
    zero = src.new_zeros(()) if len(src) else tgt.new_zeros(())

    def term(a, b):
        return mmd2(a, b, cfg, bandwidths=bandwidths)

    intra_terms = [term(by_src[c], by_tgt[c]) for c in usable]
    inter_terms = [term(by_src[c], by_tgt[d]) for c in usable for d in usable if c != d]
    intra = torch.stack(intra_terms).mean() if intra_terms else zero
    inter = torch.stack(inter_terms).mean() if inter_terms else zero
    return CDDResult(intra - inter, intra, inter, skipped,
                     len(intra_terms), len(inter_terms), tuple(bandwidths))


def cdd_layer_sum(per_layer) -> torch.Tensor | float:
    per_layer = list(per_layer)
    if not per_layer:
        raise DiscrepancyError("cdd_layer_sum needs at least one layer")
    total = per_layer[0]
    for v in per_layer[1:]:
        total = total + v
    return total
