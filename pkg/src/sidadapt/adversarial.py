"""Gradient reversal, domain discriminator and the staged adversarial plan.

Two alignment modes share this module:

* ``"adda"`` (default): a separate target extractor, initialized from the
  pretrained source extractor, is trained against the discriminator while the
  source extractor and classifier stay frozen.
* ``"grl"``: one shared extractor, with the discriminator attached through a
  gradient reversal layer and trained jointly with the classifier.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

STAGES = ("source_train", "adversarial_align", "target_eval")


class AdversarialError(ValueError):
    pass


@dataclass(frozen=True)
class GRLConfig:
    """Reversal coefficient, ramped linearly from ``initial`` to ``final``
    over the first ``ramp_fraction`` of the alignment steps."""

    initial: float = 0.0
    final: float = 1.0
    ramp_fraction: float = 0.3

    def __post_init__(self):
        if self.initial < 0 or self.final < 0:
            raise AdversarialError("reversal coefficient must be non-negative")
        if not 0.0 <= self.ramp_fraction <= 1.0:
            raise AdversarialError("ramp_fraction must lie in [0, 1]")

    @classmethod
    def constant(cls, lam: float) -> "GRLConfig":
        return cls(lam, lam, 0.0)

    def coefficient(self, step: int, total_steps: int) -> float:
        ramp = self.ramp_fraction * total_steps
        if ramp <= 0 or step >= ramp:
            return float(self.final)
        return float(self.initial + (self.final - self.initial) * step / ramp)


def grl_backward(grad: torch.Tensor, lam: float) -> torch.Tensor:
    if lam < 0:
        raise AdversarialError(f"reversal coefficient must be non-negative, got {lam}")
    return grad.neg() * lam


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grl_backward(grad_output, ctx.lam), None


def grl(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-lam``."""
    if lam < 0:
        raise AdversarialError(f"reversal coefficient must be non-negative, got {lam}")
    return _GradReverse.apply(x, float(lam))


def grl_forward(x: torch.Tensor) -> torch.Tensor:
    return grl(x, 1.0)


class Discriminator(nn.Module):
    """Embedding -> two ReLU hidden layers -> one logit for P(source)."""

    def __init__(self, embedding_dim: int, hidden: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(embedding_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z).squeeze(-1)


def make_discriminator(embedding_dim: int, hidden: int = 256, seed: int = 0) -> Discriminator:
    # built under a forked RNG so creating it never shifts the global stream
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Discriminator(embedding_dim, hidden)


def _check_nonempty(*batches):
    for b in batches:
        if b.shape[0] == 0:
            raise AdversarialError("adversarial losses need non-empty batches")


def discriminator_loss(D, source_emb: torch.Tensor, target_emb: torch.Tensor) -> torch.Tensor:
    """``-E[log D(source)] - E[log(1 - D(target))]`` with D returning logits."""
    _check_nonempty(source_emb, target_emb)
    ls, lt = D(source_emb), D(target_emb)
    return (F.binary_cross_entropy_with_logits(ls, torch.ones_like(ls))
            + F.binary_cross_entropy_with_logits(lt, torch.zeros_like(lt)))


def mapping_confusion_loss(D, target_emb: torch.Tensor) -> torch.Tensor:
    """``-E[log D(target)]``: the target mapping is rewarded for looking like source."""
    _check_nonempty(target_emb)
    lt = D(target_emb)
    return F.binary_cross_entropy_with_logits(lt, torch.ones_like(lt))


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[str, ...]
    mode: str
    source_checkpoint: str | None


def revgrad_stage_schedule(mode: str = "adda", source_checkpoint=None,
                           require_checkpoint: bool = True) -> StagePlan:
    """Ordered stages of the adversarial procedure.

    Stage 1 trains the source extractor and classifier; stage 2 aligns the
    target mapping against the discriminator; stage 3 classifies target data
    with the target mapping and the source classifier.  When
    ``source_checkpoint`` is given (or required) it must exist, and stage 1 is
    then satisfied by that checkpoint.
    """
    if mode not in ("adda", "grl"):
        raise AdversarialError(f"unknown adversarial mode {mode!r}")
    if source_checkpoint is not None:
        if not Path(source_checkpoint).is_file():
            raise FileNotFoundError(f"stage-1 source checkpoint missing: {source_checkpoint}")
        source_checkpoint = str(source_checkpoint)
    elif require_checkpoint:
        raise AdversarialError("stages 2-3 need a stage-1 source checkpoint")
    return StagePlan(STAGES, mode, source_checkpoint)
