"""CRNN feature extractor and classifier head.

Four conv blocks (conv -> batch norm -> ELU -> max-pool -> dropout) feed two
stacked GRU blocks; the mean of the last GRU block's outputs over time is the
embedding every adaptation loss taps, and one linear layer maps it to class
logits.

Initialization: conv and linear weights Xavier-uniform, GRU input weights
Xavier-uniform, GRU recurrent weights orthogonal, all biases zero, batch
norm scale 1 / shift 0.  Everything is drawn from a private generator seeded
with ``BackboneConfig.seed``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._io import atomic_write_bytes

CHECKPOINT_FORMAT = "sidadapt-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


def _as_blocks(blocks):
    return tuple((int(c), int(k), (int(p[0]), int(p[1]))) for c, k, p in blocks)


@dataclass(frozen=True)
class BackboneConfig:
    n_mels: int = 128
    n_frames: int = 934
    # (channels, kernel size, (freq pool, time pool)) per conv block
    conv_blocks: tuple = (
        (64, 3, (2, 2)),
        (128, 3, (4, 4)),
        (128, 3, (4, 4)),
        (128, 3, (4, 4)),
    )
    gru_units: tuple = (32, 32)
    num_classes: int = 20
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks", _as_blocks(self.conv_blocks))
        object.__setattr__(self, "gru_units", tuple(int(u) for u in self.gru_units))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.conv_blocks or not self.gru_units:
            raise ConfigError("need at least one conv block and one GRU block")
        if min(self.gru_units) <= 0:
            raise ConfigError("GRU units must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        f, t = self.pooled_shape()
        if f < 1 or t < 1:
            raise ConfigError(
                f"input {self.n_mels}x{self.n_frames} pools down to {f}x{t}; "
                "reduce pooling or enlarge the input"
            )

    @property
    def embedding_dim(self) -> int:
        return self.gru_units[-1]

    def pooled_shape(self) -> tuple[int, int]:
        f, t = self.n_mels, self.n_frames
        for _, _, (pf, pt) in self.conv_blocks:
            f, t = f // pf, t // pt
        return f, t

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_blocks"] = [[c, k, list(p)] for c, k, p in self.conv_blocks]
        d["gru_units"] = list(self.gru_units)
        return d


class EmbeddingBatch(NamedTuple):
    embeddings: torch.Tensor
    logits: torch.Tensor


class CRNN(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        blocks = []
        in_ch = 1
        for ch, k, pool in cfg.conv_blocks:
            blocks.append(nn.Sequential(
                nn.Conv2d(in_ch, ch, k, padding=k // 2),
                nn.BatchNorm2d(ch),
                nn.ELU(),
                nn.MaxPool2d(pool),
                nn.Dropout(cfg.dropout),
            ))
            in_ch = ch
        self.conv = nn.Sequential(*blocks)
        f, _ = cfg.pooled_shape()
        grus = []
        width = in_ch * f
        for units in cfg.gru_units:
            grus.append(nn.GRU(width, units, batch_first=True))
            width = units
        self.grus = nn.ModuleList(grus)
        self.drop = nn.Dropout(cfg.dropout)
        self.classifier = nn.Linear(cfg.embedding_dim, cfg.num_classes)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or tuple(x.shape[1:]) != (self.cfg.n_mels, self.cfg.n_frames):
            raise ValueError(
                f"expected batch of shape (B, {self.cfg.n_mels}, {self.cfg.n_frames}), "
                f"got {tuple(x.shape)}"
            )
        h = self.conv(x.unsqueeze(1))               # B, C, F', T'
        h = h.permute(0, 3, 1, 2).flatten(2)         # B, T', C*F'
        for gru in self.grus:
            h, _ = gru(h)
        return h.mean(dim=1)

    def forward(self, x: torch.Tensor) -> EmbeddingBatch:
        emb = self.embed(x)
        return EmbeddingBatch(emb, self.classifier(self.drop(emb)))


def _init_weights(model: nn.Module, gen: torch.Generator) -> None:
    def xavier(t):
        receptive = t[0, 0].numel() if t.dim() > 2 else 1
        fan_in, fan_out = t.shape[1] * receptive, t.shape[0] * receptive
        bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
        with torch.no_grad():
            t.copy_(torch.rand(t.shape, generator=gen, dtype=t.dtype) * 2 * bound - bound)

    def orthogonal(t):
        # per-gate orthogonal blocks of the stacked (3H, H) recurrent matrix
        h = t.shape[1]
        with torch.no_grad():
            for g in range(t.shape[0] // h):
                q, r = torch.linalg.qr(torch.randn(h, h, generator=gen, dtype=t.dtype))
                t[g * h:(g + 1) * h] = q * torch.sign(torch.diagonal(r))

    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            xavier(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GRU):
            for name, p in m.named_parameters():
                if name.startswith("weight_ih"):
                    xavier(p)
                elif name.startswith("weight_hh"):
                    orthogonal(p)
                else:
                    nn.init.zeros_(p)


def init_params(cfg: BackboneConfig) -> CRNN:
    # module constructors draw from the global RNG; keep that stream untouched
    with torch.random.fork_rng(devices=[]):
        model = CRNN(cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    _init_weights(model, gen)
    return model


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true class."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n):
        raise ValueError(f"labels must lie in [0, {n}), got range [{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(logits, labels)


@torch.no_grad()
def infer(model: nn.Module, x, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings and softmax probabilities in eval mode (training flag restored)."""
    was_training = model.training
    model.eval()
    try:
        x = torch.as_tensor(x)
        embs, probs = [], []
        for i in range(0, len(x), batch_size):
            out = model(x[i:i + batch_size])
            embs.append(out.embeddings)
            probs.append(torch.softmax(out.logits, dim=1))
        if not embs:
            return np.zeros((0, model.cfg.embedding_dim)), np.zeros((0, model.cfg.num_classes))
        return torch.cat(embs).numpy(), torch.cat(probs).numpy()
    finally:
        model.train(was_training)


def params_digest(model: nn.Module) -> str:
    h = hashlib.sha1()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, model: CRNN, meta: dict | None = None, extra: dict | None = None) -> str:
    """Write model weights, config and metadata; returns the checkpoint id."""
    ckpt_id = params_digest(model)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "checkpoint_id": ckpt_id,
        "backbone": model.cfg.to_dict(),
        "state": model.state_dict(),
        "meta": dict(meta or {}),
        "extra": dict(extra or {}),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())
    return ckpt_id


def read_checkpoint(path) -> dict:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def load_checkpoint(path, expected: BackboneConfig | None = None) -> tuple[CRNN, dict]:
    payload = read_checkpoint(path)
    cfg = BackboneConfig(**payload["backbone"])
    if expected is not None and cfg.to_dict() != expected.to_dict():
        raise CheckpointError(f"checkpoint {path} was written for a different backbone config")
    model = CRNN(cfg)
    model.load_state_dict(payload["state"])
    meta = dict(payload["meta"])
    meta["checkpoint_id"] = payload["checkpoint_id"]
    meta["extra"] = payload.get("extra", {})
    return model, meta
