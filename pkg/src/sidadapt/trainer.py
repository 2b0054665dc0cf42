"""Training engine for the baseline and the three adaptation variants.

Every variant draws its labeled source batches from the same seeded
sampler and runs the source forward pass first on the global torch RNG.
Target-side forwards run on a side stream (see ``_seeding.side_stream``).
With the adaptation weight at zero the extra loss term contributes exact
zeros to every gradient, so a variant's parameter trajectory coincides with
the baseline's bit for bit.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import _seeding
from ._io import append_jsonl, write_json
from .adversarial import (Discriminator, GRLConfig, discriminator_loss, grl, make_discriminator,
                          mapping_confusion_loss, revgrad_stage_schedule)
from .backbone import (CRNN, BackboneConfig, cross_entropy, infer, init_params, load_checkpoint,
                       params_digest, save_checkpoint)
from .can import CanPools, CanTrainer
from .config import TrainConfig, save_config
from .dataset import Manifest, SplitAssignment, load_manifest, load_split
from .discrepancy import mmd2
from .evaluation import EvalReport, evaluate_predictions
from .features import FeatureWindow, load_cache

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# data ----------------------------------------------------------------------

@dataclass
class Split:
    x: torch.Tensor
    y: torch.Tensor
    tracks: list

    def __len__(self):
        return len(self.y)


@dataclass
class DomainData:
    source: Split       # labeled training albums
    val: Split          # labeled source-validation albums
    target: Split       # adaptation domain; labels used by evaluation only
    artists: tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return len(self.artists)


def _stack(windows, labels) -> Split:
    if not windows:
        return Split(torch.zeros(0), torch.zeros(0, dtype=torch.long), [])
    x = torch.from_numpy(np.stack([w.values for w in windows]))
    return Split(x, torch.as_tensor(labels, dtype=torch.long), [w.spec.track for w in windows])


def build_domain_data(windows: list[FeatureWindow], manifest: Manifest, split: SplitAssignment,
                      target_domain: str = "test") -> DomainData:
    target_parts = {"test"} if target_domain == "test" else {"val", "test"}
    known = {r.key for r in manifest.entries}
    buckets = {"source": ([], []), "val": ([], []), "target": ([], [])}
    for w in windows:
        if w.spec.track not in known:
            continue
        artist, album, _ = w.spec.track
        part = split.partition_of(artist, album)
        label = manifest.artist_index(artist)
        if part == "train":
            buckets["source"][0].append(w)
            buckets["source"][1].append(label)
        if part == "val":
            buckets["val"][0].append(w)
            buckets["val"][1].append(label)
        if part in target_parts:
            buckets["target"][0].append(w)
            buckets["target"][1].append(label)
    data = DomainData(*(_stack(*buckets[k]) for k in ("source", "val", "target")), manifest.artists)
    if len(data.source) == 0:
        raise TrainingError("no source-domain windows found in the feature cache for this split")
    return data


def load_domain_data(cfg: TrainConfig) -> DomainData:
    p = cfg.paths
    for name in ("manifest", "split", "cache"):
        if getattr(p, name) is None:
            raise TrainingError(f"paths.{name} is required")
    manifest = load_manifest(p.manifest)
    split = load_split(p.split)
    windows = load_cache(p.cache, cfg.features)
    return build_domain_data(windows, manifest, split, cfg.target_domain)


def effective_backbone(cfg: TrainConfig, num_classes: int) -> BackboneConfig:
    from dataclasses import replace

    return replace(cfg.backbone, n_mels=cfg.features.n_mels,
                   n_frames=cfg.features.frames_per_window,
                   num_classes=num_classes, seed=cfg.seed)


# samplers ------------------------------------------------------------------

class EpochSampler:
    """Uniform batches from reshuffled passes over ``n`` items."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise TrainingError("cannot sample batches from an empty pool")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order = np.zeros(0, dtype=int)

    def next(self) -> np.ndarray:
        while len(self._order) < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        out, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return out


class ReplaySampler:
    def __init__(self, batches):
        self._it = iter(batches)

    def next(self) -> np.ndarray:
        return np.asarray(next(self._it))


# step engine ---------------------------------------------------------------

def make_optimizer(params, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=lr)


def _check_finite(loss: torch.Tensor, step: int, what: str):
    if not torch.isfinite(loss):
        raise FloatingPointError(f"{what} loss became {float(loss)} at step {step}; aborting")


class StepRunner:
    """Runs optimization steps of one variant on in-memory domain data.

    ``variant`` is one of baseline / mmd / revgrad / can; revgrad uses
    ``cfg.revgrad.mode`` ("adda" needs ``source_model``, the frozen stage-1
    network).  ``source_batches`` replays fixed source index batches instead
    of sampling.
    """

    def __init__(self, model: CRNN, data: DomainData, cfg: TrainConfig, variant: str,
                 total_steps: int, source_model: CRNN | None = None, source_batches=None):
        self.model, self.data, self.cfg, self.variant = model, data, cfg, variant
        self.total_steps = total_steps
        self.step_idx = 0
        seed = cfg.seed
        self.source_sampler = (ReplaySampler(source_batches) if source_batches is not None else
                               EpochSampler(len(data.source), cfg.batch_size,
                                            _seeding.derived_rng(seed, _seeding.SOURCE_STREAM)))
        needs_target = variant != "baseline"
        if needs_target and len(data.target) == 0:
            raise TrainingError(f"variant {variant!r} needs unlabeled target windows")
        self.target_sampler = (EpochSampler(len(data.target), cfg.target_batch_size,
                                            _seeding.derived_rng(seed, _seeding.TARGET_STREAM))
                               if needs_target else None)
        self.discriminator: Discriminator | None = None
        self.source_model = source_model
        self.can: CanTrainer | None = None

        trainable = list(model.parameters())
        if variant == "revgrad" and cfg.revgrad.mode == "adda":
            if source_model is None:
                raise TrainingError("adda alignment needs the stage-1 source model")
            # the source mapping is only read under no_grad and the classifier
            # is left out of the optimizer, so both stay frozen
            source_model.eval()
            frozen = {id(p) for p in model.classifier.parameters()}
            trainable = [p for p in model.parameters() if id(p) not in frozen]
        lr = cfg.lr
        if variant == "revgrad" and cfg.revgrad.mode == "adda" and cfg.revgrad.mapping_lr:
            lr = cfg.revgrad.mapping_lr
        self.optimizer = make_optimizer(trainable, lr)
        if variant == "revgrad":
            self.discriminator = make_discriminator(model.cfg.embedding_dim,
                                                    cfg.revgrad.discriminator_hidden, seed + 7919)
            self.d_optimizer = make_optimizer(self.discriminator.parameters(),
                                              cfg.revgrad.discriminator_lr)
        if variant == "can":
            pools = CanPools(data.source.x, data.source.y, data.target.x)
            self.can = CanTrainer(model, self.optimizer, pools, cfg.can, cfg.kernel, seed,
                                  rng=_seeding.derived_rng(seed, _seeding.SAMPLER_STREAM),
                                  num_classes=data.num_classes)

    def _source_batch(self):
        idx = torch.as_tensor(self.source_sampler.next())
        return idx, self.data.source.x[idx], self.data.source.y[idx]

    def _target_batch(self):
        idx = torch.as_tensor(self.target_sampler.next())
        return self.data.target.x[idx]

    def step(self) -> dict:
        step = self.step_idx
        if self.variant == "can":
            rec = self.can.train_step()
        elif self.variant == "revgrad" and self.cfg.revgrad.mode == "adda":
            rec = self._adda_step(step)
        else:
            rec = self._shared_step(step)
        _check_finite(torch.tensor(rec["loss"]), step, self.variant)
        self.step_idx += 1
        rec["step"] = step
        return rec

    def _shared_step(self, step: int) -> dict:
        model, cfg = self.model, self.cfg
        model.train()
        _, xs, ys = self._source_batch()
        out_s = model(xs)
        ce = cross_entropy(out_s.logits, ys)
        loss = ce
        rec = {"ce": ce.item()}
        if self.variant == "mmd":
            xt = self._target_batch()
            with _seeding.side_stream(cfg.seed, step):
                out_t = model(xt)
            alpha = cfg.mmd.weight_at(step, self.total_steps)
            d = mmd2(out_s.embeddings, out_t.embeddings, cfg.mmd.kernel)
            loss = ce + alpha * d
            rec.update(mmd2=d.item(), alpha=alpha)
        elif self.variant == "revgrad":
            xt = self._target_batch()
            with _seeding.side_stream(cfg.seed, step):
                out_t = model(xt)
            lam = cfg.revgrad.grl.coefficient(step, self.total_steps)
            d_loss = discriminator_loss(self.discriminator, grl(out_s.embeddings, lam),
                                        grl(out_t.embeddings, lam))
            loss = ce + d_loss
            rec.update(disc=d_loss.item(), lam=lam)
            self.d_optimizer.zero_grad()
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        if self.discriminator is not None:
            self.d_optimizer.step()
        rec["loss"] = loss.item()
        return rec

    def _adda_step(self, step: int) -> dict:
        cfg, D = self.cfg, self.discriminator
        _, xs, _ = self._source_batch()
        xt = self._target_batch()
        with torch.no_grad():
            emb_s = self.source_model.embed(xs)
        self.model.train()
        with _seeding.side_stream(cfg.seed, step):
            emb_t = self.model.embed(xt)
        if cfg.revgrad.update == "alternating":
            d_loss = discriminator_loss(D, emb_s, emb_t.detach())
            self.d_optimizer.zero_grad()
            d_loss.backward()
            self.d_optimizer.step()
            m_loss = mapping_confusion_loss(D, emb_t)
            self.optimizer.zero_grad()
            m_loss.backward()
            self.optimizer.step()
            return {"disc": d_loss.item(), "map": m_loss.item(), "loss": d_loss.item() + m_loss.item()}
        lam = cfg.revgrad.grl.coefficient(step, self.total_steps)
        d_loss = discriminator_loss(D, emb_s, grl(emb_t, lam))
        self.d_optimizer.zero_grad()
        self.optimizer.zero_grad()
        d_loss.backward()
        self.d_optimizer.step()
        self.optimizer.step()
        return {"disc": d_loss.item(), "lam": lam, "loss": d_loss.item()}


# fitting -------------------------------------------------------------------

def evaluate_split(model, split: Split, seed=None) -> EvalReport | None:
    if len(split) == 0:
        return None
    _, probs = infer(model, split.x)
    return evaluate_predictions(probs, split.y.numpy(), split.tracks, seed)


@dataclass
class RunRecord:
    variant: str
    seed: int
    config: dict
    config_hash: str
    epochs: list = field(default_factory=list)
    best_checkpoint: str | None = None
    best_checkpoint_id: str | None = None
    best_epoch: int | None = None
    val: dict | None = None
    test: dict | None = None
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def steps_per_epoch(cfg: TrainConfig, data: DomainData) -> int:
    return cfg.steps_per_epoch or max(1, math.ceil(len(data.source) / cfg.batch_size))


def fit(model: CRNN, data: DomainData, cfg: TrainConfig, variant: str, epochs: int,
        out_dir=None, source_model: CRNN | None = None, tag: str = "") -> tuple[CRNN, RunRecord]:
    """Train for up to ``epochs`` epochs with early stopping on source-val song F1.

    The returned model carries the best validation weights.  Ties keep the
    later epoch; patience counts epochs without strict improvement.
    """
    t0 = time.time()
    torch.manual_seed(cfg.seed)
    n_steps = steps_per_epoch(cfg, data)
    runner = StepRunner(model, data, cfg, variant, n_steps * epochs, source_model=source_model)
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_path = out_dir / f"{tag}metrics.jsonl" if out_dir else None
    if metrics_path and metrics_path.exists():
        metrics_path.unlink()
    record = RunRecord(variant, cfg.seed, cfg.to_dict(), cfg.digest())
    best_score, best_state, stale = None, None, 0
    for epoch in range(epochs):
        recs = [runner.step() for _ in range(n_steps)]
        if metrics_path:
            for r in recs:
                append_jsonl(metrics_path, {"epoch": epoch, **r})
        val = evaluate_split(model, data.val)
        score = (val.song_macro_f1, val.window_macro_f1) if val else (0.0, 0.0)
        summary = {"epoch": epoch, "loss": float(np.mean([r["loss"] for r in recs])),
                   "val_song_f1": score[0], "val_window_f1": score[1]}
        if variant == "can" and runner.can.rounds:
            summary["valid_fraction"] = runner.can.rounds[-1]["valid_fraction"]
        record.epochs.append(summary)
        log.info("%s%s epoch %d: %s", tag, variant, epoch, summary)
        if val is None or best_score is None or score >= best_score:
            if best_score is None or score > best_score:
                stale = 0
            else:
                stale += 1
            best_score, best_state, record.best_epoch = score, copy.deepcopy(model.state_dict()), epoch
        else:
            stale += 1
        if val is not None and stale >= cfg.patience:
            break
    model.load_state_dict(best_state)
    record.seconds = time.time() - t0
    return model, record


def _finish(model: CRNN, data: DomainData, cfg: TrainConfig, record: RunRecord,
            out_dir: Path | None, stage: str, extra=None) -> RunRecord:
    val = evaluate_split(model, data.val, cfg.seed)
    test = evaluate_split(model, data.target, cfg.seed)
    record.val = val.to_dict() if val else None
    record.test = test.to_dict() if test else None
    if out_dir is not None:
        ckpt = out_dir / "best.pt"
        record.best_checkpoint = str(ckpt)
        record.best_checkpoint_id = save_checkpoint(
            ckpt, model, meta={"stage": stage, "variant": record.variant,
                               "config": cfg.to_dict(), "config_hash": cfg.digest()},
            extra=extra)
        write_json(out_dir / "run.json", record.to_dict())
    else:
        record.best_checkpoint_id = params_digest(model)
    return record


def pretrain_source(cfg: TrainConfig, data: DomainData | None = None, out_dir=None,
                    epochs: int | None = None) -> tuple[CRNN, RunRecord]:
    """Stage 1: cross-entropy on labeled source windows from a fresh init."""
    data = data if data is not None else load_domain_data(cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    model = init_params(effective_backbone(cfg, data.num_classes))
    bcfg = cfg.replace(variant="baseline")
    model, record = fit(model, data, bcfg, "baseline", epochs or cfg.pretrain_epochs, out_dir)
    return model, _finish(model, data, bcfg, record, out_dir, "source_train")


def train(cfg: TrainConfig, data: DomainData | None = None) -> RunRecord:
    """Run one configured experiment and return its record.

    Baseline: source cross-entropy for ``cfg.epochs``.  Adaptation variants
    start from ``paths.init_checkpoint`` when given, otherwise from a fresh
    stage-1 run of ``cfg.pretrain_epochs`` written under ``out_dir/pretrain``.
    """
    data = data if data is not None else load_domain_data(cfg)
    out_dir = Path(cfg.paths.out_dir) if cfg.paths.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(out_dir / "config.json", cfg)
    if cfg.variant == "baseline":
        _, record = pretrain_source(cfg, data, out_dir, epochs=cfg.epochs)
        return record

    expected = effective_backbone(cfg, data.num_classes)
    if cfg.paths.init_checkpoint:
        source_model, _ = load_checkpoint(cfg.paths.init_checkpoint, expected)
        ckpt_path = cfg.paths.init_checkpoint
    else:
        pre_dir = out_dir / "pretrain" if out_dir is not None else None
        source_model, pre = pretrain_source(cfg, data, pre_dir)
        ckpt_path = pre.best_checkpoint
    extra = {}
    if cfg.variant == "revgrad":
        plan = revgrad_stage_schedule(cfg.revgrad.mode, ckpt_path, require_checkpoint=False)
        extra["stages"] = list(plan.stages)
    # weight splitting: the adapted network starts as a copy of the source network
    model = copy.deepcopy(source_model)
    model, record = fit(model, data, cfg, cfg.variant, cfg.epochs, out_dir, source_model=source_model)
    return _finish(model, data, cfg, record, out_dir,
                   "adversarial_align" if cfg.variant == "revgrad" else cfg.variant, extra)


def parameter_trajectory(model: CRNN, data: DomainData, cfg: TrainConfig, variant: str,
                         n_steps: int, source_batches=None, record_batches: list | None = None):
    """Per-step parameter digests over ``n_steps`` steps (for equivalence checks).

    ``record_batches`` collects the source indices each step used.
    """
    torch.manual_seed(cfg.seed)
    runner = StepRunner(model, data, cfg, variant, n_steps, source_batches=source_batches)
    if record_batches is not None:
        if runner.can is not None:
            runner.can.on_step = lambda step, idx: record_batches.append(np.asarray(idx))
        else:
            orig = runner.source_sampler.next

            def capture():
                idx = orig()
                record_batches.append(idx)
                return idx

            runner.source_sampler.next = capture
    digests = []
    for _ in range(n_steps):
        runner.step()
        digests.append(_param_digest(model))
    return digests


def _param_digest(model) -> str:
    import hashlib

    h = hashlib.sha1()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.detach().contiguous().numpy().tobytes())
    return h.hexdigest()
