import json

import numpy as np
import pytest
import torch

from conftest import make_toy_config, make_toy_data, toy_split
from sidadapt.adversarial import GRLConfig
from sidadapt.backbone import infer, init_params, load_checkpoint
from sidadapt.can import CanConfig
from sidadapt.config import (ConfigFileError, MMDConfig, RevGradConfig, TrainConfig, from_dict,
                             load_config, save_config)
from sidadapt.trainer import (DomainData, EpochSampler, Split, StepRunner, TrainingError,
                              effective_backbone, fit, parameter_trajectory, pretrain_source, train)

STEPS = 50


def trajectory(cfg, data, variant, **kw):
    model = init_params(effective_backbone(cfg, data.num_classes))
    return parameter_trajectory(model, data, cfg, variant, STEPS, **kw)


def test_mmd_alpha_zero_matches_baseline(toy_data):
    cfg = make_toy_config(mmd=MMDConfig(weight=0.0))
    assert trajectory(cfg, toy_data, "mmd") == trajectory(cfg, toy_data, "baseline")


def test_mmd_alpha_positive_departs_from_baseline(toy_data):
    cfg = make_toy_config(mmd=MMDConfig(weight=1.0, warmup_fraction=0.0))
    a, b = trajectory(cfg, toy_data, "mmd"), trajectory(cfg, toy_data, "baseline")
    assert a[0] != b[0]


def test_revgrad_lambda_zero_matches_baseline(toy_data):
    cfg = make_toy_config(revgrad=RevGradConfig(mode="grl", grl=GRLConfig.constant(0.0)))
    assert trajectory(cfg, toy_data, "revgrad") == trajectory(cfg, toy_data, "baseline")


def test_revgrad_lambda_positive_departs_from_baseline(toy_data):
    cfg = make_toy_config(revgrad=RevGradConfig(mode="grl", grl=GRLConfig.constant(1.0)))
    assert trajectory(cfg, toy_data, "revgrad")[-1] != trajectory(cfg, toy_data, "baseline")[-1]


def test_can_beta_zero_matches_replayed_baseline(toy_data):
    cfg = make_toy_config(can=CanConfig(beta=0.0, recluster_every=10, classes_per_batch=2, samples_per_class=3))
    batches = []
    can = trajectory(cfg, toy_data, "can", record_batches=batches)
    assert len(batches) == STEPS
    assert can == trajectory(cfg, toy_data, "baseline", source_batches=batches)


def test_can_beta_positive_departs(toy_data):
    cfg = make_toy_config(can=CanConfig(beta=1.0, recluster_every=10, min_class_size=1,
                                        distance_threshold=2.0))
    batches = []
    can = trajectory(cfg, toy_data, "can", record_batches=batches)
    assert can[-1] != trajectory(cfg, toy_data, "baseline", source_batches=batches)[-1]


def test_step_runner_reproducible(toy_data):
    cfg = make_toy_config()
    for variant in ("baseline", "mmd", "can"):
        assert trajectory(cfg, toy_data, variant)[-5:] == trajectory(cfg, toy_data, variant)[-5:]


def test_epoch_sampler_covers_pool():
    s = EpochSampler(10, 4, np.random.default_rng(0))
    seen = np.concatenate([s.next() for _ in range(5)])
    assert sorted(seen[:10].tolist()) == list(range(10))
    with pytest.raises(TrainingError):
        EpochSampler(0, 4, np.random.default_rng(0))


def test_da_variant_needs_target():
    data = make_toy_data()
    none = Split(torch.zeros(0, 16, 24), torch.zeros(0, dtype=torch.long), [])
    empty = DomainData(data.source, data.val, none, data.artists)
    cfg = make_toy_config()
    with pytest.raises(TrainingError):
        StepRunner(init_params(effective_backbone(cfg, 3)), empty, cfg, "mmd", 1)


def test_baseline_overfits_tiny_set():
    data = make_toy_data(classes=2)
    small = DomainData(toy_split(4, 2, 0.0, 5, "studio"), data.val, data.target, data.artists)
    cfg = make_toy_config(lr=1e-2, batch_size=8)
    model = init_params(effective_backbone(cfg, 2))
    runner = StepRunner(model, small, cfg, "baseline", 200)
    for _ in range(200):
        runner.step()
    _, probs = infer(model, small.source.x)
    assert (probs.argmax(1) == small.source.y.numpy()).mean() == 1.0


def test_nan_loss_aborts(toy_data):
    cfg = make_toy_config()
    bad = DomainData(toy_data.source, toy_data.val, toy_data.target, toy_data.artists)
    bad.source.x = bad.source.x.clone()
    bad.source.x[:] = float("nan")
    runner = StepRunner(init_params(effective_backbone(cfg, 3)), bad, cfg, "baseline", 1)
    with pytest.raises(FloatingPointError, match="step 0"):
        runner.step()


def test_fit_records_metrics_and_restores_best(toy_data, tmp_path):
    cfg = make_toy_config(epochs=3)
    model = init_params(effective_backbone(cfg, 3))
    model, record = fit(model, toy_data, cfg, "baseline", 3, tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    steps = [json.loads(line)["step"] for line in lines]
    assert steps == sorted(steps) and len(steps) == 3 * 3
    assert len(record.epochs) == 3
    best = max(record.epochs, key=lambda e: (e["val_song_f1"], e["val_window_f1"], e["epoch"]))
    assert record.best_epoch == best["epoch"]


def test_early_stopping_patience(toy_data, monkeypatch):
    from sidadapt import trainer as trainer_mod
    from sidadapt.evaluation import EvalReport

    scores = iter([0.5, 0.6, 0.6, 0.4, 0.9, 0.9])
    monkeypatch.setattr(trainer_mod, "evaluate_split",
                        lambda model, split, seed=None: EvalReport(0.5, next(scores)))
    cfg = make_toy_config(patience=2)
    model = init_params(effective_backbone(cfg, 3))
    _, record = fit(model, toy_data, cfg, "baseline", 6)
    # epoch 2 ties the best (kept, as the later epoch) without resetting patience
    assert len(record.epochs) == 4
    assert record.best_epoch == 2


def test_train_pipeline_outputs_and_reproducibility(toy_data, tmp_path):
    cfg = make_toy_config(variant="mmd", paths={"out_dir": str(tmp_path / "a")})
    cfg = from_dict(TrainConfig, cfg.to_dict())
    rec = train(cfg, toy_data)
    out = tmp_path / "a"
    for name in ("config.json", "run.json", "best.pt", "metrics.jsonl", "pretrain/best.pt"):
        assert (out / name).is_file(), name
    model, meta = load_checkpoint(out / "best.pt")
    assert meta["checkpoint_id"] == rec.best_checkpoint_id
    assert meta["config_hash"] == rec.config_hash == cfg.digest()
    run = json.loads((out / "run.json").read_text())
    assert run["test"]["song_macro_f1"] == rec.test["song_macro_f1"]

    again = train(cfg.replace(paths=cfg.paths.__class__(out_dir=str(tmp_path / "b"))), toy_data)
    assert again.best_checkpoint_id == rec.best_checkpoint_id
    assert [e["loss"] for e in again.epochs] == [e["loss"] for e in rec.epochs]


def test_da_from_init_checkpoint(toy_data, tmp_path):
    cfg = make_toy_config()
    _, pre = pretrain_source(cfg, toy_data, tmp_path / "pre")
    for variant in ("revgrad", "can"):
        dcfg = cfg.replace(variant=variant, paths=cfg.paths.__class__(init_checkpoint=pre.best_checkpoint))
        rec = train(dcfg, toy_data)
        assert rec.test is not None and 0 <= rec.test["song_macro_f1"] <= 1
    with pytest.raises(FileNotFoundError):
        train(cfg.replace(variant="can", paths=cfg.paths.__class__(init_checkpoint=str(tmp_path / "nope.pt"))),
              toy_data)


def test_config_file_strict(tmp_path):
    cfg = make_toy_config(variant="can")
    save_config(tmp_path / "c.json", cfg)
    assert load_config(tmp_path / "c.json") == cfg
    (tmp_path / "bad.json").write_text(json.dumps({"variant": "mmd", "mmd": {"weigth": 1.0}}))
    with pytest.raises(ConfigFileError, match="weigth"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "bad2.json").write_text(json.dumps({"variant": "dann"}))
    with pytest.raises(ConfigFileError):
        load_config(tmp_path / "bad2.json")
    (tmp_path / "bad3.json").write_text("{not json")
    with pytest.raises(ConfigFileError):
        load_config(tmp_path / "bad3.json")


def test_config_partial_sections():
    cfg = from_dict(TrainConfig, {"variant": "mmd", "mmd": {"weight": 1.0}, "backbone": {"gru_units": [8, 8]}})
    assert cfg.mmd.weight == 1.0 and cfg.mmd.warmup_fraction == 0.1
    assert cfg.backbone.gru_units == (8, 8) and cfg.backbone.num_classes == 20


def test_mmd_warmup_schedule():
    m = MMDConfig(weight=0.5, warmup_fraction=0.1)
    assert m.weight_at(0, 100) == 0.0
    assert abs(m.weight_at(5, 100) - 0.25) < 1e-12
    assert m.weight_at(10, 100) == m.weight_at(99, 100) == 0.5
