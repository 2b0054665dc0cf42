import pytest
import torch

from sidadapt.backbone import BackboneConfig
from sidadapt.config import TrainConfig
from sidadapt.features import FeatureConfig
from sidadapt.trainer import DomainData, Split

# 16 mel bins x 24 frames; tiny enough for step-level tests
TOY_FEATURES = FeatureConfig(sample_rate=8000, n_mels=16, n_fft=512, hop_length=256,
                             window_seconds=0.8, window_hop_seconds=0.4)
TOY_BACKBONE = BackboneConfig(n_mels=16, n_frames=24, conv_blocks=((4, 3, (2, 2)), (4, 3, (2, 2))),
                              gru_units=(6, 5), num_classes=3, dropout=0.1)


def toy_split(n_per_class, classes, shift, seed, album):
    g = torch.Generator().manual_seed(seed)
    xs, ys, tracks = [], [], []
    for c in range(classes):
        pattern = torch.zeros(16, 24)
        pattern[4 * c:4 * c + 4] = 2.0
        for i in range(n_per_class):
            xs.append(pattern + shift + 0.5 * torch.randn(16, 24, generator=g))
            ys.append(c)
            tracks.append((f"artist{c}", album, f"t{i // 2}"))
    return Split(torch.stack(xs), torch.tensor(ys), tracks)


def make_toy_data(classes=3, seed=0):
    return DomainData(
        toy_split(8, classes, 0.0, seed, "studio"),
        toy_split(4, classes, 0.0, seed + 1, "studio_val"),
        toy_split(6, classes, 0.7, seed + 2, "live"),
        tuple(f"artist{c}" for c in range(classes)),
    )


def make_toy_config(**changes) -> TrainConfig:
    cfg = TrainConfig(features=TOY_FEATURES, backbone=TOY_BACKBONE, batch_size=8,
                      target_batch_size=8, lr=1e-3, epochs=2, pretrain_epochs=2, patience=100)
    return cfg.replace(**changes)


@pytest.fixture
def toy_data():
    return make_toy_data()


@pytest.fixture
def toy_config():
    return make_toy_config()


# acceptance lines are echoed in the terminal summary so they survive output capture
ACCEPTANCE_LINES = []


def record_criterion(name: str, ok: bool, detail: str = "") -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
