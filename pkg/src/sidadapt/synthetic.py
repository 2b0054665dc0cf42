"""Generated singer-identification task with an album-level domain shift.

Each artist sings random note sequences drawn from its own register with its
own harmonic timbre.  Training and validation albums are clean "studio"
takes; the held-out "live" album of every artist is pitch-shifted, has a
different spectral tilt and carries background noise.

``run_protocol`` trains the source-only baseline once and adapts it with
each variant, writing one run directory per variant.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .dataset import Manifest, SplitAssignment, TrackRecord, save_split, write_manifest
from .features import FeatureConfig, Waveform


@dataclass(frozen=True)
class SyntheticTask:
    n_artists: int = 3
    train_albums: int = 4
    tracks_per_album: int = 8
    track_seconds: float = 7.0
    sample_rate: int = 8000
    note_seconds: tuple = (0.4, 0.9)
    # artist registers as MIDI note ranges and per-artist harmonic profiles
    registers: tuple = ((52, 60), (57, 65), (62, 70))
    harmonics: tuple = (
        (1.0, 0.1, 0.6, 0.05, 0.4, 0.02),
        (1.0, 0.7, 0.5, 0.35, 0.25, 0.15),
        (1.0, 0.05, 0.05, 0.8, 0.02, 0.5),
    )
    studio_noise: float = 0.01
    live_pitch_shift: float = 2.0       # semitones
    live_noise: float = 0.03
    live_tilt: float = 0.6              # exponent applied to harmonic amplitudes
    seed: int = 0

    @property
    def albums_per_artist(self) -> int:
        return self.train_albums + 2

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(sample_rate=self.sample_rate, n_mels=40, n_fft=512, hop_length=256,
                             window_seconds=3.0, window_hop_seconds=1.0)

    def backbone_config(self) -> BackboneConfig:
        fc = self.feature_config()
        return BackboneConfig(
            n_mels=fc.n_mels, n_frames=fc.frames_per_window,
            conv_blocks=((16, 3, (2, 2)), (32, 3, (2, 2)), (32, 3, (2, 2)), (32, 3, (2, 2))),
            gru_units=(32, 32), num_classes=self.n_artists, dropout=0.1, seed=self.seed,
        )


def _album_ids(task: SyntheticTask) -> list[str]:
    return [f"studio{i}" for i in range(task.train_albums)] + ["studio_val", "live"]


def render_track(task: SyntheticTask, artist: int, live: bool, rng: np.random.Generator) -> Waveform:
    sr = task.sample_rate
    n = int(round(task.track_seconds * sr))
    y = np.zeros(n)
    lo, hi = task.registers[artist]
    profile = np.asarray(task.harmonics[artist])
    if live:
        profile = profile ** task.live_tilt
    shift = task.live_pitch_shift if live else 0.0
    detune = rng.normal(0.0, 0.15)  # per-track tuning drift, semitones
    t0 = 0
    while t0 < n:
        dur = int(rng.uniform(*task.note_seconds) * sr)
        seg = min(dur, n - t0)
        midi = rng.integers(lo, hi + 1) + detune + shift
        f0 = 440.0 * 2 ** ((midi - 69) / 12)
        t = np.arange(seg) / sr
        env = np.minimum(1.0, np.minimum(t / 0.03, (seg / sr - t) / 0.05).clip(0))
        vib = 1 + 0.004 * np.sin(2 * np.pi * rng.uniform(4, 6) * t)
        note = np.zeros(seg)
        for h, amp in enumerate(profile, start=1):
            if h * f0 < sr / 2:
                note += amp * np.sin(2 * np.pi * h * f0 * np.cumsum(vib) / sr + rng.uniform(0, 2 * np.pi))
        y[t0:t0 + seg] += env * note * rng.uniform(0.6, 1.0)
        t0 += dur
    y /= max(1e-9, np.abs(y).max())
    noise = task.live_noise if live else task.studio_noise
    y += noise * rng.standard_normal(n)
    return Waveform((0.5 * y / max(1e-9, np.abs(y).max())).astype(np.float32), sr)


def generate(task: SyntheticTask):
    """Yield ``(TrackRecord, Waveform)`` for every synthetic track."""
    rng = np.random.default_rng([task.seed, 4242])
    for a in range(task.n_artists):
        for album in _album_ids(task):
            for k in range(task.tracks_per_album):
                w = render_track(task, a, album == "live", rng)
                rec = TrackRecord(f"artist{a}", album, f"track{k:02d}", "", w.duration)
                yield rec, w


def task_split(task: SyntheticTask) -> SplitAssignment:
    artists = [f"artist{a}" for a in range(task.n_artists)]
    train = {a: tuple(sorted(_album_ids(task)[:task.train_albums])) for a in artists}
    return SplitAssignment(train, {a: ("studio_val",) for a in artists},
                           {a: ("live",) for a in artists}, seed=task.seed,
                           counts=(task.train_albums, 1, 1))


def write_task(task: SyntheticTask, root) -> tuple[Path, Path]:
    """Write WAV files, a manifest and the matching split file under ``root``."""
    import soundfile as sf

    root = Path(root)
    records = []
    for rec, w in generate(task):
        rel = Path("audio") / rec.artist_id / rec.album_id / f"{rec.track_id}.wav"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        sf.write(root / rel, w.samples, w.sample_rate, subtype="FLOAT")
        records.append(replace(rec, audio_path=str(rel), duration=None))
    manifest_path, split_path = root / "manifest.tsv", root / "split.json"
    write_manifest(manifest_path, Manifest.from_records(records))
    save_split(split_path, task_split(task))
    return manifest_path, split_path


def build_windows(task: SyntheticTask):
    """Manifest plus feature windows for the task, computed in memory."""
    from .features import extract_track

    cfg = task.feature_config()
    records, windows = [], []
    for rec, w in generate(task):
        records.append(rec)
        windows.extend(extract_track(rec, cfg, audio=w))
    return Manifest.from_records(records), windows


def domain_data(task: SyntheticTask):
    from .trainer import build_domain_data

    manifest, windows = build_windows(task)
    return build_domain_data(windows, manifest, task_split(task))


def protocol_config(task: SyntheticTask):
    """Training settings used for the synthetic ordering experiment."""
    from .config import RevGradConfig, TrainConfig

    return TrainConfig(seed=task.seed, epochs=8, pretrain_epochs=12, batch_size=16,
                       target_batch_size=16, lr=1e-3, patience=100,
                       backbone=task.backbone_config(), features=task.feature_config(),
                       revgrad=RevGradConfig(mapping_lr=1e-4))


def run_protocol(task: SyntheticTask, out_dir, variants=("mmd", "revgrad", "can"), data=None):
    """Baseline plus adapted runs under ``out_dir/<variant>``; returns records by variant."""
    from .config import PathsConfig
    from .trainer import pretrain_source, train

    out_dir = Path(out_dir)
    data = data if data is not None else domain_data(task)
    cfg = protocol_config(task)
    _, base = pretrain_source(cfg, data, out_dir / "baseline")
    records = {"baseline": base}
    for v in variants:
        paths = PathsConfig(out_dir=str(out_dir / v), init_checkpoint=base.best_checkpoint)
        records[v] = train(cfg.replace(variant=v, paths=paths), data)
    return records
