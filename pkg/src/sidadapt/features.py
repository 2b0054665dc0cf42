"""Audio decoding, log-mel features and the per-window feature cache.

Cache file layout (version 1), little-endian::

    offset  size  content
    0       4     magic b"SIDF"
    4       2     format version (uint16) = 1
    6       4     header length H in bytes (uint32)
    10      H     UTF-8 JSON header: mel_bins, frames, cfg_hash, track
                  [artist, album, track], start, length, hop, padded
    10+H    4*N   float32 values, row-major (mel_bins x frames)

Files live at ``<cache>/<cfg_hash>/<digest>.feat`` where the digest is taken
over (track, start), so every (track, offset, config) triple has one file.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes
from .dataset import TrackRecord, WindowSpec, window_plan

CACHE_MAGIC = b"SIDF"
CACHE_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class AudioDecodeError(RuntimeError):
    pass


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    n_mels: int = 128
    n_fft: int = 2048
    hop_length: int = 512
    eps: float = 1e-10
    fmin: float = 0.0
    fmax: float | None = None
    window_seconds: float = 30.0
    window_hop_seconds: float = 10.0

    def __post_init__(self):
        if self.sample_rate <= 0 or self.n_mels <= 0 or self.n_fft <= 0 or self.hop_length <= 0:
            raise FeatureError(f"invalid feature config {self}")
        if not self.eps > 0:
            raise FeatureError("eps must be positive")
        if self.window_samples < self.n_fft:
            raise FeatureError("window shorter than one analysis frame")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_seconds * self.sample_rate))

    @property
    def frames_per_window(self) -> int:
        return 1 + (self.window_samples - self.n_fft) // self.hop_length

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise AudioDecodeError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise AudioDecodeError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureWindow:
    values: np.ndarray
    spec: WindowSpec
    label: int | None = None  # None means unlabeled
    domain: str = "source"

    @property
    def mel_bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def decode_audio(path, target_rate: int) -> Waveform:
    import soundfile as sf

    try:
        data, sr = sf.read(str(path), dtype="float32", always_2d=True)
    except Exception as exc:  # soundfile raises a handful of unrelated types
        raise AudioDecodeError(f"cannot decode {path}: {exc}") from exc
    if data.shape[0] == 0:
        raise AudioDecodeError(f"zero-length audio stream: {path}")
    y = data[:, 0] if data.shape[1] == 1 else data.mean(axis=1, dtype=np.float32)
    if sr != target_rate:
        import librosa

        y = librosa.resample(y, orig_sr=sr, target_sr=target_rate).astype(np.float32)
    return Waveform(np.ascontiguousarray(y), int(target_rate))


def probe_duration(path) -> float:
    import soundfile as sf

    try:
        info = sf.info(str(path))
    except Exception as exc:
        raise AudioDecodeError(f"cannot probe {path}: {exc}") from exc
    if info.frames == 0:
        raise AudioDecodeError(f"zero-length audio stream: {path}")
    return info.frames / info.samplerate


@functools.lru_cache(maxsize=16)
def mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax) -> np.ndarray:
    import librosa

    return librosa.filters.mel(
        sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax, dtype=np.float64
    )


def log_mel(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """Natural-log mel power spectrogram, ``log(mel_power + cfg.eps)``.

    Frames are taken without centering, so frame ``k`` covers samples
    ``[k * hop, k * hop + n_fft)`` and slicing the waveform on the hop grid
    commutes with the transform.
    """
    import librosa

    if w.sample_rate != cfg.sample_rate:
        raise FeatureError(f"waveform at {w.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
    if len(w.samples) < cfg.n_fft:
        raise FeatureError(f"waveform of {len(w.samples)} samples is shorter than one frame ({cfg.n_fft})")
    y = np.asarray(w.samples, dtype=np.float64)
    spec = librosa.stft(y, n_fft=cfg.n_fft, hop_length=cfg.hop_length, window="hann", center=False)
    power = np.abs(spec) ** 2
    mel = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax) @ power
    return np.log(mel + cfg.eps).astype(np.float32)


def window_start_sample(spec: WindowSpec, cfg: FeatureConfig) -> int:
    # snapped to the frame hop so overlapping windows share frames exactly
    return int(round(spec.start * cfg.sample_rate / cfg.hop_length)) * cfg.hop_length


def extract_window(audio: Waveform, spec: WindowSpec, cfg: FeatureConfig,
                   label: int | None = None, domain: str = "source") -> FeatureWindow:
    if domain not in ("source", "target"):
        raise FeatureError(f"unknown domain {domain!r}")
    n = int(round(spec.length * cfg.sample_rate))
    if n < cfg.n_fft:
        raise FeatureError("window shorter than one analysis frame")
    s0 = window_start_sample(spec, cfg)
    total = len(audio.samples)
    if s0 < 0 or s0 >= total:
        raise FeatureError(f"window start {spec.start}s outside a {audio.duration:.3f}s track")
    overflow = s0 + n - total
    if overflow > 0 and not spec.padded and overflow > cfg.hop_length:
        raise FeatureError(
            f"window [{spec.start}, {spec.start + spec.length})s exceeds the "
            f"{audio.duration:.3f}s track and is not flagged for padding"
        )
    chunk = audio.samples[s0:s0 + n]
    if len(chunk) < n:
        chunk = np.concatenate([chunk, np.zeros(n - len(chunk), dtype=chunk.dtype)])
    values = log_mel(Waveform(chunk, audio.sample_rate), cfg)
    return FeatureWindow(values, spec, label if domain == "source" else None, domain)


def extract_track(record: TrackRecord, cfg: FeatureConfig, audio: Waveform | None = None):
    """Decode a track and return its planned feature windows (unlabeled)."""
    audio = audio if audio is not None else decode_audio(record.audio_path, cfg.sample_rate)
    if record.duration is None:
        record = dataclasses.replace(record, duration=audio.duration)
    specs = window_plan(record, cfg.window_seconds, cfg.window_hop_seconds)
    return [extract_window(audio, s, cfg) for s in specs]


# feature cache -------------------------------------------------------------

def cache_path(cache_dir, track, start: float, cfg: FeatureConfig) -> Path:
    key = "\0".join([*track, repr(float(start))]).encode("utf-8")
    return Path(cache_dir) / cfg.digest() / (hashlib.sha1(key).hexdigest()[:20] + ".feat")


def encode_window(values: np.ndarray, spec: WindowSpec, cfg: FeatureConfig) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f4")
    header = json.dumps({
        "mel_bins": int(values.shape[0]),
        "frames": int(values.shape[1]),
        "cfg_hash": cfg.digest(),
        "track": list(spec.track),
        "start": spec.start,
        "length": spec.length,
        "hop": spec.hop,
        "padded": spec.padded,
    }, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(CACHE_MAGIC, CACHE_VERSION, len(header)) + header + values.tobytes()


def decode_window(blob: bytes) -> tuple[np.ndarray, dict]:
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != CACHE_MAGIC:
        raise FeatureError("not a feature cache file")
    if version != CACHE_VERSION:
        raise FeatureError(f"unsupported feature cache version {version}")
    start = _PREFIX.size
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    shape = (header["mel_bins"], header["frames"])
    values = np.frombuffer(blob, dtype="<f4", offset=start + hlen).reshape(shape)
    return values.astype(np.float32), header


def write_cached(cache_dir, fw: FeatureWindow, cfg: FeatureConfig) -> Path:
    path = cache_path(cache_dir, fw.spec.track, fw.spec.start, cfg)
    atomic_write_bytes(path, encode_window(fw.values, fw.spec, cfg))
    return path


def read_cached(path) -> FeatureWindow:
    values, h = decode_window(Path(path).read_bytes())
    spec = WindowSpec(tuple(h["track"]), h["start"], h["length"], h["hop"], h["padded"])
    return FeatureWindow(values, spec, None, "source")


def load_cache(cache_dir, cfg: FeatureConfig) -> list[FeatureWindow]:
    """All cached windows for ``cfg``, sorted by (track, start)."""
    root = Path(cache_dir) / cfg.digest()
    if not root.is_dir():
        raise FileNotFoundError(f"no feature cache for config {cfg.digest()} under {cache_dir}")
    windows = [read_cached(p) for p in root.glob("*.feat")]
    windows.sort(key=lambda w: (w.spec.track, w.spec.start))
    return windows
