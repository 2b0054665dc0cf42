"""Track manifests, album-level splits and window planning.

Manifest files are tab-separated, one track per line::

    artist_id <TAB> album_id <TAB> track_id <TAB> audio_path [<TAB> duration]

Blank lines and lines starting with ``#`` are ignored.  Relative audio paths
are resolved against the manifest's directory.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from ._io import read_json, write_json

SPLIT_FORMAT_VERSION = 1
PARTITIONS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class TrackRecord:
    artist_id: str
    album_id: str
    track_id: str
    audio_path: str
    duration: float | None = None

    def __post_init__(self):
        if self.duration is not None and not self.duration > 0:
            raise ManifestError(f"track {self.key}: duration must be > 0, got {self.duration}")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.artist_id, self.album_id, self.track_id)


@dataclass(frozen=True)
class Manifest:
    entries: tuple[TrackRecord, ...]
    artists: tuple[str, ...]

    def __post_init__(self):
        known = set(self.artists)
        if len(known) != len(self.artists):
            raise ManifestError("artist list contains duplicates")
        seen = set()
        for rec in self.entries:
            if rec.artist_id not in known:
                raise ManifestError(f"track {rec.key} has unknown artist {rec.artist_id!r}")
            if rec.key in seen:
                raise ManifestError(f"duplicate (artist, album, track) triple {rec.key}")
            seen.add(rec.key)

    @classmethod
    def from_records(cls, records: Iterable[TrackRecord]) -> "Manifest":
        records = tuple(records)
        artists = tuple(dict.fromkeys(r.artist_id for r in records))
        return cls(records, artists)

    def albums(self, artist: str) -> list[str]:
        return sorted({r.album_id for r in self.entries if r.artist_id == artist})

    def artist_index(self, artist: str) -> int:
        return self.artists.index(artist)

    def with_durations(self, durations: dict) -> "Manifest":
        entries = tuple(
            replace(r, duration=durations[r.key]) if r.key in durations else r
            for r in self.entries
        )
        return Manifest(entries, self.artists)


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) not in (4, 5) or not all(f.strip() for f in fields[:4]):
                raise ManifestError(
                    f"{path}:{lineno}: expected 4 or 5 tab-separated fields "
                    f"(artist, album, track, audio_path[, duration]), got {len(fields)}"
                )
            artist, album, track, audio = (f.strip() for f in fields[:4])
            duration = None
            if len(fields) == 5 and fields[4].strip():
                try:
                    duration = float(fields[4])
                except ValueError:
                    raise ManifestError(f"{path}:{lineno}: bad duration {fields[4]!r}") from None
                if not duration > 0:
                    raise ManifestError(f"{path}:{lineno}: duration must be > 0")
            key = (artist, album, track)
            if key in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate triple {key} (first seen on line {seen[key]})"
                )
            seen[key] = lineno
            audio_path = Path(audio)
            if not audio_path.is_absolute():
                audio_path = path.parent / audio_path
            records.append(TrackRecord(artist, album, track, str(audio_path), duration))
    return Manifest.from_records(records)


def write_manifest(path, manifest: Manifest) -> None:
    from ._io import atomic_write_text

    lines = []
    for r in manifest.entries:
        fields = [r.artist_id, r.album_id, r.track_id, r.audio_path]
        if r.duration is not None:
            fields.append(repr(r.duration))
        lines.append("\t".join(fields))
    atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass(frozen=True)
class SplitAssignment:
    train_albums: dict[str, tuple[str, ...]]
    val_albums: dict[str, tuple[str, ...]]
    test_albums: dict[str, tuple[str, ...]]
    seed: int
    counts: tuple[int, int, int] = (4, 1, 1)

    def partition_of(self, artist: str, album: str) -> str | None:
        for name in PARTITIONS:
            if album in self.albums(name).get(artist, ()):
                return name
        return None

    def albums(self, partition: str) -> dict[str, tuple[str, ...]]:
        return {"train": self.train_albums, "val": self.val_albums, "test": self.test_albums}[partition]

    def tracks(self, manifest: Manifest, partitions: Iterable[str]) -> list[TrackRecord]:
        wanted = set(partitions)
        return [r for r in manifest.entries if self.partition_of(r.artist_id, r.album_id) in wanted]

    def to_dict(self) -> dict:
        artists = sorted(set(self.train_albums) | set(self.val_albums) | set(self.test_albums))
        return {
            "version": SPLIT_FORMAT_VERSION,
            "seed": self.seed,
            "counts": list(self.counts),
            "artists": {
                a: {p: list(self.albums(p).get(a, ())) for p in PARTITIONS} for a in artists
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitAssignment":
        if d.get("version") != SPLIT_FORMAT_VERSION:
            raise SplitError(f"unsupported split file version {d.get('version')!r}")
        parts = {p: {a: tuple(v[p]) for a, v in d["artists"].items()} for p in PARTITIONS}
        return cls(parts["train"], parts["val"], parts["test"], int(d["seed"]), tuple(d["counts"]))


def save_split(path, split: SplitAssignment) -> None:
    write_json(path, split.to_dict())


def load_split(path) -> SplitAssignment:
    if not Path(path).is_file():
        raise FileNotFoundError(f"split file not found: {path}")
    return SplitAssignment.from_dict(read_json(path))


def album_split(manifest: Manifest, counts=(4, 1, 1), seed: int = 0) -> SplitAssignment:
    """Partition each artist's albums into train/val/test.

    Every artist is shuffled with its own generator derived from ``(seed,
    artist)``, so an artist's split does not depend on which other artists
    are in the manifest.  Albums beyond ``sum(counts)`` go to train.
    """
    n_train, n_val, n_test = (int(c) for c in counts)
    if min(n_train, n_val, n_test) < 0:
        raise SplitError(f"album counts must be non-negative, got {counts}")
    train, val, test = {}, {}, {}
    for artist in manifest.artists:
        albums = manifest.albums(artist)
        if len(albums) < n_train + n_val + n_test:
            raise SplitError(
                f"artist {artist!r} has {len(albums)} albums, needs at least "
                f"{n_train + n_val + n_test} for counts {tuple(counts)}"
            )
        rng = np.random.default_rng([seed, zlib.crc32(artist.encode("utf-8"))])
        order = [albums[i] for i in rng.permutation(len(albums))]
        test[artist] = tuple(sorted(order[:n_test]))
        val[artist] = tuple(sorted(order[n_test:n_test + n_val]))
        train[artist] = tuple(sorted(order[n_test + n_val:]))
    return SplitAssignment(train, val, test, seed, (n_train, n_val, n_test))


@dataclass(frozen=True)
class WindowSpec:
    track: tuple[str, str, str]
    start: float
    length: float = 30.0
    hop: float = 10.0
    padded: bool = False


# offsets computed as k * hop can overshoot by an ulp; this slack absorbs it
_EPS = 1e-9


def window_count(duration: float, length: float, hop: float) -> int:
    if duration < length:
        return 1
    return int(math.floor((duration - length) / hop + _EPS)) + 1


def window_plan(track: TrackRecord, length: float = 30.0, hop: float = 10.0) -> list[WindowSpec]:
    if not length > 0 or not hop > 0:
        raise ValueError(f"window length and hop must be positive, got {length}, {hop}")
    if track.duration is None:
        raise ValueError(f"track {track.key} has no probed duration")
    if track.duration < length:
        return [WindowSpec(track.key, 0.0, length, hop, padded=True)]
    n = window_count(track.duration, length, hop)
    return [WindowSpec(track.key, k * hop, length, hop) for k in range(n)]
