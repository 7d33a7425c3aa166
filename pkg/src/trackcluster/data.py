"""Face-track data model, on-disk dataset format and synthetic generation.

A dataset directory holds ``manifest.json`` plus one raw blob per track::

    manifest.json  {"name": ..., "dim": D,
                    "tracks": [{"track_id", "first_frame", "crop_count",
                                "truth_identity" (optional), "blob"}]}
    track_0007.f32 crop_count x D little-endian float32, row-major

Values are stored as float32 and promoted to float64 on load.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

FRAME_STRIDE = 12
MANIFEST = "manifest.json"
UNKNOWN = -1

ClusterAssignment = Dict[int, int]


class DatasetError(ValueError):
    """Raised when a dataset violates its format or invariants."""


def sample_frames(first_frame: int, count: int) -> List[int]:
    """Frame indices of the sampled crops of a track.

    Crop ``n`` (1-based) sits at ``first_frame + 12 * (n - 1)``, so the first
    crop is the track start.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    return [first_frame + FRAME_STRIDE * n for n in range(count)]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Track:
    track_id: int
    first_frame: int
    crops: np.ndarray
    truth_identity: Optional[int] = None

    def __post_init__(self):
        crops = np.asarray(self.crops, dtype=np.float64)
        if crops.ndim != 2 or crops.shape[0] == 0:
            raise DatasetError(f"track {self.track_id}: crops must be a non-empty (n, D) array")
        if crops.shape[1] < 2:
            raise DatasetError(f"track {self.track_id}: dimension must be >= 2")
        if self.track_id < 0 or self.first_frame < 0:
            raise DatasetError(f"track {self.track_id}: ids and frames must be non-negative")
        if not np.all(np.isfinite(crops)):
            raise DatasetError(f"track {self.track_id}: non-finite crop value")
        object.__setattr__(self, "crops", _frozen(crops))

    @property
    def n_crops(self) -> int:
        return self.crops.shape[0]

    @property
    def dim(self) -> int:
        return self.crops.shape[1]

    @property
    def frames(self) -> List[int]:
        return sample_frames(self.first_frame, self.n_crops)


@dataclass(frozen=True)
class TrackDataset:
    tracks: tuple
    dim: int
    name: str = "dataset"

    def __post_init__(self):
        tracks = tuple(self.tracks)
        if not tracks:
            raise DatasetError("dataset must contain at least one track")
        seen = set()
        for t in tracks:
            if t.track_id in seen:
                raise DatasetError(f"duplicate track_id {t.track_id}")
            seen.add(t.track_id)
            if t.dim != self.dim:
                raise DatasetError(
                    f"track {t.track_id}: dimension mismatch ({t.dim} != {self.dim})")
        object.__setattr__(self, "tracks", tracks)

    def __len__(self) -> int:
        return len(self.tracks)

    def __iter__(self):
        return iter(self.tracks)

    @property
    def ids(self) -> List[int]:
        return [t.track_id for t in self.tracks]

    def by_id(self) -> Dict[int, Track]:
        return {t.track_id: t for t in self.tracks}

    def truth(self) -> Dict[int, Optional[int]]:
        return {t.track_id: t.truth_identity for t in self.tracks}

    def subset(self, ids: Iterable[int]) -> List[Track]:
        keep = set(ids)
        return [t for t in self.tracks if t.track_id in keep]


def _blob_name(track_id: int) -> str:
    return f"track_{track_id:06d}.f32"


def save_dataset(ds: TrackDataset, path) -> None:
    """Write ``ds`` as a manifest plus per-track float32 blobs."""
    if len(ds.tracks) == 0:
        raise DatasetError("dataset must contain at least one track")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for t in ds.tracks:
        blob = _blob_name(t.track_id)
        data = np.ascontiguousarray(t.crops, dtype="<f4")
        (path / blob).write_bytes(data.tobytes(order="C"))
        entry = {"track_id": int(t.track_id), "first_frame": int(t.first_frame),
                 "crop_count": int(t.n_crops), "blob": blob}
        if t.truth_identity is not None:
            entry["truth_identity"] = int(t.truth_identity)
        entries.append(entry)
    manifest = {"name": ds.name, "dim": int(ds.dim), "tracks": entries}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_dataset(path) -> TrackDataset:
    """Read and validate a dataset directory written by :func:`save_dataset`."""
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise DatasetError(f"missing manifest: {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    dim = int(manifest["dim"])
    if dim < 2:
        raise DatasetError(f"dimension must be >= 2, got {dim}")
    seen = set()
    tracks = []
    for entry in manifest["tracks"]:
        tid = int(entry["track_id"])
        if tid in seen:
            raise DatasetError(f"duplicate track_id {tid}")
        seen.add(tid)
        count = int(entry["crop_count"])
        bpath = path / entry["blob"]
        if not bpath.is_file():
            raise DatasetError(f"track {tid}: missing blob {entry['blob']}")
        raw = bpath.read_bytes()
        expected = count * dim * 4
        if len(raw) != expected:
            raise DatasetError(
                f"track {tid}: blob length mismatch at byte offset {min(len(raw), expected)} "
                f"(expected {expected} bytes, found {len(raw)})")
        values = np.frombuffer(raw, dtype="<f4")
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise DatasetError(
                f"track {tid}: non-finite value at byte offset {int(bad[0]) * 4}")
        truth = entry.get("truth_identity")
        tracks.append(Track(tid, int(entry["first_frame"]),
                            values.reshape(count, dim).astype(np.float64),
                            None if truth is None else int(truth)))
    return TrackDataset(tuple(tracks), dim, manifest.get("name", path.name))


@dataclass
class SyntheticConfig:
    identities: int = 8
    tracks_per_identity: int = 5
    crops_per_track: int = 6
    dim: int = 32
    identity_spread: float = 1.0
    track_shift: float = 0.3
    crop_noise: float = 0.15
    outlier_tracks: int = 0
    seed: int = 0
    name: str = "synthetic"

    def validate(self) -> None:
        if self.identities < 1:
            raise ValueError("identities must be >= 1")
        if self.tracks_per_identity < 1 or self.crops_per_track < 1:
            raise ValueError("tracks_per_identity and crops_per_track must be >= 1")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if min(self.identity_spread, self.track_shift, self.crop_noise) < 0:
            raise ValueError("noise scales must be non-negative")
        if self.outlier_tracks < 0:
            raise ValueError("outlier_tracks must be >= 0")


def generate_synthetic(cfg: SyntheticConfig) -> TrackDataset:
    """Ground-truth track set: identity mean + per-track shift + per-crop noise.

    Outlier tracks carry independent ``N(0, identity_spread^2 I)`` crops with no
    shared identity and no truth label. Tracks are emitted in a seeded random
    order and values are rounded to float32 so the set survives a save/load.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    D, n = cfg.dim, cfg.crops_per_track
    means = cfg.identity_spread * rng.standard_normal((cfg.identities, D))
    records = []
    for k in range(cfg.identities):
        for _ in range(cfg.tracks_per_identity):
            shift = cfg.track_shift * rng.standard_normal(D)
            crops = means[k] + shift + cfg.crop_noise * rng.standard_normal((n, D))
            records.append((crops, k))
    for _ in range(cfg.outlier_tracks):
        records.append((cfg.identity_spread * rng.standard_normal((n, D)), None))
    order = rng.permutation(len(records))
    starts = rng.integers(0, 100_000, size=len(records))
    tracks = []
    for tid, idx in enumerate(order):
        crops, label = records[idx]
        crops = crops.astype(np.float32).astype(np.float64)
        tracks.append(Track(tid, int(starts[tid]), crops, label))
    return TrackDataset(tuple(tracks), D, cfg.name)


def relabel(assignment: ClusterAssignment) -> ClusterAssignment:
    """Map cluster ids onto 1..K ordered by smallest member id; -1 stays -1."""
    first = {}
    for tid in sorted(assignment):
        c = assignment[tid]
        if c != UNKNOWN and c not in first:
            first[c] = len(first) + 1
    return {tid: (UNKNOWN if c == UNKNOWN else first[c]) for tid, c in assignment.items()}


def assignment_from_groups(groups: Sequence[Sequence[int]],
                           unknown: Iterable[int] = ()) -> ClusterAssignment:
    out = {}
    for c, members in enumerate(groups, start=1):
        for tid in members:
            out[int(tid)] = c
    for tid in unknown:
        out[int(tid)] = UNKNOWN
    return relabel(out)


def save_assignment(assignment: ClusterAssignment, path) -> None:
    data = {str(k): int(assignment[k]) for k in sorted(assignment)}
    Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


def load_assignment(path) -> ClusterAssignment:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return {int(k): int(v) for k, v in data.items()}
