"""Spatio-temporal sequence tensors, normalization, and the on-disk dataset store.

A dataset directory holds `manifest.json` plus one `seq_<id>.f32` file per
sequence: row-major [T, H, W, C] little-endian float32, normalized to
[-1, 1]. The manifest records the raw physical range so metrics can be
reported in original units.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataIntegrityError

KIND_ORIGINAL = "original"
KIND_GENERATED = "generated"

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class STSequence:
    """One [T, H, W, C] observation sequence in normalized [-1, 1] units."""

    frames: np.ndarray
    raw_range: tuple[float, float]
    source_id: str
    kind: str = KIND_ORIGINAL

    def validate(self) -> None:
        if self.frames.ndim != 4:
            raise DataIntegrityError(
                f"sequence {self.source_id}: frames must be [T, H, W, C], "
                f"got shape {self.frames.shape}"
            )
        t, _, _, c = self.frames.shape
        if t < 1 or c < 1:
            raise DataIntegrityError(f"sequence {self.source_id}: need T >= 1 and C >= 1")
        if not np.isfinite(self.frames).all():
            raise DataIntegrityError(f"sequence {self.source_id}: non-finite values")
        lo, hi = float(self.frames.min()), float(self.frames.max())
        if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
            raise DataIntegrityError(
                f"sequence {self.source_id}: values outside [-1, 1] ({lo:.4g}, {hi:.4g})"
            )
        if self.kind not in (KIND_ORIGINAL, KIND_GENERATED):
            raise DataIntegrityError(f"sequence {self.source_id}: unknown kind {self.kind!r}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.frames.shape)


def normalize(values: np.ndarray, raw_range: tuple[float, float]) -> np.ndarray:
    """Map physical units onto [-1, 1], with raw_range endpoints at exactly +-1."""
    lo, hi = float(raw_range[0]), float(raw_range[1])
    if not hi > lo:
        raise ConfigurationError(f"raw_range must satisfy max > min, got ({lo}, {hi})")
    out = (np.asarray(values, dtype=np.float64) - lo) * (2.0 / (hi - lo)) - 1.0
    return out.astype(np.float32)


def denormalize(values: np.ndarray, raw_range: tuple[float, float]) -> np.ndarray:
    """Inverse of :func:`normalize`, back to physical units."""
    lo, hi = float(raw_range[0]), float(raw_range[1])
    if not hi > lo:
        raise ConfigurationError(f"raw_range must satisfy max > min, got ({lo}, {hi})")
    out = (np.asarray(values, dtype=np.float64) + 1.0) * ((hi - lo) / 2.0) + lo
    return out.astype(np.float32)


@dataclass
class DatasetManifest:
    name: str
    num_sequences: int
    shape: tuple[int, int, int, int]
    normalization: tuple[float, float]
    split: tuple[float, float, float]
    seed: int
    dtype: str = "<f4"
    sequence_ids: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions must sum to 1.0, got {self.split}")
        if any(f < 0 for f in self.split):
            raise ConfigurationError(f"split fractions must be non-negative, got {self.split}")
        if self.dtype != "<f4":
            raise ConfigurationError(f"unsupported dtype {self.dtype!r}, expected '<f4'")
        if len(self.sequence_ids) != self.num_sequences:
            raise DataIntegrityError(
                f"manifest lists {len(self.sequence_ids)} ids but "
                f"num_sequences is {self.num_sequences}"
            )
        if len(self.shape) != 4 or any(int(s) < 1 for s in self.shape):
            raise ConfigurationError(f"bad shape {self.shape}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "num_sequences": self.num_sequences,
                "shape": list(self.shape),
                "dtype": self.dtype,
                "normalization": list(self.normalization),
                "split": list(self.split),
                "seed": self.seed,
                "sequence_ids": self.sequence_ids,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            raw = json.loads(text)
            return cls(
                name=raw["name"],
                num_sequences=int(raw["num_sequences"]),
                shape=tuple(int(s) for s in raw["shape"]),
                normalization=(float(raw["normalization"][0]), float(raw["normalization"][1])),
                split=tuple(float(f) for f in raw["split"]),
                seed=int(raw["seed"]),
                dtype=raw.get("dtype", "<f4"),
                sequence_ids=list(raw["sequence_ids"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataIntegrityError(f"malformed manifest: {exc}") from exc


def split_sequence_ids(
    ids: list[str], fractions: tuple[float, float, float], seed: int
) -> dict[str, list[str]]:
    """Deterministic train/val/test assignment by one seeded shuffle.

    The returned train list keeps the shuffle order, so scarcity subsets
    taken as prefixes of it are nested across fractions.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must sum to 1.0, got {fractions}")
    n = len(ids)
    order = [ids[i] for i in np.random.default_rng(seed).permutation(n)]
    n_train = math.floor(fractions[0] * n)
    n_train_val = math.floor((fractions[0] + fractions[1]) * n)
    return {
        "train": order[:n_train],
        "val": order[n_train:n_train_val],
        "test": order[n_train_val:],
    }


def _sequence_path(root: Path, source_id: str) -> Path:
    return root / f"seq_{source_id}.f32"


def save_dataset(root, manifest: DatasetManifest, sequences) -> None:
    """Write `manifest.json` and one raw float32 file per sequence.

    `sequences` is an iterable of STSequence whose ids and shapes must
    match the manifest exactly.
    """
    manifest.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    seen = []
    for seq in sequences:
        seq.validate()
        if tuple(seq.frames.shape) != tuple(manifest.shape):
            raise DataIntegrityError(
                f"sequence {seq.source_id} shape {seq.frames.shape} != "
                f"manifest shape {manifest.shape}"
            )
        data = np.ascontiguousarray(seq.frames, dtype="<f4")
        _sequence_path(root, seq.source_id).write_bytes(data.tobytes())
        seen.append(seq.source_id)
    if sorted(seen) != sorted(manifest.sequence_ids):
        raise DataIntegrityError("written sequence ids do not match the manifest")
    (root / "manifest.json").write_text(manifest.to_json())


class Dataset:
    """Read accessor over a saved dataset directory."""

    def __init__(self, root, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._splits = split_sequence_ids(manifest.sequence_ids, manifest.split, manifest.seed)

    @property
    def ids(self) -> list[str]:
        return list(self.manifest.sequence_ids)

    def split_ids(self, which: str) -> list[str]:
        if which not in SPLIT_NAMES:
            raise ConfigurationError(f"unknown split {which!r}, expected one of {SPLIT_NAMES}")
        return list(self._splits[which])

    def load(self, source_id: str) -> STSequence:
        if source_id not in self.manifest.sequence_ids:
            raise DataIntegrityError(f"unknown sequence id {source_id!r}")
        path = _sequence_path(self.root, source_id)
        expected = int(np.prod(self.manifest.shape)) * 4
        raw = path.read_bytes()
        if len(raw) != expected:
            raise DataIntegrityError(
                f"{path.name}: {len(raw)} bytes on disk, manifest implies {expected}"
            )
        frames = np.frombuffer(raw, dtype="<f4").reshape(self.manifest.shape).copy()
        seq = STSequence(
            frames=frames,
            raw_range=self.manifest.normalization,
            source_id=source_id,
        )
        seq.validate()
        return seq


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataIntegrityError(f"no manifest.json under {root}")
    manifest = DatasetManifest.from_json(manifest_path.read_text())
    manifest.validate()
    expected = int(np.prod(manifest.shape)) * 4
    for source_id in manifest.sequence_ids:
        path = _sequence_path(root, source_id)
        if not path.is_file():
            raise DataIntegrityError(f"missing sequence file {path.name}")
        actual = path.stat().st_size
        if actual != expected:
            raise DataIntegrityError(
                f"{path.name}: {actual} bytes on disk, manifest implies {expected}"
            )
    return Dataset(root, manifest)
