"""Sequence repository, per-frame resampling, and classical augmentation baselines.

The repository stores, per training source, the original sequence (copy 0)
plus r inpainted copies, each generated with an independently derived
seed. Sampling builds a new sequence by choosing, independently per frame,
a uniformly random generated copy with probability sample_prob, otherwise
the original frame. Frames are never mixed across sources.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataset import Dataset, KIND_GENERATED, KIND_ORIGINAL, STSequence
from .decipher import PartitionStore
from .diffusion import InpaintParams, inpaint_sequence
from .errors import ConfigurationError, DataIntegrityError, UsageError
from .patches import PatchPartitionGeometry
from .seeding import derive_seed


@dataclass
class SampleParams:
    sample_prob: float
    num_copies: int
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.sample_prob <= 1.0:
            raise ConfigurationError(f"sample_prob must be in [0, 1], got {self.sample_prob}")
        if self.num_copies < 0:
            raise ConfigurationError(f"num_copies must be >= 0, got {self.num_copies}")


class SequenceRepository:
    """Directory-backed store of original + generated copies per source."""

    def __init__(self, root):
        self.root = Path(root)
        index_path = self.root / "repository.json"
        if not index_path.is_file():
            raise DataIntegrityError(f"no repository.json under {self.root}")
        self._index = json.loads(index_path.read_text())

    @classmethod
    def create(cls, root, sources: list[str], num_copies: int,
               shape, raw_range) -> "SequenceRepository":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        (root / "provenance").mkdir(exist_ok=True)
        for k in range(num_copies + 1):
            (root / f"copy_{k}").mkdir(exist_ok=True)
        index = {
            "sources": sorted(sources),
            "num_copies": int(num_copies),
            "shape": [int(s) for s in shape],
            "raw_range": [float(raw_range[0]), float(raw_range[1])],
        }
        (root / "repository.json").write_text(json.dumps(index, indent=2))
        return cls(root)

    @property
    def sources(self) -> list[str]:
        return list(self._index["sources"])

    @property
    def num_copies(self) -> int:
        return int(self._index["num_copies"])

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self._index["shape"])

    @property
    def raw_range(self) -> tuple[float, float]:
        return tuple(self._index["raw_range"])

    def _path(self, source_id: str, copy_index: int) -> Path:
        return self.root / f"copy_{copy_index}" / f"seq_{source_id}.f32"

    def add(self, source_id: str, copy_index: int, sequence: STSequence) -> None:
        if source_id not in self._index["sources"]:
            raise UsageError(f"source {source_id!r} not registered in the repository")
        if not 0 <= copy_index <= self.num_copies:
            raise UsageError(f"copy index {copy_index} out of range [0, {self.num_copies}]")
        path = self._path(source_id, copy_index)
        if path.exists():
            raise UsageError(f"entry ({source_id}, {copy_index}) already present; entries are immutable")
        sequence.validate()
        if tuple(sequence.frames.shape) != self.shape:
            raise DataIntegrityError(
                f"sequence shape {sequence.frames.shape} != repository shape {self.shape}"
            )
        path.write_bytes(np.ascontiguousarray(sequence.frames, dtype="<f4").tobytes())

    def entry(self, source_id: str, copy_index: int) -> STSequence:
        path = self._path(source_id, copy_index)
        if not path.is_file():
            raise DataIntegrityError(f"missing repository entry ({source_id}, {copy_index})")
        expected = int(np.prod(self.shape)) * 4
        raw = path.read_bytes()
        if len(raw) != expected:
            raise DataIntegrityError(
                f"{path.name}: {len(raw)} bytes on disk, repository implies {expected}"
            )
        frames = np.frombuffer(raw, dtype="<f4").reshape(self.shape).copy()
        return STSequence(
            frames=frames,
            raw_range=self.raw_range,
            source_id=source_id,
            kind=KIND_ORIGINAL if copy_index == 0 else KIND_GENERATED,
        )

    def group(self, source_id: str) -> list[STSequence]:
        return [self.entry(source_id, k) for k in range(self.num_copies + 1)]

    def write_provenance(self, source_id: str, records: list[dict]) -> None:
        payload = {"source_id": source_id, "copies": records}
        (self.root / "provenance" / f"{source_id}.json").write_text(json.dumps(payload, indent=2))

    def provenance(self, source_id: str) -> dict:
        return json.loads((self.root / "provenance" / f"{source_id}.json").read_text())


def build_repository(
    dataset: Dataset,
    store: PartitionStore,
    model,
    num_copies: int,
    out_dir,
    base_seed: int = 0,
    resample_count: int = 1,
    source_ids: list[str] | None = None,
    workers: int = 1,
) -> SequenceRepository:
    """Store originals plus num_copies inpainted copies for the train split.

    Validation/test sequences are never augmented (and never stored here).
    """
    if num_copies < 0:
        raise ConfigurationError(f"num_copies must be >= 0, got {num_copies}")
    sources = source_ids if source_ids is not None else dataset.split_ids("train")
    if not sources:
        raise ConfigurationError("no training sequences to build a repository from")

    t, h, w, c = dataset.manifest.shape
    repo = SequenceRepository.create(
        out_dir,
        sources,
        num_copies,
        shape=(t, h, w, c),
        raw_range=dataset.manifest.normalization,
    )

    def generate(source_id: str, copy_index: int) -> STSequence:
        partitions = store.load(source_id)
        if len(partitions) != t:
            raise ConfigurationError(
                f"sequence {source_id}: {t} frames but {len(partitions)} partitions"
            )
        meta = store.metadata(source_id)
        geometry = PatchPartitionGeometry(h, w, c, meta["patch_size"])
        params = InpaintParams(
            schedule=model.schedule,
            resample_count=resample_count,
            seed=derive_seed(base_seed, source_id, copy_index),
        )
        return inpaint_sequence(model, dataset.load(source_id), partitions, geometry, params)

    jobs = [(sid, k) for sid in sorted(sources) for k in range(1, num_copies + 1)]
    if workers > 1 and jobs:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            generated = dict(zip(jobs, pool.map(lambda job: generate(*job), jobs)))
    else:
        generated = {job: generate(*job) for job in jobs}

    for source_id in sorted(sources):
        repo.add(source_id, 0, dataset.load(source_id))
        records = []
        for k in range(1, num_copies + 1):
            repo.add(source_id, k, generated[(source_id, k)])
            eps = store.load(source_id)[0].causal_fraction
            records.append(
                {
                    "copy_index": k,
                    "seed": derive_seed(base_seed, source_id, k),
                    "causal_fraction": eps,
                    "resample_count": resample_count,
                }
            )
        repo.write_provenance(source_id, records)
    return repo


def sample_sequence(group: list[STSequence], params: SampleParams, draw_seed: int) -> STSequence:
    """Per-frame Bernoulli(sample_prob) choice of a uniform generated copy."""
    params.validate()
    if not group:
        raise UsageError("empty sequence group")
    original = group[0]
    r = len(group) - 1
    if r != params.num_copies:
        raise UsageError(f"group holds {r} copies but params.num_copies is {params.num_copies}")
    for copy in group[1:]:
        if copy.frames.shape != original.frames.shape:
            raise DataIntegrityError(
                f"copy of {original.source_id} has shape {copy.frames.shape}, "
                f"original has {original.frames.shape}"
            )
    if r == 0:
        return STSequence(
            frames=original.frames.copy(),
            raw_range=original.raw_range,
            source_id=original.source_id,
            kind=KIND_ORIGINAL,
        )
    rng = np.random.default_rng(draw_seed)
    frames = original.frames.copy()
    used_generated = False
    for frame_index in range(frames.shape[0]):
        if rng.random() < params.sample_prob:
            copy_index = int(rng.integers(1, r + 1))
            frames[frame_index] = group[copy_index].frames[frame_index]
            used_generated = True
    return STSequence(
        frames=frames,
        raw_range=original.raw_range,
        source_id=original.source_id,
        kind=KIND_GENERATED if used_generated else KIND_ORIGINAL,
    )


BASELINE_KINDS = ("flip", "rotate", "crop")


def baseline_augment(sequence: STSequence, kind: str, seed: int = 0) -> STSequence:
    """Classical augmenters; one spatial transform shared by all frames."""
    frames = np.asarray(sequence.frames)
    if kind == "flip":
        out = frames[:, :, ::-1, :].copy()
    elif kind == "rotate":
        # 90/270 deg would transpose a non-square grid; restrict to 180 there.
        choices = (1, 2, 3) if frames.shape[1] == frames.shape[2] else (2,)
        rng = np.random.default_rng(seed)
        quarter_turns = int(choices[int(rng.integers(0, len(choices)))])
        out = np.ascontiguousarray(np.rot90(frames, quarter_turns, axes=(1, 2)))
    elif kind == "crop":
        t, h, w, c = frames.shape
        crop_h = math.ceil(0.8 * h)
        crop_w = math.ceil(0.8 * w)
        rng = np.random.default_rng(seed)
        r0 = int(rng.integers(0, h - crop_h + 1))
        c0 = int(rng.integers(0, w - crop_w + 1))
        window = frames[:, r0 : r0 + crop_h, c0 : c0 + crop_w, :]
        tensor = torch.from_numpy(np.ascontiguousarray(window, dtype=np.float32))
        tensor = tensor.permute(0, 3, 1, 2)
        resized = torch.nn.functional.interpolate(
            tensor, size=(h, w), mode="bilinear", align_corners=False
        )
        out = resized.permute(0, 2, 3, 1).clamp(-1.0, 1.0).numpy()
    else:
        raise UsageError(f"unknown augmentation kind {kind!r}, expected one of {BASELINE_KINDS}")
    return STSequence(
        frames=out,
        raw_range=sequence.raw_range,
        source_id=sequence.source_id,
        kind=KIND_GENERATED,
    )
