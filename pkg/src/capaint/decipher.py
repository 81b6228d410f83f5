"""Self-supervised patch reconstructor and attention-based causal partitioning.

A small pre-norm vision transformer autoencodes each frame from its own
patch tokens (no class token). Per-patch importance is the softmax of
attention-map column sums aggregated over heads; the top ceil(N * eps)
patches by importance form the causal set, the rest are environmental.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Dataset
from .errors import (
    ConfigurationError,
    DataIntegrityError,
    NumericError,
    TrainingError,
    UsageError,
)
from .patches import PatchPartitionGeometry, patchify
from .seeding import derive_seed


@dataclass
class ReconstructorConfig:
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    patch_size: int = 8
    mlp_ratio: float = 2.0
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    attention_source: str = "final"  # or "mean": average maps over layers
    scope: str = "frame"  # or "sequence": one partition per sequence

    def validate(self) -> None:
        if self.embed_dim < 1 or self.num_layers < 1 or self.num_heads < 1:
            raise ConfigurationError("embed_dim/num_layers/num_heads must be >= 1")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.patch_size < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("patch_size/epochs/batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.attention_source not in ("final", "mean"):
            raise ConfigurationError(f"unknown attention_source {self.attention_source!r}")
        if self.scope not in ("frame", "sequence"):
            raise ConfigurationError(f"unknown scope {self.scope!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class AttentionRecord:
    """Per-head row-stochastic attention maps [num_heads, N, N] of one layer."""

    maps: np.ndarray

    def validate(self) -> None:
        if self.maps.ndim != 3 or self.maps.shape[1] != self.maps.shape[2]:
            raise ConfigurationError(f"maps must be [heads, N, N], got {self.maps.shape}")
        if (self.maps < 0).any():
            raise NumericError("attention maps contain negative entries")
        row_sums = self.maps.sum(axis=2)
        if np.abs(row_sums - 1.0).max() > 1e-5:
            raise NumericError("attention rows do not sum to 1 within 1e-5")


@dataclass
class ImportanceScores:
    """Softmax-normalized per-patch importance vector of length N."""

    scores: np.ndarray

    def validate(self) -> None:
        if self.scores.ndim != 1:
            raise ConfigurationError(f"scores must be a vector, got shape {self.scores.shape}")
        if abs(float(self.scores.sum()) - 1.0) > 1e-6:
            raise NumericError("importance scores do not sum to 1 within 1e-6")
        if (self.scores <= 0).any():
            raise NumericError("importance scores must be strictly positive")


@dataclass
class CausalPartition:
    """Disjoint causal/environmental patch index sets for one frame."""

    causal: list[int]
    environmental: list[int]
    causal_fraction: float
    frame_index: int = 0
    scores: np.ndarray | None = field(default=None, repr=False)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MSA(LN(x)) followed by x + MLP(LN(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigurationError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor):
        """Input [B, N, dim]; returns (output, attention [B, heads, N, N])."""
        b, n, _ = x.shape
        h = self.norm1(x)
        qkv = self.qkv(h).reshape(b, n, 3, self.num_heads, self.head_dim)
        qkv = qkv.permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, self.dim)
        x = x + self.proj(out)
        x = x + self.fc2(self.act(self.fc1(self.norm2(x))))
        return x, attn


def transformer_block(block: TransformerBlock, tokens: torch.Tensor):
    """Apply one block to an unbatched [N, dim] token matrix.

    Returns (tokens_out [N, dim], attention [heads, N, N]).
    """
    if tokens.ndim != 2:
        raise ConfigurationError(f"tokens must be [N, dim], got shape {tuple(tokens.shape)}")
    if not torch.isfinite(tokens).all():
        raise NumericError("non-finite token matrix")
    out, attn = block(tokens.unsqueeze(0))
    return out.squeeze(0), attn.squeeze(0)


class FrameReconstructor(nn.Module):
    """Patch-token autoencoder whose attention maps drive causal scoring."""

    def __init__(self, geometry: PatchPartitionGeometry, config: ReconstructorConfig):
        super().__init__()
        config.validate()
        if geometry.patch_size != config.patch_size:
            raise ConfigurationError(
                f"geometry patch_size {geometry.patch_size} != config {config.patch_size}"
            )
        self.geometry = geometry
        self.config = config
        n, d = geometry.num_patches, config.embed_dim
        self.embed = nn.Linear(geometry.patch_dim, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, n, d))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, config.num_heads, config.mlp_ratio)
            for _ in range(config.num_layers)
        )
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, geometry.patch_dim)

    def forward(self, patch_rows: torch.Tensor, collect_attention: bool = False,
                check_finite: bool = False):
        """patch_rows [B, N, patch_dim] -> (reconstruction, per-layer attentions)."""
        x = self.embed(patch_rows) + self.pos_embed
        attentions = []
        for index, block in enumerate(self.blocks):
            x, attn = block(x)
            if check_finite and not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after transformer layer {index}")
            if collect_attention:
                attentions.append(attn)
        return self.head(self.norm(x)), attentions


def _frames_to_patch_rows(frames: np.ndarray, geometry: PatchPartitionGeometry) -> np.ndarray:
    return np.stack([patchify(frame, geometry) for frame in frames]).astype(np.float32)


def train_reconstructor(frames: np.ndarray, config: ReconstructorConfig):
    """Fit the reconstructor on [M, H, W, C] frames; returns (model, history).

    history carries the probe-batch loss at initialization and after each
    epoch; training is deterministic under config.seed.
    """
    config.validate()
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise ConfigurationError(f"expected non-empty [M, H, W, C] frames, got {frames.shape}")
    _, h, w, c = frames.shape
    geometry = PatchPartitionGeometry(h, w, c, config.patch_size)
    rows = torch.from_numpy(_frames_to_patch_rows(frames, geometry))

    torch.manual_seed(config.seed)
    model = FrameReconstructor(geometry, config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    shuffler = torch.Generator().manual_seed(derive_seed(config.seed, "shuffle"))

    probe = rows[: min(64, rows.shape[0])]

    def probe_loss() -> float:
        model.eval()
        with torch.no_grad():
            recon, _ = model(probe)
            return float(torch.mean((recon - probe) ** 2))

    history = {"probe_loss": [probe_loss()], "train_loss": []}
    m = rows.shape[0]
    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(m, generator=shuffler)
        total, count = 0.0, 0
        for start in range(0, m, config.batch_size):
            batch = rows[order[start : start + config.batch_size]]
            recon, _ = model(batch)
            loss = torch.mean((recon - batch) ** 2)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"reconstruction loss diverged at epoch {epoch}; "
                    f"last finite epoch {epoch - 1}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * batch.shape[0]
            count += batch.shape[0]
        history["train_loss"].append(total / count)
        history["probe_loss"].append(probe_loss())
    model.eval()
    return model, history


def reconstruction_loss(model: FrameReconstructor, patch_rows: torch.Tensor) -> torch.Tensor:
    """Differentiable mean squared reconstruction error on [B, N, patch_dim] rows."""
    recon, _ = model(patch_rows)
    return torch.mean((recon - patch_rows) ** 2)


def attention_maps(model: FrameReconstructor, frame: np.ndarray) -> list[AttentionRecord]:
    """Per-layer attention records for one [H, W, C] frame."""
    rows = torch.from_numpy(
        patchify(np.asarray(frame, dtype=np.float32), model.geometry)[None]
    )
    model.eval()
    with torch.no_grad():
        _, attentions = model(rows, collect_attention=True, check_finite=True)
    records = []
    for index, attn in enumerate(attentions):
        maps = attn.squeeze(0).numpy().astype(np.float64)
        if not np.isfinite(maps).all():
            raise NumericError(f"non-finite attention map at layer {index}")
        record = AttentionRecord(maps=maps)
        record.validate()
        records.append(record)
    return records


def scoring_record(records: list[AttentionRecord], source: str = "final") -> AttentionRecord:
    """Pick the record fed to Eq.-style scoring: final layer or layer mean."""
    if not records:
        raise UsageError("no attention records")
    if source == "final":
        return records[-1]
    if source == "mean":
        return AttentionRecord(maps=np.mean([r.maps for r in records], axis=0))
    raise ConfigurationError(f"unknown attention source {source!r}")


def importance_scores(record: AttentionRecord) -> ImportanceScores:
    """Column sums per head, summed over heads, softmax over patches."""
    record.validate()
    column_sums = record.maps.sum(axis=(0, 1))  # sum over heads and rows
    shifted = column_sums - column_sums.max()
    exp = np.exp(shifted)
    scores = ImportanceScores(scores=exp / exp.sum())
    scores.validate()
    return scores


def causal_count(num_patches: int, causal_fraction: float) -> int:
    """ceil(N * eps) with a nudge against float noise on exact integers."""
    return int(math.ceil(num_patches * causal_fraction - 1e-9))


def partition(
    scores: ImportanceScores, causal_fraction: float, frame_index: int = 0
) -> CausalPartition:
    """Top-ceil(N*eps) patches by score are causal; ties break to lower index."""
    if not 0.0 < causal_fraction < 1.0:
        raise ConfigurationError(f"causal_fraction must be in (0, 1), got {causal_fraction}")
    scores.validate()
    n = scores.scores.shape[0]
    k = causal_count(n, causal_fraction)
    order = np.argsort(-scores.scores, kind="stable")
    causal = sorted(int(i) for i in order[:k])
    environmental = sorted(int(i) for i in order[k:])
    return CausalPartition(
        causal=causal,
        environmental=environmental,
        causal_fraction=causal_fraction,
        frame_index=frame_index,
        scores=scores.scores,
    )


class PartitionStore:
    """Per-sequence partition files: scores and environmental indices per frame."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, source_id: str) -> Path:
        return self.root / f"partition_{source_id}.json"

    def save(self, source_id: str, partitions: list[CausalPartition],
             patch_size: int, num_patches: int) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        payload = {
            "source_id": source_id,
            "causal_fraction": partitions[0].causal_fraction,
            "patch_size": patch_size,
            "num_patches": num_patches,
            "frames": [
                {
                    "scores": [float(s) for s in part.scores],
                    "environmental": list(part.environmental),
                }
                for part in partitions
            ],
        }
        self.path(source_id).write_text(json.dumps(payload, indent=2))

    def load(self, source_id: str) -> list[CausalPartition]:
        path = self.path(source_id)
        if not path.is_file():
            raise ConfigurationError(f"missing partition file for sequence {source_id!r}")
        raw = json.loads(path.read_text())
        n = int(raw["num_patches"])
        eps = float(raw["causal_fraction"])
        partitions = []
        for index, entry in enumerate(raw["frames"]):
            env = [int(i) for i in entry["environmental"]]
            causal = sorted(set(range(n)) - set(env))
            partitions.append(
                CausalPartition(
                    causal=causal,
                    environmental=sorted(env),
                    causal_fraction=eps,
                    frame_index=index,
                    scores=np.asarray(entry["scores"], dtype=np.float64),
                )
            )
        return partitions

    def metadata(self, source_id: str) -> dict:
        raw = json.loads(self.path(source_id).read_text())
        return {"patch_size": int(raw["patch_size"]), "num_patches": int(raw["num_patches"])}


def save_reconstructor(model: FrameReconstructor, path) -> None:
    arrays = {name: tensor.numpy() for name, tensor in model.state_dict().items()}
    geometry = model.geometry
    meta = {
        "geometry": {
            "height": geometry.height,
            "width": geometry.width,
            "channels": geometry.channels,
            "patch_size": geometry.patch_size,
        },
        "config": {
            "embed_dim": model.config.embed_dim,
            "num_layers": model.config.num_layers,
            "num_heads": model.config.num_heads,
            "patch_size": model.config.patch_size,
            "mlp_ratio": model.config.mlp_ratio,
            "learning_rate": model.config.learning_rate,
            "epochs": model.config.epochs,
            "batch_size": model.config.batch_size,
            "seed": model.config.seed,
            "attention_source": model.config.attention_source,
            "scope": model.config.scope,
        },
    }
    save_checkpoint(path, "reconstructor", meta, arrays)


def load_reconstructor(path) -> FrameReconstructor:
    kind, meta, arrays = load_checkpoint(path)
    if kind != "reconstructor":
        raise DataIntegrityError(f"{path}: expected a reconstructor checkpoint, got {kind!r}")
    geo = meta["geometry"]
    geometry = PatchPartitionGeometry(
        int(geo["height"]), int(geo["width"]), int(geo["channels"]), int(geo["patch_size"])
    )
    cfg = meta["config"]
    config = ReconstructorConfig(
        embed_dim=int(cfg["embed_dim"]),
        num_layers=int(cfg["num_layers"]),
        num_heads=int(cfg["num_heads"]),
        patch_size=int(cfg["patch_size"]),
        mlp_ratio=float(cfg["mlp_ratio"]),
        learning_rate=float(cfg["learning_rate"]),
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        seed=int(cfg["seed"]),
        attention_source=str(cfg["attention_source"]),
        scope=str(cfg["scope"]),
    )
    model = FrameReconstructor(geometry, config)
    model.load_state_dict({name: torch.from_numpy(arr) for name, arr in arrays.items()})
    model.eval()
    return model


def decipher_dataset(
    model: FrameReconstructor,
    dataset: Dataset,
    causal_fraction: float,
    out_dir,
    source_ids: list[str] | None = None,
) -> PartitionStore:
    """Partition every frame of the listed sequences; persists one JSON each."""
    config = model.config
    store = PartitionStore(out_dir)
    ids = source_ids if source_ids is not None else dataset.ids
    for source_id in ids:
        sequence = dataset.load(source_id)
        per_frame = []
        for frame_index, frame in enumerate(sequence.frames):
            records = attention_maps(model, frame)
            scores = importance_scores(scoring_record(records, config.attention_source))
            per_frame.append(scores)
        if config.scope == "sequence":
            mean_scores = ImportanceScores(
                scores=np.mean([s.scores for s in per_frame], axis=0)
            )
            shared = partition(mean_scores, causal_fraction)
            partitions = [
                CausalPartition(
                    causal=shared.causal,
                    environmental=shared.environmental,
                    causal_fraction=causal_fraction,
                    frame_index=i,
                    scores=mean_scores.scores,
                )
                for i in range(len(per_frame))
            ]
        else:
            partitions = [
                partition(scores, causal_fraction, frame_index=i)
                for i, scores in enumerate(per_frame)
            ]
        store.save(
            source_id,
            partitions,
            patch_size=model.geometry.patch_size,
            num_patches=model.geometry.num_patches,
        )
    return store
