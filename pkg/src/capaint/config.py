"""Experiment configuration: JSON schema, validation, and stage content hashes.

Every pipeline stage output is addressed by a hash of the resolved
configuration it depends on, so re-running an unchanged stage is a no-op.
The output root comes from the config file and can be overridden with the
CAPAINT_OUT environment variable.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .decipher import ReconstructorConfig
from .diffusion import DenoiserConfig, linear_schedule
from .errors import ConfigurationError
from .predictor import BackboneConfig, ForecastTask
from .synthetic import ReactionDiffusionConfig

TRAIN_MODES = ("baseline", "capaint", "flip", "rotate", "crop")


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name)
    if not isinstance(value, dict):
        raise ConfigurationError(f"config is missing the {name!r} section")
    return value


def _pick(raw: dict, defaults: dict, section: str) -> dict:
    unknown = set(raw) - set(defaults)
    if unknown:
        raise ConfigurationError(f"unknown keys in {section!r} section: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(raw)
    return merged


@dataclass
class DatasetSection:
    kind: str = "reaction_diffusion"
    path: str | None = None
    num_sequences: int = 430
    rd_config: ReactionDiffusionConfig = field(default_factory=ReactionDiffusionConfig)
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    split_seed: int = 0
    name: str = "reaction_diffusion"


@dataclass
class ExperimentConfig:
    name: str
    out_root: Path
    dataset: DatasetSection
    causal_fraction: float
    reconstructor: ReconstructorConfig
    denoiser: DenoiserConfig
    diffusion_steps: int
    beta_start: float
    beta_end: float
    resample_count: int
    num_copies: int
    sample_prob: float
    augment_seed: int
    augment_workers: int
    task: ForecastTask
    backbone: BackboneConfig
    seeds: list[int]
    scarcity_fractions: list[float]
    raw: dict

    def section_hash(self, *names: str, extra: dict | None = None) -> str:
        payload = {name: self.raw.get(name) for name in names}
        if extra:
            payload["_extra"] = extra
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]

    @property
    def dataset_key(self) -> str:
        return self.section_hash("dataset")

    @property
    def decipher_key(self) -> str:
        return self.section_hash("dataset", "decipher")

    @property
    def diffusion_key(self) -> str:
        return self.section_hash("dataset", "diffusion")

    @property
    def repo_key(self) -> str:
        return self.section_hash("dataset", "decipher", "diffusion", "augment")

    def run_key(self, mode: str, seed: int, fraction: float = 1.0) -> str:
        extra = {"mode": mode, "seed": seed, "fraction": fraction}
        return self.section_hash(
            "dataset", "decipher", "diffusion", "augment", "task", "backbone", extra=extra
        )

    def stage_dir(self, stage: str, key: str) -> Path:
        return self.out_root / stage / key


DATASET_DEFAULTS = {
    "kind": "reaction_diffusion",
    "path": None,
    "name": "reaction_diffusion",
    "num_sequences": 430,
    "grid": [32, 32],
    "seq_len": 20,
    "steps": 40,
    "warmup": 600,
    "dt": 1.0,
    "diffusion_coeffs": [0.16, 0.08],
    "reaction_params": [0.06, 0.035],
    "reaction_rate": 1.0,
    "init_seed": 7,
    "split": [0.7, 0.15, 0.15],
    "split_seed": 0,
}

DECIPHER_DEFAULTS = {
    "causal_fraction": 0.75,
    "embed_dim": 64,
    "num_layers": 2,
    "num_heads": 4,
    "patch_size": 8,
    "mlp_ratio": 2.0,
    "learning_rate": 1e-3,
    "epochs": 8,
    "batch_size": 64,
    "seed": 0,
    "attention_source": "final",
    "scope": "frame",
}

DIFFUSION_DEFAULTS = {
    "num_steps": 200,
    "beta_start": 1e-4,
    "beta_end": 0.02,
    "base_channels": 32,
    "channel_mults": [1, 2],
    "time_dim": 32,
    "learning_rate": 2e-3,
    "epochs": 30,
    "batch_size": 32,
    "seed": 0,
    "resample_count": 1,
}

AUGMENT_DEFAULTS = {"num_copies": 1, "sample_prob": 0.5, "seed": 0, "workers": 1}

TASK_DEFAULTS = {"context_len": 10, "forecast_len": 10, "channels_in": 1, "channels_out": 1}

BACKBONE_DEFAULTS = {
    "hidden_dim": 24,
    "translator_dim": 64,
    "translator_depth": 4,
    "learning_rate": 0.004,
    "batch_size": 4,
    "epochs": 30,
}

TOP_LEVEL_KEYS = {
    "name",
    "out_dir",
    "dataset",
    "decipher",
    "diffusion",
    "augment",
    "task",
    "backbone",
    "seeds",
    "scarcity_fractions",
}


def load_config(path) -> ExperimentConfig:
    """Parse and fully validate a config file before any side effect."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except ValueError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a JSON object")
    unknown = set(raw) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigurationError(f"unknown top-level config keys: {sorted(unknown)}")

    ds = _pick(_section(raw, "dataset"), DATASET_DEFAULTS, "dataset")
    if ds["kind"] not in ("reaction_diffusion", "existing"):
        raise ConfigurationError(f"unknown dataset kind {ds['kind']!r}")
    if ds["kind"] == "existing":
        if not ds["path"]:
            raise ConfigurationError("dataset kind 'existing' requires a 'path'")
        if not (Path(ds["path"]) / "manifest.json").is_file():
            raise ConfigurationError(f"dataset path {ds['path']} has no manifest.json")
    rd_config = ReactionDiffusionConfig(
        grid=tuple(int(v) for v in ds["grid"]),
        seq_len=int(ds["seq_len"]),
        steps=int(ds["steps"]),
        warmup=int(ds["warmup"]),
        dt=float(ds["dt"]),
        diffusion_coeffs=tuple(float(v) for v in ds["diffusion_coeffs"]),
        reaction_params=tuple(float(v) for v in ds["reaction_params"]),
        reaction_rate=float(ds["reaction_rate"]),
        init_seed=int(ds["init_seed"]),
    )
    if ds["kind"] == "reaction_diffusion":
        rd_config.validate()
    dataset = DatasetSection(
        kind=ds["kind"],
        path=ds["path"],
        num_sequences=int(ds["num_sequences"]),
        rd_config=rd_config,
        split=tuple(float(f) for f in ds["split"]),
        split_seed=int(ds["split_seed"]),
        name=str(ds["name"]),
    )
    if abs(sum(dataset.split) - 1.0) > 1e-9:
        raise ConfigurationError(f"dataset split must sum to 1.0, got {dataset.split}")

    de = _pick(_section(raw, "decipher"), DECIPHER_DEFAULTS, "decipher")
    causal_fraction = float(de["causal_fraction"])
    if not 0.0 < causal_fraction < 1.0:
        raise ConfigurationError(f"causal_fraction must be in (0, 1), got {causal_fraction}")
    reconstructor = ReconstructorConfig(
        embed_dim=int(de["embed_dim"]),
        num_layers=int(de["num_layers"]),
        num_heads=int(de["num_heads"]),
        patch_size=int(de["patch_size"]),
        mlp_ratio=float(de["mlp_ratio"]),
        learning_rate=float(de["learning_rate"]),
        epochs=int(de["epochs"]),
        batch_size=int(de["batch_size"]),
        seed=int(de["seed"]),
        attention_source=str(de["attention_source"]),
        scope=str(de["scope"]),
    )
    reconstructor.validate()

    df = _pick(_section(raw, "diffusion"), DIFFUSION_DEFAULTS, "diffusion")
    denoiser = DenoiserConfig(
        in_channels=int(_pick(_section(raw, "task"), TASK_DEFAULTS, "task")["channels_in"]),
        base_channels=int(df["base_channels"]),
        channel_mults=tuple(int(m) for m in df["channel_mults"]),
        time_dim=int(df["time_dim"]),
        learning_rate=float(df["learning_rate"]),
        epochs=int(df["epochs"]),
        batch_size=int(df["batch_size"]),
        seed=int(df["seed"]),
    )
    denoiser.validate()
    linear_schedule(int(df["num_steps"]), float(df["beta_start"]), float(df["beta_end"]))
    resample_count = int(df["resample_count"])
    if resample_count < 1:
        raise ConfigurationError(f"resample_count must be >= 1, got {resample_count}")

    au = _pick(_section(raw, "augment"), AUGMENT_DEFAULTS, "augment")
    num_copies = int(au["num_copies"])
    sample_prob = float(au["sample_prob"])
    if num_copies < 0:
        raise ConfigurationError(f"num_copies must be >= 0, got {num_copies}")
    if not 0.0 <= sample_prob <= 1.0:
        raise ConfigurationError(f"sample_prob must be in [0, 1], got {sample_prob}")
    workers = int(au["workers"])
    if workers < 1:
        raise ConfigurationError(f"workers must be >= 1, got {workers}")

    ta = _pick(_section(raw, "task"), TASK_DEFAULTS, "task")
    task = ForecastTask(
        context_len=int(ta["context_len"]),
        forecast_len=int(ta["forecast_len"]),
        channels_in=int(ta["channels_in"]),
        channels_out=int(ta["channels_out"]),
    )
    task.validate()
    if dataset.kind == "reaction_diffusion":
        if task.context_len + task.forecast_len > rd_config.seq_len:
            raise ConfigurationError(
                f"task needs {task.context_len + task.forecast_len} frames but "
                f"sequences have {rd_config.seq_len}"
            )

    bb = _pick(_section(raw, "backbone"), BACKBONE_DEFAULTS, "backbone")
    backbone = BackboneConfig(
        hidden_dim=int(bb["hidden_dim"]),
        translator_dim=int(bb["translator_dim"]),
        translator_depth=int(bb["translator_depth"]),
        learning_rate=float(bb["learning_rate"]),
        batch_size=int(bb["batch_size"]),
        epochs=int(bb["epochs"]),
    )
    backbone.validate()

    seeds = [int(s) for s in raw.get("seeds", [0, 1, 2])]
    if not seeds:
        raise ConfigurationError("seeds must be a non-empty list")
    fractions = [float(f) for f in raw.get("scarcity_fractions", [0.1, 0.5, 1.0])]
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ConfigurationError(f"scarcity fractions must lie in (0, 1], got {fractions}")

    out_root = Path(os.environ.get("CAPAINT_OUT") or raw.get("out_dir") or "capaint_out")

    # Hashing sees the fully resolved sections so default changes invalidate stages.
    resolved = {
        "name": raw.get("name", "experiment"),
        "dataset": ds,
        "decipher": de,
        "diffusion": df,
        "augment": au,
        "task": ta,
        "backbone": bb,
        "seeds": seeds,
        "scarcity_fractions": fractions,
    }
    return ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        out_root=out_root,
        dataset=dataset,
        causal_fraction=causal_fraction,
        reconstructor=reconstructor,
        denoiser=denoiser,
        diffusion_steps=int(df["num_steps"]),
        beta_start=float(df["beta_start"]),
        beta_end=float(df["beta_end"]),
        resample_count=resample_count,
        num_copies=num_copies,
        sample_prob=sample_prob,
        augment_seed=int(au["seed"]),
        augment_workers=workers,
        task=task,
        backbone=backbone,
        seeds=seeds,
        scarcity_fractions=fractions,
        raw=resolved,
    )
