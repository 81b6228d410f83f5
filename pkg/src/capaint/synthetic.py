"""Synthetic reaction-diffusion sequence generator (two-species Gray-Scott).

Explicit Euler on a periodic grid:

    dU/dt = D_u lap(U) - g*U*V^2 + f*(1 - U)
    dV/dt = D_v lap(V) + g*U*V^2 - (f + k)*V

with (k, f) the kill/feed rates and g an overall reaction gain so the
reaction can be switched off entirely (g = f = k = 0 freezes the fields
up to diffusion). The V field is recorded as a single-channel sequence.
"""

import math
from dataclasses import dataclass

import numpy as np

from .dataset import DatasetManifest, STSequence, normalize, save_dataset
from .errors import ConfigurationError, NumericError
from .seeding import derive_seed


@dataclass
class ReactionDiffusionConfig:
    grid: tuple[int, int] = (32, 32)
    seq_len: int = 20
    steps: int = 40
    warmup: int = 600
    dt: float = 1.0
    diffusion_coeffs: tuple[float, float] = (0.16, 0.08)
    reaction_params: tuple[float, float] = (0.060, 0.035)
    reaction_rate: float = 1.0
    init_seed: int = 0

    def stability_bound(self) -> float:
        """Explicit-Euler diffusion stability limit dx^2 / (4 * max(D)) with dx = 1."""
        d_max = max(self.diffusion_coeffs)
        if d_max <= 0:
            return math.inf
        return 1.0 / (4.0 * d_max)

    def validate(self) -> None:
        h, w = self.grid
        if h < 1 or w < 1:
            raise ConfigurationError(f"grid must be positive, got {self.grid}")
        if self.seq_len < 1 or self.steps < 1 or self.warmup < 0:
            raise ConfigurationError("seq_len/steps must be >= 1 and warmup >= 0")
        if self.dt <= 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if any(d < 0 for d in self.diffusion_coeffs):
            raise ConfigurationError(f"diffusion coefficients must be >= 0, got {self.diffusion_coeffs}")
        if any(r < 0 for r in self.reaction_params) or self.reaction_rate < 0:
            raise ConfigurationError("reaction parameters must be >= 0")
        bound = self.stability_bound()
        if self.dt > bound:
            raise ConfigurationError(
                f"unstable dt {self.dt}: explicit integration requires dt <= {bound:.6g} "
                f"for diffusion coefficients {self.diffusion_coeffs}"
            )


def _laplacian(z: np.ndarray) -> np.ndarray:
    return (
        -4.0 * z
        + np.roll(z, 1, axis=0)
        + np.roll(z, -1, axis=0)
        + np.roll(z, 1, axis=1)
        + np.roll(z, -1, axis=1)
    )


def _step(u, v, config: ReactionDiffusionConfig):
    d_u, d_v = config.diffusion_coeffs
    kill, feed = config.reaction_params
    gain = config.reaction_rate
    uvv = gain * u * v * v
    du = d_u * _laplacian(u) - uvv + feed * (1.0 - u)
    dv = d_v * _laplacian(v) + uvv - (feed + kill) * v
    u = u + config.dt * du
    v = v + config.dt * dv
    np.clip(u, 0.0, 1.0, out=u)
    np.clip(v, 0.0, 1.0, out=v)
    return u, v


def simulate_sequence(config: ReactionDiffusionConfig, seed: int) -> np.ndarray:
    """Integrate one seeded run; returns raw (unnormalized) frames [T, H, W, 1]."""
    rng = np.random.default_rng(seed)
    h, w = config.grid
    u = np.ones((h, w), dtype=np.float32)
    v = np.zeros((h, w), dtype=np.float32)
    u += (rng.random((h, w), dtype=np.float32) - 0.5) * 0.02
    for _ in range(int(rng.integers(1, 4))):
        size = int(rng.integers(3, max(4, min(h, w) // 4)))
        r0 = int(rng.integers(0, h - size))
        c0 = int(rng.integers(0, w - size))
        v[r0 : r0 + size, c0 : c0 + size] = 0.5
        u[r0 : r0 + size, c0 : c0 + size] = 0.5
    np.clip(u, 0.0, 1.0, out=u)
    np.clip(v, 0.0, 1.0, out=v)

    for _ in range(config.warmup):
        u, v = _step(u, v, config)
    frames = [v.copy()]
    for _ in range(config.seq_len - 1):
        for _ in range(config.steps):
            u, v = _step(u, v, config)
        frames.append(v.copy())
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise NumericError(f"reaction-diffusion run (seed {seed}) produced non-finite fields")
    return np.stack(frames, axis=0)[..., None]


def generate_reaction_diffusion(
    config: ReactionDiffusionConfig,
    num_sequences: int,
    out_dir,
    name: str = "reaction_diffusion",
    split: tuple[float, float, float] = (0.7, 0.15, 0.15),
    split_seed: int = 0,
) -> DatasetManifest:
    """Generate, normalize, and persist a seeded synthetic dataset."""
    config.validate()
    if num_sequences < 1:
        raise ConfigurationError(f"num_sequences must be >= 1, got {num_sequences}")

    raw = [
        simulate_sequence(config, derive_seed(config.init_seed, index))
        for index in range(num_sequences)
    ]
    lo = min(float(r.min()) for r in raw)
    hi = max(float(r.max()) for r in raw)
    if hi - lo < 1e-12:
        hi = lo + 1.0  # degenerate constant dataset; keep normalize well-defined
    raw_range = (lo, hi)

    ids = [f"rd{index:04d}" for index in range(num_sequences)]
    manifest = DatasetManifest(
        name=name,
        num_sequences=num_sequences,
        shape=(config.seq_len, config.grid[0], config.grid[1], 1),
        normalization=raw_range,
        split=split,
        seed=split_seed,
        sequence_ids=ids,
    )
    sequences = [
        STSequence(frames=normalize(frames, raw_range), raw_range=raw_range, source_id=sid)
        for sid, frames in zip(ids, raw)
    ]
    save_dataset(out_dir, manifest, sequences)
    return manifest
