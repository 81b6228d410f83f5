"""DDPM noise schedule, denoiser training, and mask-merged inpainting.

Reverse-process variance is fixed at sigma_t^2 = beta_t. The known/causal
branch samples the forward marginal at step t-1 (alpha_bar_0 = 1, so the
final step returns the original exactly); the environmental branch is one
reverse denoising step. When resample_count > 1 each merged step is
re-noised via X_t ~ N(sqrt(1 - beta_{t-1}) X_{t-1}, beta_{t-1} I) and the
step repeats (skipped at t = 1 where re-noising is undefined and the
iteration is idempotent).

Noise-draw order inside `inpaint` (frozen; reference implementations must
mirror it): one draw for X_T, then per (t, u) iteration one draw for the
causal branch, one draw for z when t > 1, and one draw when re-noising.
"""

import math
import threading
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import KIND_GENERATED, STSequence
from .errors import (
    ConfigurationError,
    DataIntegrityError,
    DimensionError,
    NumericError,
    TrainingError,
    UsageError,
)
from .patches import PatchPartitionGeometry, mask_from_partition
from .seeding import derive_seed


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha tables for a T-step diffusion, 1-based step indexing."""

    betas: np.ndarray  # float64, betas[i] = beta_{i+1}
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def num_steps(self) -> int:
        return int(self.betas.shape[0])

    def validate(self) -> None:
        if self.betas.ndim != 1 or self.num_steps < 1:
            raise ConfigurationError("schedule needs at least one step")
        if (self.betas <= 0).any() or (self.betas >= 1).any():
            raise ConfigurationError("betas must lie strictly in (0, 1)")
        if (np.diff(self.betas) < 0).any():
            raise ConfigurationError("betas must be non-decreasing")
        if not np.allclose(self.alphas, 1.0 - self.betas, rtol=0, atol=0):
            raise ConfigurationError("alphas inconsistent with betas")
        cumulative = np.cumprod(self.alphas)
        rel = np.abs(self.alpha_bars - cumulative) / cumulative
        if rel.max() > 1e-12:
            raise ConfigurationError("alpha_bars deviate from the running product")
        if (np.diff(self.alpha_bars) >= 0).any():
            raise ConfigurationError("alpha_bars must be strictly decreasing")
        if not np.allclose(self.sigmas**2, self.betas, rtol=1e-12, atol=0):
            raise ConfigurationError("sigma_t^2 must equal beta_t")

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise IndexError(f"step {t} out of range [1, {self.num_steps}]")

    def beta(self, t: int) -> float:
        self._check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_step(t)
        return float(self.alpha_bars[t - 1])

    def sigma(self, t: int) -> float:
        self._check_step(t)
        return float(self.sigmas[t - 1])


def linear_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Inclusive linearly spaced betas and their derived tables."""
    if num_steps < 1:
        raise ConfigurationError(f"num_steps must be >= 1, got {num_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    schedule = NoiseSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=np.cumprod(alphas),
        sigmas=np.sqrt(betas),
    )
    schedule.validate()
    return schedule


def q_sample(x0, t: int, schedule: NoiseSchedule, noise):
    """Forward marginal: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    schedule._check_step(t)
    abar = schedule.alpha_bar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * noise


def known_region_sample(x0, t: int, schedule: NoiseSchedule, noise):
    """Causal branch: forward marginal at t-1 (abar_0 = 1 returns x0 exactly)."""
    schedule._check_step(t)
    abar_prev = schedule.alpha_bar(t - 1)
    return math.sqrt(abar_prev) * x0 + math.sqrt(1.0 - abar_prev) * noise


def p_sample(model, x_t, t: int, schedule, z_noise):
    """One reverse step; the z term is dropped at t == 1."""
    schedule._check_step(t)
    eps = model.predict_noise(x_t, t)
    coef = schedule.beta(t) / math.sqrt(1.0 - schedule.alpha_bar(t))
    out = (1.0 / math.sqrt(schedule.alpha(t))) * (x_t - coef * eps)
    if t > 1 and z_noise is not None:
        out = out + schedule.sigma(t) * z_noise
    return out


def _broadcast_mask(mask, like):
    """Expand a [..., H, W] mask over the trailing channel axis of `like`."""
    if mask.shape == like.shape:
        return mask
    if tuple(mask.shape) == tuple(like.shape[:-1]):
        return mask[..., None]
    raise DimensionError(f"mask shape {tuple(mask.shape)} incompatible with {tuple(like.shape)}")


def merge(mask, x_cau, x_env):
    """Elementwise select: causal pixels from x_cau, environmental from x_env."""
    if x_cau.shape != x_env.shape:
        raise DimensionError(f"branch shapes differ: {x_cau.shape} vs {x_env.shape}")
    if isinstance(x_cau, torch.Tensor):
        m = _broadcast_mask(mask, x_cau)
        return torch.where(m > 0.5, x_cau, x_env)
    x_cau = np.asarray(x_cau)
    x_env = np.asarray(x_env)
    m = _broadcast_mask(np.asarray(mask), x_cau)
    return np.where(m > 0.5, x_cau, x_env)


class _CallCounter:
    """Thread-safe counter of frame-level inpaint invocations."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n: int) -> None:
        with self._lock:
            self._count += n

    def value(self) -> int:
        with self._lock:
            return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0


_INPAINT_CALLS = _CallCounter()


def inpaint_call_count() -> int:
    return _INPAINT_CALLS.value()


def reset_inpaint_call_count() -> None:
    _INPAINT_CALLS.reset()


@dataclass
class InpaintParams:
    schedule: NoiseSchedule
    resample_count: int = 1
    seed: int = 0

    def validate(self) -> None:
        if int(self.resample_count) != self.resample_count or self.resample_count < 1:
            raise ConfigurationError(
                f"resample_count must be an integer >= 1, got {self.resample_count}"
            )


def _sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    ).to(t.dtype)
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


def _group_norm(channels: int) -> nn.GroupNorm:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = _group_norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(time_dim, c_out)
        self.norm2 = _group_norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass
class DenoiserConfig:
    in_channels: int = 1
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    time_dim: int = 32
    learning_rate: float = 2e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.in_channels < 1 or self.base_channels < 1 or self.time_dim < 2:
            raise ConfigurationError("in_channels/base_channels/time_dim too small")
        if not self.channel_mults or any(m < 1 for m in self.channel_mults):
            raise ConfigurationError(f"bad channel_mults {self.channel_mults}")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("bad training hyperparameters")


class DenoiserNet(nn.Module):
    """Small U-shaped conv net with sinusoidal step embedding."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = [config.base_channels * m for m in config.channel_mults]
        td = config.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.stem = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        prev = widths[0]
        for level, width in enumerate(widths):
            self.down_blocks.append(_ResBlock(prev, width, td))
            prev = width
            if level < len(widths) - 1:
                self.downsamplers.append(nn.Conv2d(width, width, 3, stride=2, padding=1))
        self.mid = _ResBlock(prev, prev, td)
        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for level in reversed(range(len(widths) - 1)):
            self.upsamplers.append(nn.Conv2d(prev, prev, 3, padding=1))
            self.up_blocks.append(_ResBlock(prev + widths[level], widths[level], td))
            prev = widths[level]
        self.out_norm = _group_norm(prev)
        self.out_conv = nn.Conv2d(prev, config.in_channels, 3, padding=1)

    @property
    def num_levels(self) -> int:
        return len(self.config.channel_mults)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """x: [B, C, H, W]; t: [B] step indices (1-based)."""
        temb = self.time_mlp(_sinusoidal_embedding(t.to(x.dtype), self.config.time_dim))
        h = self.stem(x)
        skips = []
        for level, block in enumerate(self.down_blocks):
            h = block(h, temb)
            if level < len(self.down_blocks) - 1:
                skips.append(h)
                h = self.downsamplers[level](h)
        h = self.mid(h, temb)
        for up, block in zip(self.upsamplers, self.up_blocks):
            h = up(torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(h)))


class DenoiserModel:
    """Noise predictor plus its schedule, with a trained flag gating inpainting."""

    def __init__(self, net: DenoiserNet, schedule: NoiseSchedule, config: DenoiserConfig,
                 trained: bool = False, steps_trained: int = 0):
        self.net = net
        self.schedule = schedule
        self.config = config
        self.trained = trained
        self.steps_trained = steps_trained

    def predict_noise(self, x: torch.Tensor, t: int) -> torch.Tensor:
        """x: [B, C, H, W] torch tensor, one shared step index."""
        with torch.no_grad():
            tt = torch.full((x.shape[0],), float(t), dtype=x.dtype)
            return self.net(x, tt)

    def predict_noise_frame(self, frame: np.ndarray, t: int) -> np.ndarray:
        """Frame-level [H, W, C] convenience wrapper."""
        x = torch.from_numpy(np.asarray(frame, dtype=np.float32)).permute(2, 0, 1)[None]
        out = self.predict_noise(x, t)
        return out[0].permute(1, 2, 0).numpy()


def denoising_loss(net: DenoiserNet, x0: torch.Tensor, t: torch.Tensor,
                   noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Squared error between injected and predicted noise at per-sample steps."""
    idx = (t.long() - 1).clamp(0, schedule.num_steps - 1)
    sqrt_ab = torch.from_numpy(np.sqrt(schedule.alpha_bars)).to(x0.dtype)[idx]
    sqrt_1mab = torch.from_numpy(np.sqrt(1.0 - schedule.alpha_bars)).to(x0.dtype)[idx]
    x_t = sqrt_ab[:, None, None, None] * x0 + sqrt_1mab[:, None, None, None] * noise
    return torch.mean((noise - net(x_t, t.to(x0.dtype))) ** 2)


def _frames_to_bchw(frames: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(frames, dtype=np.float32)).permute(0, 3, 1, 2)


def train_denoiser(frames: np.ndarray, schedule: NoiseSchedule, config: DenoiserConfig):
    """Fit the noise predictor on all [M, H, W, C] frames; returns (model, history)."""
    config.validate()
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise ConfigurationError(f"expected non-empty [M, H, W, C] frames, got {frames.shape}")
    if frames.min() < -1.0 - 1e-6 or frames.max() > 1.0 + 1e-6:
        raise ConfigurationError("training frames must be normalized to [-1, 1]")
    _, h, w, c = frames.shape
    if c != config.in_channels:
        raise ConfigurationError(f"frames have {c} channels, config expects {config.in_channels}")
    factor = 2 ** (len(config.channel_mults) - 1)
    if h % factor or w % factor:
        raise ConfigurationError(
            f"frame size {h}x{w} not divisible by the downsampling factor {factor}"
        )

    data = _frames_to_bchw(frames)
    torch.manual_seed(config.seed)
    net = DenoiserNet(config)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "denoiser"))

    m = data.shape[0]
    probe_x = data[: min(64, m)]
    probe_t = torch.randint(1, schedule.num_steps + 1, (probe_x.shape[0],), generator=gen)
    probe_eps = torch.randn(probe_x.shape, generator=gen)

    def probe_loss() -> float:
        net.eval()
        with torch.no_grad():
            return float(denoising_loss(net, probe_x, probe_t, probe_eps, schedule))

    history = {"probe_loss": [probe_loss()], "train_loss": []}
    steps = 0
    for epoch in range(config.epochs):
        net.train()
        order = torch.randperm(m, generator=gen)
        total, count = 0.0, 0
        for start in range(0, m, config.batch_size):
            batch = data[order[start : start + config.batch_size]]
            t = torch.randint(1, schedule.num_steps + 1, (batch.shape[0],), generator=gen)
            eps = torch.randn(batch.shape, generator=gen)
            loss = denoising_loss(net, batch, t, eps, schedule)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"denoiser loss diverged at epoch {epoch}; last finite epoch {epoch - 1}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            steps += 1
            total += float(loss) * batch.shape[0]
            count += batch.shape[0]
        history["train_loss"].append(total / count)
        history["probe_loss"].append(probe_loss())
    net.eval()
    return DenoiserModel(net, schedule, config, trained=True, steps_trained=steps), history


def _stacked_randn(shape_chw, generators: list[torch.Generator]) -> torch.Tensor:
    return torch.stack([torch.randn(shape_chw, generator=g) for g in generators])


def _inpaint_core(
    model,
    x0: torch.Tensor,
    mask: torch.Tensor,
    schedule: NoiseSchedule,
    resample_count: int,
    generators: list[torch.Generator],
) -> torch.Tensor:
    """Shared reverse loop on [B, C, H, W] tensors with per-sample generators."""
    shape_chw = x0.shape[1:]
    x_t = _stacked_randn(shape_chw, generators)
    for t in range(schedule.num_steps, 0, -1):
        beta_t = schedule.beta(t)
        inv_sqrt_alpha = 1.0 / math.sqrt(schedule.alpha(t))
        eps_coef = beta_t / math.sqrt(1.0 - schedule.alpha_bar(t))
        sigma_t = schedule.sigma(t)
        sqrt_ab_prev = math.sqrt(schedule.alpha_bar(t - 1))
        sqrt_1mab_prev = math.sqrt(1.0 - schedule.alpha_bar(t - 1))
        reps = resample_count if t > 1 else 1
        for rep in range(reps):
            eps = _stacked_randn(shape_chw, generators)
            x_cau = sqrt_ab_prev * x0 + sqrt_1mab_prev * eps
            eps_pred = model.predict_noise(x_t, t)
            x_env = inv_sqrt_alpha * (x_t - eps_coef * eps_pred)
            if t > 1:
                z = _stacked_randn(shape_chw, generators)
                x_env = x_env + sigma_t * z
            x_prev = merge(mask, x_cau, x_env)
            if rep < reps - 1:
                beta_prev = schedule.beta(t - 1)
                renoise = _stacked_randn(shape_chw, generators)
                x_t = math.sqrt(1.0 - beta_prev) * x_prev + math.sqrt(beta_prev) * renoise
            else:
                x_t = x_prev
        if not torch.isfinite(x_t).all():
            raise NumericError(f"non-finite intermediate at diffusion step {t}")
    return x_t


def _validate_frame_inputs(x0: np.ndarray, mask: np.ndarray) -> None:
    if x0.ndim != 3:
        raise DimensionError(f"frame must be [H, W, C], got shape {x0.shape}")
    if mask.shape != x0.shape[:2]:
        raise DimensionError(f"mask shape {mask.shape} != frame spatial shape {x0.shape[:2]}")
    if not np.isin(mask, (0, 1)).all():
        raise DimensionError("mask entries must be exactly 0 or 1")
    if not np.isfinite(x0).all():
        raise NumericError("frame contains non-finite values")
    if x0.min() < -1.0 - 1e-6 or x0.max() > 1.0 + 1e-6:
        raise UsageError("frame must be normalized to [-1, 1] before inpainting")


def inpaint(model, x0: np.ndarray, mask: np.ndarray, params: InpaintParams) -> np.ndarray:
    """Regenerate the mask==0 region of one [H, W, C] frame; mask==1 is kept exactly."""
    params.validate()
    if not getattr(model, "trained", False):
        raise UsageError("denoiser is not trained; refusing to inpaint")
    x0 = np.asarray(x0, dtype=np.float32)
    mask = np.asarray(mask)
    _validate_frame_inputs(x0, mask)

    x0_t = torch.from_numpy(x0).permute(2, 0, 1)[None]
    mask_t = torch.from_numpy(mask.astype(np.float32))[None, None]
    generator = torch.Generator().manual_seed(params.seed)
    x_final = _inpaint_core(
        model, x0_t, mask_t, params.schedule, params.resample_count, [generator]
    )
    _INPAINT_CALLS.add(1)
    out = merge(mask_t, x0_t, x_final).clamp(-1.0, 1.0)
    return out[0].permute(1, 2, 0).numpy()


def inpaint_sequence(
    model,
    sequence: STSequence,
    partitions,
    geometry: PatchPartitionGeometry,
    params: InpaintParams,
) -> STSequence:
    """Inpaint every frame with its own partition mask; one counter tick per frame."""
    params.validate()
    if not getattr(model, "trained", False):
        raise UsageError("denoiser is not trained; refusing to inpaint")
    frames = np.asarray(sequence.frames, dtype=np.float32)
    if len(partitions) != frames.shape[0]:
        raise ConfigurationError(
            f"sequence {sequence.source_id}: {frames.shape[0]} frames but "
            f"{len(partitions)} partitions"
        )
    masks = np.stack(
        [mask_from_partition(p.environmental, geometry) for p in partitions]
    ).astype(np.float32)

    x0 = _frames_to_bchw(frames)
    mask_t = torch.from_numpy(masks)[:, None]
    generators = [
        torch.Generator().manual_seed(derive_seed(params.seed, frame_index))
        for frame_index in range(frames.shape[0])
    ]
    x_final = _inpaint_core(model, x0, mask_t, params.schedule, params.resample_count, generators)
    _INPAINT_CALLS.add(frames.shape[0])
    out = merge(mask_t, x0, x_final).clamp(-1.0, 1.0)
    return STSequence(
        frames=out.permute(0, 2, 3, 1).numpy(),
        raw_range=sequence.raw_range,
        source_id=sequence.source_id,
        kind=KIND_GENERATED,
    )


def save_denoiser(model: DenoiserModel, path) -> None:
    arrays = {name: tensor.numpy() for name, tensor in model.net.state_dict().items()}
    arrays["_schedule_betas"] = model.schedule.betas
    meta = {
        "config": {
            "in_channels": model.config.in_channels,
            "base_channels": model.config.base_channels,
            "channel_mults": list(model.config.channel_mults),
            "time_dim": model.config.time_dim,
            "learning_rate": model.config.learning_rate,
            "epochs": model.config.epochs,
            "batch_size": model.config.batch_size,
            "seed": model.config.seed,
        },
        "trained": model.trained,
        "steps_trained": model.steps_trained,
    }
    save_checkpoint(path, "denoiser", meta, arrays)


def load_denoiser(path) -> DenoiserModel:
    kind, meta, arrays = load_checkpoint(path)
    if kind != "denoiser":
        raise DataIntegrityError(f"{path}: expected a denoiser checkpoint, got {kind!r}")
    betas = arrays.pop("_schedule_betas")
    alphas = 1.0 - betas
    schedule = NoiseSchedule(
        betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas), sigmas=np.sqrt(betas)
    )
    schedule.validate()
    cfg = meta["config"]
    config = DenoiserConfig(
        in_channels=int(cfg["in_channels"]),
        base_channels=int(cfg["base_channels"]),
        channel_mults=tuple(int(m) for m in cfg["channel_mults"]),
        time_dim=int(cfg["time_dim"]),
        learning_rate=float(cfg["learning_rate"]),
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        seed=int(cfg["seed"]),
    )
    net = DenoiserNet(config)
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    net.load_state_dict(state)
    net.eval()
    return DenoiserModel(
        net,
        schedule,
        config,
        trained=bool(meta["trained"]),
        steps_trained=int(meta["steps_trained"]),
    )
