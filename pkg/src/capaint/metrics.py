"""Forecast quality metrics (MAE, MSE, SSIM, PSNR) and comparison reports.

MAE/MSE follow the x100 reporting convention in tables; SSIM uses an
11x11 Gaussian window (sigma 1.5) with the standard stabilizing constants
C1 = (0.01*L)^2 and C2 = (0.03*L)^2, falling back to global statistics
when a frame is smaller than the window.
"""

import csv
import io
import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, UsageError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

METRIC_NAMES = ("mae", "mse", "ssim", "psnr")
LOWER_IS_BETTER = {"mae": True, "mse": True, "ssim": False, "psnr": False}


def mse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ConfigurationError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def mae(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ConfigurationError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(pred - truth)))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


_SSIM_KERNEL = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)


def ssim_uses_global(shape) -> bool:
    """True when a [H, W, ...] frame is too small for the windowed SSIM."""
    return shape[0] < SSIM_WINDOW or shape[1] < SSIM_WINDOW


def _windowed_ssim_channel(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> float:
    win = SSIM_WINDOW
    xw = sliding_window_view(x, (win, win))
    yw = sliding_window_view(y, (win, win))
    mu_x = np.tensordot(xw, _SSIM_KERNEL, axes=([2, 3], [0, 1]))
    mu_y = np.tensordot(yw, _SSIM_KERNEL, axes=([2, 3], [0, 1]))
    exx = np.tensordot(xw * xw, _SSIM_KERNEL, axes=([2, 3], [0, 1]))
    eyy = np.tensordot(yw * yw, _SSIM_KERNEL, axes=([2, 3], [0, 1]))
    exy = np.tensordot(xw * yw, _SSIM_KERNEL, axes=([2, 3], [0, 1]))
    var_x = exx - mu_x**2
    var_y = eyy - mu_y**2
    cov = exy - mu_x * mu_y
    score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )
    return float(score.mean())


def _global_ssim_channel(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> float:
    mu_x, mu_y = x.mean(), y.mean()
    var_x, var_y = x.var(), y.var()
    cov = ((x - mu_x) * (y - mu_y)).mean()
    return float(
        ((2 * mu_x * mu_y + c1) * (2 * cov + c2))
        / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
    )


def ssim(x, y, data_range: float) -> float:
    """Structural similarity of two [H, W] or [H, W, C] frames, in [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ConfigurationError(f"shape mismatch {x.shape} vs {y.shape}")
    if data_range <= 0:
        raise ConfigurationError(f"data_range must be positive, got {data_range}")
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    if x.ndim != 3:
        raise ConfigurationError(f"expected [H, W] or [H, W, C], got shape {x.shape}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    per_channel = _global_ssim_channel if ssim_uses_global(x.shape) else _windowed_ssim_channel
    return float(
        np.mean([per_channel(x[..., ch], y[..., ch], c1, c2) for ch in range(x.shape[2])])
    )


def psnr(pred, truth, data_range: float) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the images are identical."""
    if data_range <= 0:
        raise ConfigurationError(f"data_range must be positive, got {data_range}")
    err = mse(pred, truth)
    if err == 0.0:
        return math.inf
    return float(10.0 * math.log10(data_range**2 / err))


def sequence_metrics(pred: np.ndarray, truth: np.ndarray, data_range: float) -> dict:
    """All four metrics for a [K, H, W, C] forecast; SSIM averaged per frame."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 4:
        raise ConfigurationError(f"expected matching [K, H, W, C], got {pred.shape} vs {truth.shape}")
    return {
        "mae": mae(pred, truth),
        "mse": mse(pred, truth),
        "ssim": float(np.mean([ssim(p, t, data_range) for p, t in zip(pred, truth)])),
        "psnr": psnr(pred, truth, data_range),
    }


def delta_percent(ori: float, new: float, lower_is_better: bool) -> float:
    """Improvement of `new` over `ori` in percent, one decimal, half-up."""
    if ori == 0:
        return 0.0
    if lower_is_better:
        value = 100.0 * (ori - new) / ori
    else:
        value = 100.0 * (new - ori) / ori
    return float(Decimal(repr(value)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass
class EvalReport:
    """Aggregated baseline vs +CaPaint comparison over repeated runs."""

    baseline_runs: list[dict]
    capaint_runs: list[dict]
    baseline_label: str = "Ori"
    capaint_label: str = "+CaP"
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.baseline_runs or not self.capaint_runs:
            raise UsageError("a report needs at least one run per arm")
        self.flags.setdefault("ssim_per_frame_mean", True)

    def _finite(self, runs: list[dict], name: str) -> list[float]:
        return [r[name] for r in runs if math.isfinite(r[name])]

    def summary(self) -> dict:
        out = {
            "num_runs": {
                "baseline": len(self.baseline_runs),
                "capaint": len(self.capaint_runs),
            },
            "seeds": {
                "baseline": [r.get("seed") for r in self.baseline_runs],
                "capaint": [r.get("seed") for r in self.capaint_runs],
            },
            "per_run": {"baseline": self.baseline_runs, "capaint": self.capaint_runs},
            "metrics": {},
            "flags": dict(self.flags),
        }
        for name in METRIC_NAMES:
            base = self._finite(self.baseline_runs, name)
            cap = self._finite(self.capaint_runs, name)
            entry = {
                "baseline_mean": float(np.mean(base)) if base else None,
                "baseline_std": float(np.std(base)) if base else None,
                "capaint_mean": float(np.mean(cap)) if cap else None,
                "capaint_std": float(np.std(cap)) if cap else None,
                "infinite_runs": (
                    len(self.baseline_runs) - len(base) + len(self.capaint_runs) - len(cap)
                ),
            }
            if base and cap:
                entry["delta_percent"] = delta_percent(
                    entry["baseline_mean"], entry["capaint_mean"], LOWER_IS_BETTER[name]
                )
            else:
                entry["delta_percent"] = None
            if name in ("mae", "mse") and base and cap:
                entry["baseline_mean_x100"] = 100.0 * entry["baseline_mean"]
                entry["capaint_mean_x100"] = 100.0 * entry["capaint_mean"]
            out["metrics"][name] = entry
        return out

    def to_json(self) -> str:
        def _clean(value):
            if isinstance(value, float) and math.isinf(value):
                return None
            if isinstance(value, dict):
                return {k: _clean(v) for k, v in value.items()}
            if isinstance(value, list):
                return [_clean(v) for v in value]
            return value

        summary = self.summary()
        summary["flags"]["psnr_infinite_serialized_null"] = any(
            math.isinf(r["psnr"]) for r in self.baseline_runs + self.capaint_runs
        )
        return json.dumps(_clean(summary), indent=2)

    def to_csv(self) -> str:
        """Table-style CSV: metric, Ori, +CaP, delta (x100 rows for MAE/MSE)."""
        summary = self.summary()
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["metric", self.baseline_label, self.capaint_label, "delta_percent"])
        for name in METRIC_NAMES:
            entry = summary["metrics"][name]
            scale = 100.0 if name in ("mae", "mse") else 1.0
            label = f"{name}_x100" if name in ("mae", "mse") else name

            def _fmt(v):
                if v is None or (isinstance(v, float) and math.isinf(v)):
                    return ""
                return f"{scale * v:.4f}"

            writer.writerow(
                [label, _fmt(entry["baseline_mean"]), _fmt(entry["capaint_mean"]), entry["delta_percent"]]
            )
        return buf.getvalue()
