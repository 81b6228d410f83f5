"""Reference spatio-temporal forecaster: conv encoder, temporal translator, decoder.

The forecasting task maps the first context_len frames of a sequence onto
the following forecast_len frames. Training minimizes MSE with Adam under
a one-cycle learning-rate schedule; when sampling parameters are given,
each epoch draws a fresh per-frame resampled version of every training
sequence from its repository group.
"""

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
import torch
from torch import nn

from .augment import SampleParams, sample_sequence, SequenceRepository
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import STSequence
from .errors import ConfigurationError, DataError, DataIntegrityError, TrainingError
from .seeding import derive_seed


@dataclass
class ForecastTask:
    context_len: int = 10
    forecast_len: int = 10
    channels_in: int = 1
    channels_out: int = 1

    def validate(self) -> None:
        if self.context_len < 1 or self.forecast_len < 1:
            raise ConfigurationError("context_len and forecast_len must be >= 1")
        if self.channels_in < 1 or self.channels_out < 1:
            raise ConfigurationError("channel counts must be >= 1")


@dataclass
class BackboneConfig:
    hidden_dim: int = 24
    translator_dim: int = 64
    translator_depth: int = 4
    learning_rate: float = 0.004
    batch_size: int = 4
    epochs: int = 30
    seed: int = 0

    def validate(self) -> None:
        if min(self.hidden_dim, self.translator_dim, self.translator_depth) < 1:
            raise ConfigurationError("model dimensions must be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("bad training hyperparameters")


@runtime_checkable
class ForecasterInterface(Protocol):
    """Contract external backbones must satisfy to plug into the harness."""

    def forecast(self, context: np.ndarray) -> np.ndarray: ...

    def train_step(self, batch) -> float: ...


def _norm_act(channels: int):
    groups = next(g for g in (8, 4, 2, 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels), nn.SiLU()


class _ConvForecastNet(nn.Module):
    def __init__(self, task: ForecastTask, config: BackboneConfig):
        super().__init__()
        hid = config.hidden_dim
        self.task = task
        self.enc = nn.Sequential(
            nn.Conv2d(task.channels_in, hid, 3, padding=1),
            *_norm_act(hid),
            nn.Conv2d(hid, hid, 3, stride=2, padding=1),
            *_norm_act(hid),
        )
        layers = [nn.Conv2d(task.context_len * hid, config.translator_dim, 3, padding=1)]
        layers += [*_norm_act(config.translator_dim)]
        for _ in range(max(config.translator_depth - 2, 0)):
            layers += [nn.Conv2d(config.translator_dim, config.translator_dim, 3, padding=1)]
            layers += [*_norm_act(config.translator_dim)]
        layers += [nn.Conv2d(config.translator_dim, task.forecast_len * hid, 3, padding=1)]
        self.translator = nn.Sequential(*layers)
        self.dec = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(hid, hid, 3, padding=1),
            *_norm_act(hid),
            nn.Conv2d(hid, task.channels_out, 3, padding=1),
        )

    def forward(self, context: torch.Tensor) -> torch.Tensor:
        """context [B, T_in, C_in, H, W] -> [B, K_f, C_out, H, W]."""
        b, t_in, c, h, w = context.shape
        feats = self.enc(context.reshape(b * t_in, c, h, w))
        _, hid, h2, w2 = feats.shape
        hidden = self.translator(feats.reshape(b, t_in * hid, h2, w2))
        hidden = hidden.reshape(b * self.task.forecast_len, hid, h2, w2)
        out = self.dec(hidden)
        return out.reshape(b, self.task.forecast_len, self.task.channels_out, h, w)


def forecast_loss(net: nn.Module, contexts: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Differentiable mean squared forecast error on [B, T, C, H, W] tensors."""
    return torch.mean((net(contexts) - targets) ** 2)


class ConvForecaster:
    """Trainable reference backbone implementing ForecasterInterface."""

    def __init__(self, task: ForecastTask, config: BackboneConfig):
        task.validate()
        config.validate()
        self.task = task
        self.config = config
        torch.manual_seed(config.seed)
        self.net = _ConvForecastNet(task, config)
        self._optimizer = None
        self._scheduler = None

    def setup_optimizer(self, total_steps: int) -> None:
        self._optimizer = torch.optim.Adam(self.net.parameters(), lr=self.config.learning_rate)
        self._scheduler = torch.optim.lr_scheduler.OneCycleLR(
            self._optimizer, max_lr=self.config.learning_rate, total_steps=max(total_steps, 1)
        )

    def train_step(self, batch) -> float:
        if self._optimizer is None:
            self.setup_optimizer(total_steps=1)
        contexts, targets = batch
        self.net.train()
        loss = forecast_loss(self.net, contexts, targets)
        if not torch.isfinite(loss):
            raise TrainingError("forecast loss is not finite")
        self._optimizer.zero_grad()
        loss.backward()
        self._optimizer.step()
        if self._scheduler is not None:
            try:
                self._scheduler.step()
            except ValueError:
                pass  # stepping past total_steps is harmless at epoch boundaries
        return float(loss)

    def forecast(self, context: np.ndarray) -> np.ndarray:
        context = np.asarray(context, dtype=np.float32)
        if context.ndim != 4 or context.shape[0] != self.task.context_len:
            raise DataError(
                f"context must be [{self.task.context_len}, H, W, {self.task.channels_in}], "
                f"got shape {context.shape}"
            )
        tensor = torch.from_numpy(context).permute(0, 3, 1, 2)[None]
        self.net.eval()
        with torch.no_grad():
            out = self.net(tensor).clamp(-1.0, 1.0)
        return out[0].permute(0, 2, 3, 1).numpy()

    @property
    def learning_rate(self) -> float:
        if self._optimizer is None:
            return self.config.learning_rate
        return float(self._optimizer.param_groups[0]["lr"])


class PersistenceForecaster:
    """Debug floor: repeats the last context frame across the horizon."""

    def __init__(self, task: ForecastTask):
        self.task = task

    def forecast(self, context: np.ndarray) -> np.ndarray:
        context = np.asarray(context, dtype=np.float32)
        return np.repeat(context[-1:][..., : self.task.channels_out],
                         self.task.forecast_len, axis=0)

    def train_step(self, batch) -> float:
        return 0.0


def persistence_forecast(context: np.ndarray, forecast_len: int) -> np.ndarray:
    return np.repeat(np.asarray(context)[-1:], forecast_len, axis=0)


def _sequence_window(sequence: STSequence, task: ForecastTask):
    frames = sequence.frames
    needed = task.context_len + task.forecast_len
    if frames.shape[0] < needed:
        raise DataError(
            f"sequence {sequence.source_id} has {frames.shape[0]} frames; "
            f"task needs at least {needed}"
        )
    context = frames[: task.context_len]
    target = frames[task.context_len : needed]
    return context, target


def _epoch_sequences(train_source, sample_params, epoch: int, source_ids=None):
    if isinstance(train_source, SequenceRepository):
        ids = source_ids if source_ids is not None else train_source.sources
        out = []
        for sid in ids:
            group = train_source.group(sid)
            if sample_params is not None:
                draw_seed = derive_seed(sample_params.seed, epoch, sid)
                out.append(sample_sequence(group, sample_params, draw_seed))
            else:
                out.append(group[0])
        return out
    return list(train_source)


def train_backbone(
    train_source,
    task: ForecastTask,
    config: BackboneConfig,
    sample_params: SampleParams | None = None,
    val_sequences: list[STSequence] | None = None,
    source_ids: list[str] | None = None,
):
    """Train the reference backbone; returns (forecaster, per-epoch history).

    train_source is either a SequenceRepository (optionally resampled per
    epoch via sample_params) or a plain list of STSequence.
    """
    task.validate()
    config.validate()
    if sample_params is not None:
        sample_params.validate()
        if not isinstance(train_source, SequenceRepository):
            raise ConfigurationError("sampling parameters require a SequenceRepository")

    first_epoch = _epoch_sequences(train_source, sample_params, 0, source_ids)
    if not first_epoch:
        raise ConfigurationError("no training sequences")
    for seq in first_epoch:
        _sequence_window(seq, task)  # fail fast on short sequences

    model = ConvForecaster(task, config)
    num_sequences = len(first_epoch)
    steps_per_epoch = (num_sequences + config.batch_size - 1) // config.batch_size
    model.setup_optimizer(total_steps=config.epochs * steps_per_epoch)
    shuffler = torch.Generator().manual_seed(derive_seed(config.seed, "backbone-shuffle"))

    def to_tensors(sequences):
        contexts, targets = [], []
        for seq in sequences:
            context, target = _sequence_window(seq, task)
            contexts.append(context)
            targets.append(target[..., : task.channels_out])
        ctx = torch.from_numpy(np.stack(contexts).astype(np.float32)).permute(0, 1, 4, 2, 3)
        tgt = torch.from_numpy(np.stack(targets).astype(np.float32)).permute(0, 1, 4, 2, 3)
        return ctx, tgt

    val_tensors = to_tensors(val_sequences) if val_sequences else None

    def val_loss() -> float | None:
        if val_tensors is None:
            return None
        model.net.eval()
        with torch.no_grad():
            return float(forecast_loss(model.net, *val_tensors))

    history = []
    epoch_sequences = first_epoch
    for epoch in range(config.epochs):
        if epoch > 0:
            epoch_sequences = _epoch_sequences(train_source, sample_params, epoch, source_ids)
        contexts, targets = to_tensors(epoch_sequences)
        order = torch.randperm(contexts.shape[0], generator=shuffler)
        total, count = 0.0, 0
        for start in range(0, contexts.shape[0], config.batch_size):
            sel = order[start : start + config.batch_size]
            loss = model.train_step((contexts[sel], targets[sel]))
            total += loss * len(sel)
            count += len(sel)
        history.append(
            {
                "epoch": epoch,
                "train_loss": total / count,
                "val_loss": val_loss(),
                "lr": model.learning_rate,
            }
        )
    model.net.eval()
    return model, history


def forecast(model: ForecasterInterface, context: np.ndarray) -> np.ndarray:
    """Pure forecast call through the common interface."""
    return model.forecast(context)


def save_forecaster(model: ConvForecaster, path) -> None:
    arrays = {name: tensor.numpy() for name, tensor in model.net.state_dict().items()}
    meta = {
        "task": vars(model.task),
        "config": vars(model.config),
    }
    save_checkpoint(path, "forecaster", meta, arrays)


def load_forecaster(path) -> ConvForecaster:
    kind, meta, arrays = load_checkpoint(path)
    if kind != "forecaster":
        raise DataIntegrityError(f"{path}: expected a forecaster checkpoint, got {kind!r}")
    task = ForecastTask(**{k: int(v) for k, v in meta["task"].items()})
    cfg_raw = meta["config"]
    config = BackboneConfig(
        hidden_dim=int(cfg_raw["hidden_dim"]),
        translator_dim=int(cfg_raw["translator_dim"]),
        translator_depth=int(cfg_raw["translator_depth"]),
        learning_rate=float(cfg_raw["learning_rate"]),
        batch_size=int(cfg_raw["batch_size"]),
        epochs=int(cfg_raw["epochs"]),
        seed=int(cfg_raw["seed"]),
    )
    model = ConvForecaster(task, config)
    model.net.load_state_dict({name: torch.from_numpy(arr) for name, arr in arrays.items()})
    model.net.eval()
    return model
