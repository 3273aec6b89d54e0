"""Sequence-to-one training with Adam, next-frame prediction, checkpoints."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FrameSequence, WindowedDataset
from .model import ConfigError, Model, ModelConfig, build_model, model_forward
from .optim import AdamState, adam_step, loss, loss_grad
from .tensor import ShapeError, read_tensor, write_tensor


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite training loss {value} at epoch {epoch}")
        self.epoch = epoch
        self.value = value


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def total_seconds(self) -> float:
        return float(sum(self.epoch_seconds))


def _batches(n, batch_size):
    if batch_size is None or batch_size >= n:
        yield slice(0, n)
        return
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def train_step(m: Model, X, Y, kind: str, optimizers: dict) -> float:
    pred = m.forward(X, "train")
    value = loss(kind, pred, Y)
    m.backward(loss_grad(kind, pred, Y))
    for name, arr, layer, key in m.named_parameters():
        adam_step(arr, layer.grads[key].astype(arr.dtype, copy=False), optimizers[name])
    return value


def batched_loss(m: Model, ds: WindowedDataset, kind: str, mode: str = "eval", batch_size=None) -> float:
    """Loss over a whole dataset, pooled across batches."""
    preds = [m.forward(ds.X[sl], mode) for sl in _batches(len(ds), batch_size)]
    return loss(kind, np.concatenate(preds), ds.Y)


def fit(m: Model, train: WindowedDataset, valid: WindowedDataset | None = None, cfg: ModelConfig | None = None,
        callback=None) -> TrainReport:
    """Train for ``cfg.epochs`` epochs; validation loss is computed in eval mode.

    The reported train loss of an epoch is the size-weighted mean of the
    train-mode batch losses seen during that epoch.
    """
    cfg = cfg or m.config
    if len(train) == 0 or (valid is not None and len(valid) == 0):
        raise ShapeError("training and validation partitions must be non-empty")
    hyper = dict(beta1=cfg.beta1, beta2=cfg.beta2, eta=cfg.learning_rate, eps=cfg.adam_eps)
    optimizers = {name: AdamState.like(arr, **hyper) for name, arr, _, _ in m.named_parameters()}
    report = TrainReport(config=cfg.to_dict())
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        total = 0.0
        for sl in _batches(len(train), cfg.batch_size):
            X, Y = train.X[sl], train.Y[sl]
            total += train_step(m, X, Y, cfg.loss_kind, optimizers) * len(X)
        train_value = total / len(train)
        if not np.isfinite(train_value):
            raise TrainingDiverged(epoch, train_value)
        valid_value = batched_loss(m, valid, cfg.loss_kind, "eval", cfg.batch_size) if valid is not None else float("nan")
        report.epoch_seconds.append(time.perf_counter() - start)
        report.train_loss.append(train_value)
        report.valid_loss.append(valid_value)
        if callback is not None:
            callback(epoch, train_value, valid_value)
    return report


def predict_next(m: Model, window) -> np.ndarray:
    """Next frame (H×W×1) from the last ``timestep`` frames, in eval mode."""
    frames = window.frames if isinstance(window, FrameSequence) else np.asarray(window)
    if len(frames) != m.config.timestep:
        raise ShapeError(f"window holds {len(frames)} frames, model expects {m.config.timestep}")
    return model_forward(m, frames, "eval")


# -------------------------------------------------------------- checkpoints

CHECKPOINT_INDEX = "checkpoint.txt"
CHECKPOINT_CONFIG = "config.txt"


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(m: Model, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for name, arr in m.state_tensors().items():
        filename = f"{name}.fct"
        write_tensor(directory / filename, arr)
        index.append(f"{name}\t{filename}")
    (directory / CHECKPOINT_INDEX).write_text("\n".join(index) + "\n")
    (directory / CHECKPOINT_CONFIG).write_text(m.config.to_text())
    return directory


def load_checkpoint(directory) -> Model:
    directory = Path(directory)
    cfg = ModelConfig.from_strings(parse_key_values((directory / CHECKPOINT_CONFIG).read_text()))
    m = build_model(cfg)
    tensors = m.state_tensors()
    seen = set()
    for line in (directory / CHECKPOINT_INDEX).read_text().splitlines():
        if not line.strip():
            continue
        name, filename = line.split("\t")
        if name not in tensors:
            raise ConfigError(f"checkpoint tensor {name} does not exist in a {cfg.architecture} model")
        arr = read_tensor(directory / filename)
        if arr.shape != tensors[name].shape:
            raise ShapeError(f"checkpoint tensor {name} has shape {arr.shape}, model expects {tensors[name].shape}")
        np.copyto(tensors[name], arr)
        seen.add(name)
    missing = set(tensors) - seen
    if missing:
        raise ConfigError(f"checkpoint lacks tensors {sorted(missing)}")
    return m
