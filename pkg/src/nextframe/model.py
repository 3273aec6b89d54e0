"""Layer objects and assembly of the Stack-LSTM, CNN-LSTM and ConvLSTM models.

Internally image tensors are channels-first: a window batch enters as
``(B, T, H, W, 1)`` and is moved to ``(B, T, 1, H, W)`` for the
convolutional architectures. Every model ends in a sigmoid head and emits
``(B, H, W, 1)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import cells
from .layers import (
    BatchNormParams,
    DenseParams,
    batchnorm_backward,
    batchnorm_forward,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    glorot_init,
)
from .optim import LOSS_KINDS
from .tensor import ShapeError, conv2d, conv2d_grad, elementwise, maxpool2d, maxpool2d_backward

ARCHITECTURES = ("stack_lstm", "cnn_lstm", "conv_lstm")
DEFAULT_UNITS = {"stack_lstm": (256, 256, 256), "cnn_lstm": (256, 256), "conv_lstm": (16, 16, 16)}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


@dataclass
class ModelConfig:
    architecture: str
    timestep: int = 5
    resolution: int = 64
    loss_kind: str = "mae"
    epochs: int = 100
    # LSTM units (stack_lstm, cnn_lstm) or ConvLSTM filters (conv_lstm), one per recurrent layer
    units: tuple[int, ...] | None = None
    cnn_filters: int = 16
    kernel_size: int = 3
    dropout: float = 0.2
    batch_size: int | None = None
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99
    forget_bias: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}", "architecture")
        if self.units is None:
            self.units = DEFAULT_UNITS[self.architecture]
        self.units = tuple(int(u) for u in self.units)
        layers = 2 if self.architecture == "cnn_lstm" else 3
        if len(self.units) != layers:
            raise ConfigError(f"{self.architecture} has {layers} recurrent layers, got units {self.units}", "units")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}", "loss_kind")
        positive = {"timestep": self.timestep, "resolution": self.resolution, "epochs": self.epochs,
                    "cnn_filters": self.cnn_filters, "kernel_size": self.kernel_size}
        for name, value in positive.items():
            if int(value) < 1:
                raise ConfigError(f"{name} must be positive, got {value}", name)
        if min(self.units) < 1:
            raise ConfigError(f"units must be positive, got {self.units}", "units")
        if self.resolution % 2:
            raise ConfigError(f"resolution must be even, got {self.resolution}", "resolution")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}", "kernel_size")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}", "dropout")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}", "batch_size")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive", "learning_rate")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if key == "units":
                value = ",".join(str(u) for u in value)
            elif value is None:
                value = "full"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_strings(cls, mapping: dict[str, str]) -> "ModelConfig":
        """Build from string values, as read from a key-value text file."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in types:
                raise ConfigError(f"unknown model field {key!r}", key)
            raw = raw.strip()
            try:
                if key == "units":
                    kwargs[key] = tuple(int(v) for v in raw.split(",") if v.strip())
                elif key == "batch_size":
                    kwargs[key] = None if raw in ("full", "none", "") else int(raw)
                elif key in ("architecture", "loss_kind"):
                    kwargs[key] = raw
                elif types[key] in ("int", int):
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value {raw!r}", key) from exc
        if "architecture" not in kwargs:
            raise ConfigError("architecture is required", "architecture")
        return cls(**kwargs)


# ------------------------------------------------------------------ layers


class Layer:
    kind = "other"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, mode, rng):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({', '.join(f'{k}{v.shape}' for k, v in self.params.items())})"


class ToChannelsFirst(Layer):
    """(B, T, H, W, C) -> (B, T, C, H, W)."""

    def forward(self, x, mode, rng):
        return np.ascontiguousarray(x.transpose(0, 1, 4, 2, 3))

    def backward(self, dy):
        return dy.transpose(0, 1, 3, 4, 2)


class Flatten(Layer):
    """Collapse all axes after the first ``keep`` into one."""

    def __init__(self, keep=2):
        super().__init__()
        self.keep = keep

    def forward(self, x, mode, rng):
        self.shape = x.shape
        return x.reshape(x.shape[:self.keep] + (-1,))

    def backward(self, dy):
        return dy.reshape(self.shape)


class ToFrame(Layer):
    """Reshape the head output to (B, H, W, 1)."""

    def __init__(self, height, width):
        super().__init__()
        self.height, self.width = height, width

    def forward(self, x, mode, rng):
        self.shape = x.shape
        return x.reshape(x.shape[0], self.height, self.width, 1)

    def backward(self, dy):
        return dy.reshape(self.shape)


class LSTM(Layer):
    kind = "recurrent"

    def __init__(self, n_in, units, rng, return_sequences=True, forget_bias=1.0):
        super().__init__()
        self.return_sequences = return_sequences
        self.p = cells.LstmParams(
            glorot_init((4 * units, n_in), rng).reshape(4, units, n_in),
            glorot_init((4 * units, units), rng).reshape(4, units, units),
            np.zeros((4, units), np.float32),
        )
        self.p.b[1] = forget_bias
        self.params = self.p.as_dict()

    def forward(self, x, mode, rng):
        states, self.caches = cells.unroll([x[:, t] for t in range(x.shape[1])], "lstm", self.p)
        if self.return_sequences:
            return np.stack([s.h for s in states], axis=1)
        return states[-1].h

    def backward(self, dy):
        steps = len(self.caches)
        dh_seq = [dy[:, t] for t in range(steps)] if self.return_sequences else [None] * (steps - 1) + [dy]
        grads, dxs, _ = cells.unroll_backward("lstm", self.caches, dh_seq)
        self.grads = grads.as_dict()
        return np.stack(dxs, axis=1)


class ConvLSTM(LSTM):
    kind = "recurrent"

    def __init__(self, in_channels, filters, rng, kernel=3, return_sequences=True, forget_bias=1.0):
        Layer.__init__(self)
        self.return_sequences = return_sequences
        self.p = cells.ConvLstmParams(
            glorot_init((4 * filters, in_channels, kernel, kernel), rng).reshape(4, filters, in_channels, kernel, kernel),
            glorot_init((4 * filters, filters, kernel, kernel), rng).reshape(4, filters, filters, kernel, kernel),
            np.zeros((4, filters), np.float32),
        )
        self.p.b[1] = forget_bias
        self.params = self.p.as_dict()

    def forward(self, x, mode, rng):
        states, self.caches = cells.unroll([x[:, t] for t in range(x.shape[1])], "convlstm", self.p)
        if self.return_sequences:
            return np.stack([s.h for s in states], axis=1)
        return states[-1].h

    def backward(self, dy):
        steps = len(self.caches)
        dh_seq = [dy[:, t] for t in range(steps)] if self.return_sequences else [None] * (steps - 1) + [dy]
        grads, dxs, _ = cells.unroll_backward("convlstm", self.caches, dh_seq)
        self.grads = grads.as_dict()
        return np.stack(dxs, axis=1)


class BatchNorm(Layer):
    kind = "norm"

    def __init__(self, channels, axis, epsilon=1e-3, momentum=0.99):
        super().__init__()
        self.axis = axis
        self.p = BatchNormParams.create(channels, epsilon, momentum)
        self.params = {"gamma": self.p.gamma, "beta": self.p.beta}
        self.buffers = {"running_mean": self.p.running_mean, "running_var": self.p.running_var}

    def forward(self, x, mode, rng):
        y, self.cache = batchnorm_forward(x, self.p, mode, self.axis)
        return y

    def backward(self, dy):
        dgamma, dbeta, dx = batchnorm_backward(self.cache, dy)
        self.grads = {"gamma": dgamma, "beta": dbeta}
        return dx


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate):
        super().__init__()
        self.rate = rate

    def forward(self, x, mode, rng):
        y, self.mask = dropout_forward(x, self.rate, mode, rng)
        return y

    def backward(self, dy):
        return dropout_backward(self.mask, dy)


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng, activation="none"):
        super().__init__()
        self.p = DenseParams(glorot_init((n_out, n_in), rng), np.zeros(n_out, np.float32), activation)
        self.params = {"W": self.p.W, "b": self.p.b}

    def forward(self, x, mode, rng):
        y, self.cache = dense_forward(x, self.p)
        return y

    def backward(self, dy):
        dW, db, dx = dense_backward(self.cache, dy)
        self.grads = {"W": dW, "b": db}
        return dx


class Conv2D(Layer):
    """Same-padded convolution over (B, C, H, W), or per frame over (B, T, C, H, W)."""

    kind = "conv"

    def __init__(self, in_channels, filters, rng, kernel=3, activation="relu"):
        super().__init__()
        self.activation = activation
        self.params = {"K": glorot_init((filters, in_channels, kernel, kernel), rng),
                       "b": np.zeros(filters, np.float32)}

    def forward(self, x, mode, rng):
        self.in_shape = x.shape
        x4 = x.reshape((-1,) + x.shape[-3:])
        z = conv2d(x4, self.params["K"], self.params["b"], "same")
        self.x4 = x4
        self.z = z
        self.y = z if self.activation == "none" else elementwise(self.activation, z)
        return self.y.reshape(x.shape[:-3] + z.shape[1:])

    def backward(self, dy):
        dy = dy.reshape(self.y.shape)
        if self.activation == "relu":
            dy = dy * elementwise("d_relu", self.z)
        elif self.activation == "sigmoid":
            dy = dy * self.y * (1 - self.y)
        dx, dK, db = conv2d_grad(self.x4, self.params["K"], dy, "same")
        self.grads = {"K": dK, "b": db}
        return dx.reshape(self.in_shape)


class MaxPool2D(Layer):
    kind = "pool"

    def forward(self, x, mode, rng):
        self.in_shape = x.shape
        x4 = x.reshape((-1,) + x.shape[-3:])
        y, self.argmax = maxpool2d(x4)
        self.x4_shape = x4.shape
        return y.reshape(x.shape[:-2] + y.shape[-2:])

    def backward(self, dy):
        dy = dy.reshape(self.argmax.shape)
        return maxpool2d_backward(dy, self.argmax, self.x4_shape).reshape(self.in_shape)


# ------------------------------------------------------------------- model


class Model:
    def __init__(self, layers, config: ModelConfig):
        self.layers = layers
        self.config = config
        self.architecture = config.architecture
        self.mode = "train"
        self.reseed_dropout(config.seed)

    def reseed_dropout(self, seed):
        self.rng = np.random.default_rng([int(seed), 1])

    def forward(self, X, mode="train"):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        cfg = self.config
        expect = (cfg.timestep, cfg.resolution, cfg.resolution, 1)
        if X.ndim != 5 or X.shape[1:] != expect:
            raise ShapeError(f"window batch must be B×{'×'.join(map(str, expect))}, got {X.shape}")
        self.mode = mode
        x = np.asarray(X, np.float32) if X.dtype != np.float64 else X
        for layer in self.layers:
            x = layer.forward(x, mode, self.rng)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_parameters(self):
        """Yield ``(name, array, layer, key)`` for every trainable tensor."""
        for idx, layer in enumerate(self.layers):
            for key, arr in layer.params.items():
                yield f"{idx:02d}.{type(layer).__name__}.{key}", arr, layer, key

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Trainable tensors plus running statistics, keyed by stable names."""
        out = {}
        for idx, layer in enumerate(self.layers):
            for key, arr in list(layer.params.items()) + list(layer.buffers.items()):
                out[f"{idx:02d}.{type(layer).__name__}.{key}"] = arr
        return out

    def astype(self, dtype):
        """Cast every tensor in place of the layer dicts (used by float64 gradient checks)."""
        for layer in self.layers:
            for store in (layer.params, layer.buffers):
                for key in store:
                    store[key] = store[key].astype(dtype)
            p = getattr(layer, "p", None)
            if isinstance(p, (cells.LstmParams, cells.ConvLstmParams)):
                p.W, p.R, p.b = layer.params["W"], layer.params["R"], layer.params["b"]
            elif isinstance(p, DenseParams):
                p.W, p.b = layer.params["W"], layer.params["b"]
            elif isinstance(p, BatchNormParams):
                p.gamma, p.beta = layer.params["gamma"], layer.params["beta"]
                p.running_mean, p.running_var = layer.buffers["running_mean"], layer.buffers["running_var"]
        return self

    def count(self, kind: str) -> int:
        return sum(1 for layer in self.layers if layer.kind == kind)


def build_model(cfg: ModelConfig) -> Model:
    rng = np.random.default_rng([int(cfg.seed), 0])
    res = cfg.resolution
    units = cfg.units
    layers: list[Layer] = []

    def norm_and_drop(channels, axis):
        layers.append(BatchNorm(channels, axis, cfg.bn_epsilon, cfg.bn_momentum))
        layers.append(Dropout(cfg.dropout))

    if cfg.architecture == "stack_lstm":
        layers.append(Flatten(keep=2))
        n_in = res * res
        for k, u in enumerate(units):
            last = k == len(units) - 1
            layers.append(LSTM(n_in, u, rng, return_sequences=not last, forget_bias=cfg.forget_bias))
            norm_and_drop(u, -1)
            n_in = u
        layers.append(Dense(n_in, res * res, rng, activation="sigmoid"))
        layers.append(ToFrame(res, res))
    elif cfg.architecture == "cnn_lstm":
        layers.append(ToChannelsFirst())
        layers.append(Conv2D(1, cfg.cnn_filters, rng, cfg.kernel_size, activation="relu"))
        layers.append(MaxPool2D())
        layers.append(Flatten(keep=2))
        n_in = cfg.cnn_filters * (res // 2) ** 2
        for k, u in enumerate(units):
            last = k == len(units) - 1
            layers.append(LSTM(n_in, u, rng, return_sequences=not last, forget_bias=cfg.forget_bias))
            n_in = u
        layers.append(Dense(n_in, res * res, rng, activation="sigmoid"))
        layers.append(ToFrame(res, res))
    else:
        layers.append(ToChannelsFirst())
        n_in = 1
        for k, u in enumerate(units):
            last = k == len(units) - 1
            layers.append(ConvLSTM(n_in, u, rng, cfg.kernel_size, return_sequences=not last,
                                   forget_bias=cfg.forget_bias))
            norm_and_drop(u, -3)
            n_in = u
        layers.append(Conv2D(n_in, 1, rng, kernel=1, activation="sigmoid"))
        layers.append(ToFrame(res, res))
    return Model(layers, cfg)


def model_forward(m: Model, window: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Predict one frame (H×W×1) from one window (T×H×W×1)."""
    window = np.asarray(window)
    if window.ndim != 4:
        raise ShapeError(f"window must be T×H×W×1, got {window.shape}")
    return m.forward(window[None], mode)[0]
