"""Small NumPy convolutional classifier with exact backpropagation and Adam.

Architecture: conv -> ReLU -> [pool] -> conv -> ReLU -> [pool] -> flatten
-> dense -> ReLU -> dense -> softmax. Arrays are channel-last (N, H, W, C)
and everything runs in float64.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from gafcnn.errors import EmptySplit, FormatError, ShapeError

PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "dense_w", "dense_b", "out_w", "out_b")


@dataclass(frozen=True)
class CnnConfig:
    input_shape: tuple[int, int, int] = (10, 10, 4)
    conv1_filters: int = 16
    conv2_filters: int = 16
    kernel_size: int = 3
    use_max_pooling: bool = False
    dense_units: int = 128
    n_classes: int = 9

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    def spatial_after_convs(self) -> tuple[int, int]:
        h, w = self.input_shape[:2]
        if self.use_max_pooling:
            for _ in range(2):
                h, w = math.ceil(h / 2), math.ceil(w / 2)
        return h, w

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k, c = self.kernel_size, self.input_shape[2]
        h, w = self.spatial_after_convs()
        return {
            "conv1_w": (k, k, c, self.conv1_filters),
            "conv1_b": (self.conv1_filters,),
            "conv2_w": (k, k, self.conv1_filters, self.conv2_filters),
            "conv2_b": (self.conv2_filters,),
            "dense_w": (h * w * self.conv2_filters, self.dense_units),
            "dense_b": (self.dense_units,),
            "out_w": (self.dense_units, self.n_classes),
            "out_b": (self.n_classes,),
        }


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    early_stopping_patience: int = 20
    seed: int = 0


@dataclass
class CnnModel:
    config: CnnConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "CnnModel":
        return CnnModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, model: CnnModel) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in model.params.items()},
                   {k: np.zeros_like(p) for k, p in model.params.items()})


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_accuracy,val_loss,val_accuracy"]
        for i, row in enumerate(zip(self.train_loss, self.train_accuracy, self.val_loss, self.val_accuracy)):
            lines.append(f"{i}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def init_model(cfg: CnnConfig, rng: np.random.Generator | int = 0) -> CnnModel:
    """He-uniform weights (limit sqrt(6 / fan_in)) and zero biases."""
    rng = np.random.default_rng(rng)
    params = {}
    for name, shape in cfg.param_shapes().items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            limit = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape)
    return CnnModel(cfg, params)


def zero_model(cfg: CnnConfig) -> CnnModel:
    return CnnModel(cfg, {k: np.zeros(s) for k, s in cfg.param_shapes().items()})


# ---------------------------------------------------------------------------
# layers

def _same_pad(k: int) -> tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, h, w, c = x.shape
    lo, hi = _same_pad(k)
    xp = np.pad(x, ((0, 0), (lo, hi), (lo, hi), (0, 0)))
    patches = sliding_window_view(xp, (k, k), axis=(1, 2))  # n, h, w, c, ky, kx
    return patches.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def _conv_forward(x, kernels, bias):
    n, h, w, c = x.shape
    k, _, kc, f = kernels.shape
    if kc != c:
        raise ShapeError(f"kernel expects {kc} channels, input has {c}")
    cols = _im2col(x, k)
    out = cols @ kernels.reshape(k * k * c, f) + bias
    return out.reshape(n, h, w, f), cols


def _conv_backward(dout, cols, kernels, x_shape, need_dx=True):
    n, h, w, c = x_shape
    k, _, _, f = kernels.shape
    d = dout.reshape(-1, f)
    dk = (cols.T @ d).reshape(kernels.shape)
    db = d.sum(axis=0)
    if not need_dx:
        return None, dk, db
    # the input gradient of a "same" convolution is another one with the
    # kernel flipped spatially, channels swapped and the padding mirrored
    lo, hi = _same_pad(k)
    dp = np.pad(dout, ((0, 0), (hi, lo), (hi, lo), (0, 0)))
    dcols = sliding_window_view(dp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * f)
    flipped = kernels[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * f, c)
    return (dcols @ flipped).reshape(n, h, w, c), dk, db


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 zero-padded ("same") convolution of an (H, W, C) or (N, H, W, C) input."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    out, _ = _conv_forward(x[None] if single else x, kernels, bias)
    return out[0] if single else out


def _pool_view(x):
    n, h, w, f = x.shape
    h2, w2 = -(-h // 2), -(-w // 2)
    xp = np.pad(x, ((0, 0), (0, 2 * h2 - h), (0, 2 * w2 - w), (0, 0)), constant_values=-np.inf)
    # n, h2, w2, f, 4 with the patch flattened last
    return xp.reshape(n, h2, 2, w2, 2, f).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, f, 4)


def _pool_forward(x):
    patches = _pool_view(x)
    arg = patches.argmax(axis=-1)
    out = np.take_along_axis(patches, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, arg, x_shape):
    n, h, w, f = x_shape
    h2, w2 = dout.shape[1:3]
    routed = np.zeros(dout.shape + (4,))
    np.put_along_axis(routed, arg[..., None], dout[..., None], axis=-1)
    full = routed.reshape(n, h2, w2, f, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, f)
    return full[:, :h, :w, :]


def max_pool_2x2(x: np.ndarray) -> np.ndarray:
    """2x2 stride-2 max pooling; odd edges form truncated patches."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    out, _ = _pool_forward(x[None] if single else x)
    return out[0] if single else out


def max_pool_2x2_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``x`` given the gradient of the pooled output; goes to each patch maximum."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    _, arg = _pool_forward(xb)
    dx = _pool_backward(dout[None] if single else dout, arg, xb.shape)
    return dx[0] if single else dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# network

def _check_input(model: CnnModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.config.input_shape:
        raise ShapeError(f"expected inputs of shape {model.config.input_shape}, got {x.shape[1:]}")
    return x


def _logits(model: CnnModel, x: np.ndarray, keep: bool = False):
    p = model.params
    pool = model.config.use_max_pooling
    cache = {}
    z1, cols1 = _conv_forward(x, p["conv1_w"], p["conv1_b"])
    a1 = np.maximum(z1, 0.0)
    h1 = a1
    if pool:
        h1, arg1 = _pool_forward(a1)
        cache["arg1"] = arg1
    z2, cols2 = _conv_forward(h1, p["conv2_w"], p["conv2_b"])
    a2 = np.maximum(z2, 0.0)
    h2 = a2
    if pool:
        h2, arg2 = _pool_forward(a2)
        cache["arg2"] = arg2
    flat = h2.reshape(len(x), -1)
    z3 = flat @ p["dense_w"] + p["dense_b"]
    a3 = np.maximum(z3, 0.0)
    logits = a3 @ p["out_w"] + p["out_b"]
    if keep:
        cache.update(x_shape=x.shape, cols1=cols1, z1=z1, a1_shape=a1.shape, h1_shape=h1.shape,
                     cols2=cols2, z2=z2, a2_shape=a2.shape, h2_shape=h2.shape,
                     flat=flat, z3=z3, a3=a3)
    return logits, cache


def forward_batch(model: CnnModel, x: np.ndarray, chunk: int = 1024) -> np.ndarray:
    x = _check_input(model, x)
    out = [softmax(_logits(model, x[i:i + chunk])[0]) for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def forward(model: CnnModel, x: np.ndarray) -> np.ndarray:
    """Class probabilities for one (H, W, C) tensor."""
    return forward_batch(model, np.asarray(x)[None])[0]


def predict_batch(model: CnnModel, x: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return forward_batch(model, x).argmax(axis=1)


def predict(model: CnnModel, x: np.ndarray) -> int:
    return int(predict_batch(model, np.asarray(x)[None])[0])


def loss_and_gradients(model: CnnModel, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and its exact parameter gradients."""
    x = _check_input(model, x)
    y = np.asarray(y, dtype=np.int64)
    n = len(x)
    if n == 0:
        raise EmptySplit("empty batch")
    p = model.params
    logits, c = _logits(model, x, keep=True)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), y].mean())

    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    g = {}
    g["out_w"] = c["a3"].T @ dlogits
    g["out_b"] = dlogits.sum(axis=0)
    dz3 = (dlogits @ p["out_w"].T) * (c["z3"] > 0)
    g["dense_w"] = c["flat"].T @ dz3
    g["dense_b"] = dz3.sum(axis=0)
    dh2 = (dz3 @ p["dense_w"].T).reshape(c["h2_shape"])
    da2 = _pool_backward(dh2, c["arg2"], c["a2_shape"]) if "arg2" in c else dh2
    dz2 = da2 * (c["z2"] > 0)
    dh1, g["conv2_w"], g["conv2_b"] = _conv_backward(dz2, c["cols2"], p["conv2_w"], c["h1_shape"])
    da1 = _pool_backward(dh1, c["arg1"], c["a1_shape"]) if "arg1" in c else dh1
    dz1 = da1 * (c["z1"] > 0)
    _, g["conv1_w"], g["conv1_b"] = _conv_backward(dz1, c["cols1"], p["conv1_w"], c["x_shape"], need_dx=False)
    return loss, g


def batch_loss(model: CnnModel, x: np.ndarray, y: np.ndarray, chunk: int = 1024) -> tuple[float, float]:
    """Mean cross-entropy and accuracy without gradients."""
    x = _check_input(model, x)
    y = np.asarray(y, dtype=np.int64)
    total, correct = 0.0, 0
    for i in range(0, len(x), chunk):
        logits, _ = _logits(model, x[i:i + chunk])
        logp = _log_softmax(logits)
        yy = y[i:i + chunk]
        total -= logp[np.arange(len(yy)), yy].sum()
        correct += int((logits.argmax(axis=1) == yy).sum())
    return float(total / len(x)), correct / len(x)


def adam_step(model: CnnModel, grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> tuple[CnnModel, AdamState]:
    """One bias-corrected Adam update, applied in place; returns its arguments."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in PARAM_ORDER:
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        model.params[name] -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
    return model, state


def train(cfg: CnnConfig, tcfg: TrainConfig, x_train, y_train, x_val, y_val,
          log=None) -> tuple[CnnModel, TrainHistory]:
    """Mini-batch Adam with early stopping on validation loss.

    Returns the parameters from the epoch with the lowest validation loss.
    Initialisation and per-epoch shuffling share one generator seeded with
    ``tcfg.seed``.
    """
    if len(x_train) == 0 or len(x_val) == 0:
        raise EmptySplit("training and validation splits must be nonempty")
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    rng = np.random.default_rng(tcfg.seed)
    model = init_model(cfg, rng)
    _check_input(model, x_train)
    state = AdamState.zeros_like(model)
    history = TrainHistory()
    best = model.copy()
    best_loss = math.inf
    wait = 0
    n = len(x_train)
    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for i in range(0, n, tcfg.batch_size):
            idx = order[i:i + tcfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            loss, grads = loss_and_gradients(model, xb, yb)
            loss_sum += loss * len(idx)
            adam_step(model, grads, state, tcfg)
        train_loss = loss_sum / n
        # accuracy after the epoch's updates, measured on the whole training set
        _, train_acc = batch_loss(model, x_train, y_train)
        val_loss, val_acc = batch_loss(model, x_val, y_val)
        history.train_loss.append(train_loss)
        history.train_accuracy.append(train_acc)
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        if log is not None:
            log(epoch, train_loss, train_acc, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss = val_loss
            best = model.copy()
            history.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= tcfg.early_stopping_patience:
                break
    return best, history


# ---------------------------------------------------------------------------
# checkpoint file
#
#   8 bytes   magic b"GAFCNNCK"
#   uint32    format version (little-endian)
#   uint32    header length L
#   L bytes   UTF-8 JSON {"config": {...}, "params": [[name, shape], ...]}
#   float64   little-endian parameter values, arrays in PARAM_ORDER, C order

CHECKPOINT_MAGIC = b"GAFCNNCK"
CHECKPOINT_VERSION = 1


def dump_checkpoint(model: CnnModel) -> bytes:
    header = json.dumps({
        "config": asdict(model.config),
        "params": [[name, list(model.params[name].shape)] for name in PARAM_ORDER],
    }, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in PARAM_ORDER)
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + body


def load_checkpoint(data: bytes) -> CnnModel:
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError("not a model checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    cfg = CnnConfig(**header["config"])
    expected = cfg.param_shapes()
    offset = 16 + hlen
    params = {}
    for name, shape in header["params"]:
        shape = tuple(shape)
        if expected.get(name) != shape:
            raise FormatError(f"parameter {name} has shape {shape}, config implies {expected.get(name)}")
        count = int(np.prod(shape))
        if offset + 8 * count > len(data):
            raise FormatError(f"checkpoint truncated inside parameter {name}")
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(data) or set(params) != set(PARAM_ORDER):
        raise FormatError("checkpoint payload does not match its header")
    return CnnModel(cfg, params)


def save_checkpoint(model: CnnModel, path) -> None:
    Path(path).write_bytes(dump_checkpoint(model))


def read_checkpoint(path) -> CnnModel:
    return load_checkpoint(Path(path).read_bytes())
