"""Minimal feed-forward network engine on numpy.

Layers are small frozen descriptors; a :class:`Model` pairs an
:class:`Architecture` with one tuple of parameter arrays per layer.  Forward
passes keep per-layer caches so that a single backward sweep yields gradients
with respect to both the parameters and the input batch.

Activations and parameters are float32 by default.  Loss reductions are
carried out in float64.  ``Model.astype(np.float64)`` gives a double-precision
copy, which is what the finite-difference checks use.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Input batch does not match the architecture."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged in epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


# --------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_dim: int


@dataclass(frozen=True)
class OutputLogits:
    num_classes: int


Layer = Union[Conv2D, MaxPool, ReLU, Flatten, Dense, OutputLogits]
_LAYER_TYPES = {cls.__name__: cls for cls in (Conv2D, MaxPool, ReLU, Flatten, Dense, OutputLogits)}


def _out_shape(layer: Layer, shape: tuple) -> tuple:
    if isinstance(layer, Conv2D):
        if len(shape) != 3:
            raise ShapeError(f"Conv2D expects (C, H, W) input, got {shape}")
        c, h, w = shape
        ho = (h - layer.kernel) // layer.stride + 1
        wo = (w - layer.kernel) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"Conv2D kernel {layer.kernel} too large for {shape}")
        return (layer.filters, ho, wo)
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise ShapeError(f"MaxPool expects (C, H, W) input, got {shape}")
        c, h, w = shape
        if h < layer.kernel or w < layer.kernel:
            raise ShapeError(f"MaxPool kernel {layer.kernel} too large for {shape}")
        return (c, h // layer.kernel, w // layer.kernel)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, (Dense, OutputLogits)):
        if len(shape) != 1:
            raise ShapeError(f"{type(layer).__name__} expects a flat input, got {shape}; add Flatten")
        return (layer.out_dim if isinstance(layer, Dense) else layer.num_classes,)
    raise TypeError(f"unknown layer {layer!r}")


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers or not isinstance(self.layers[-1], OutputLogits):
            raise ValueError("last layer must be OutputLogits")
        if any(isinstance(l, OutputLogits) for l in self.layers[:-1]):
            raise ValueError("OutputLogits may only appear last")
        self.shapes()  # validates composition

    def shapes(self) -> list[tuple]:
        """Input shape of every layer followed by the output shape."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(_out_shape(layer, shapes[-1]))
        return shapes

    @property
    def num_classes(self) -> int:
        return self.layers[-1].num_classes

    def param_shapes(self) -> list[tuple]:
        out = []
        for layer, shape in zip(self.layers, self.shapes()):
            if isinstance(layer, Conv2D):
                out.append(((layer.filters, shape[0], layer.kernel, layer.kernel), (layer.filters,)))
            elif isinstance(layer, (Dense, OutputLogits)):
                n_out = _out_shape(layer, shape)[0]
                out.append(((n_out, shape[0]), (n_out,)))
            else:
                out.append(())
        return out

    def num_params(self) -> int:
        return sum(int(np.prod(s)) for shapes in self.param_shapes() for s in shapes)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [{"type": type(l).__name__, **l.__dict__} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        layers = []
        for spec in d["layers"]:
            spec = dict(spec)
            layers.append(_LAYER_TYPES[spec.pop("type")](**spec))
        return cls(tuple(d["input_shape"]), tuple(layers))

    def digest(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def mnist_desk_arch(filters: tuple = (16, 32), hidden: int = 200) -> Architecture:
    """Scaled-down MNIST network: one conv per block, narrower filters."""
    return Architecture(
        (1, 28, 28),
        (
            Conv2D(filters[0]), ReLU(), MaxPool(2),
            Conv2D(filters[1]), ReLU(), MaxPool(2),
            Flatten(), Dense(hidden), ReLU(), Dense(hidden), ReLU(), OutputLogits(10),
        ),
    )


def mnist_full_arch() -> Architecture:
    """The full-size MNIST layout: two conv blocks and two 200-unit layers."""
    return Architecture(
        (1, 28, 28),
        (
            Conv2D(32), ReLU(), Conv2D(32), ReLU(), MaxPool(2),
            Conv2D(64), ReLU(), Conv2D(64), ReLU(), MaxPool(2),
            Flatten(), Dense(200), ReLU(), Dense(200), ReLU(), OutputLogits(10),
        ),
    )


def mlp_arch(input_dim: int = 2, hidden: Sequence[int] = (16,), num_classes: int = 2) -> Architecture:
    layers: list = []
    for h in hidden:
        layers += [Dense(h), ReLU()]
    layers.append(OutputLogits(num_classes))
    return Architecture((input_dim,), tuple(layers))


# --------------------------------------------------------------------------
# model


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True, order="C")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Model:
    arch: Architecture
    params: tuple
    train_seed: int = 0

    def __post_init__(self):
        params = tuple(tuple(_freeze(np.asarray(p)) for p in layer) for layer in self.params)
        expected = self.arch.param_shapes()
        if len(params) != len(expected):
            raise ShapeError(f"expected {len(expected)} parameter groups, got {len(params)}")
        for i, (got, want) in enumerate(zip(params, expected)):
            if tuple(p.shape for p in got) != tuple(want):
                raise ShapeError(f"layer {i}: parameter shapes {[p.shape for p in got]} != {list(want)}")
            for p in got:
                if not np.all(np.isfinite(p)):
                    raise ValueError(f"layer {i}: non-finite parameter values")
        object.__setattr__(self, "params", params)

    @property
    def dtype(self):
        for layer in self.params:
            for p in layer:
                return p.dtype
        return np.dtype(np.float32)

    def astype(self, dtype) -> "Model":
        return Model(self.arch, tuple(tuple(p.astype(dtype) for p in l) for l in self.params), self.train_seed)

    def with_params(self, params) -> "Model":
        return Model(self.arch, params, self.train_seed)

    def flat_params(self) -> np.ndarray:
        parts = [p.ravel() for l in self.params for p in l]
        return np.concatenate(parts) if parts else np.zeros(0, self.dtype)

    def same_params(self, other: "Model") -> bool:
        return all(
            a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for la, lb in zip(self.params, other.params)
            for a, b in zip(la, lb)
        )


def init_model(arch: Architecture, rng: np.random.Generator, dtype=np.float32) -> Model:
    """Glorot-uniform weights, zero biases."""
    params = []
    for layer, shapes in zip(arch.layers, arch.param_shapes()):
        if not shapes:
            params.append(())
            continue
        w_shape, b_shape = shapes
        if isinstance(layer, Conv2D):
            rf = layer.kernel * layer.kernel
            fan_in, fan_out = w_shape[1] * rf, w_shape[0] * rf
        else:
            fan_out, fan_in = w_shape
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=w_shape).astype(dtype)
        params.append((w, np.zeros(b_shape, dtype=dtype)))
    return Model(arch, tuple(params))


def zero_model(arch: Architecture, dtype=np.float32) -> Model:
    return Model(arch, tuple(tuple(np.zeros(s, dtype) for s in shapes) for shapes in arch.param_shapes()))


# --------------------------------------------------------------------------
# forward / backward


def _as_batch(arch: Architecture, x: np.ndarray, dtype) -> np.ndarray:
    x = np.asarray(x)
    if x.shape == arch.input_shape:
        x = x[None]
    if x.shape[1:] != arch.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match input shape (N, {', '.join(map(str, arch.input_shape))})")
    return x.astype(dtype, copy=False)


def _conv_forward(layer: Conv2D, w, b, x):
    s = layer.stride
    win = sliding_window_view(x, (layer.kernel, layer.kernel), axis=(2, 3))[:, :, ::s, ::s]
    # win: (N, C, Ho, Wo, k, k)
    n, c, ho, wo, k, _ = win.shape
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2), cols


def _conv_backward(layer: Conv2D, w, x_shape, cols, dout, want_dx=True, want_dw=True):
    n, f, ho, wo = dout.shape
    k, s = layer.kernel, layer.stride
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = db = None
    if want_dw:
        dw = (d2.T @ cols).reshape(w.shape)
        db = d2.sum(axis=0)
    if not want_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(f, -1)).reshape(n, ho, wo, x_shape[1], k, k)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def _pool_forward(layer: MaxPool, x):
    p = layer.kernel
    n, c, h, w = x.shape
    ho, wo = h // p, w // p
    xc = x[:, :, : ho * p, : wo * p]
    blocks = xc.reshape(n, c, ho, p, wo, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, p * p)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(layer: MaxPool, x_shape, idx, dout):
    p = layer.kernel
    n, c, ho, wo = dout.shape
    blocks = np.zeros((n, c, ho, wo, p * p), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, : ho * p, : wo * p] = blocks.reshape(n, c, ho, wo, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * p, wo * p)
    return dx


def _forward(arch: Architecture, params_all, x: np.ndarray, keep: bool):
    caches = []
    for layer, params in zip(arch.layers, params_all):
        if isinstance(layer, Conv2D):
            out, cols = _conv_forward(layer, *params, x)
            cache = (x.shape, cols)
        elif isinstance(layer, MaxPool):
            out, idx = _pool_forward(layer, x)
            cache = (x.shape, idx)
        elif isinstance(layer, ReLU):
            out = np.maximum(x, 0)
            cache = x > 0
        elif isinstance(layer, Flatten):
            out = x.reshape(x.shape[0], -1)
            cache = x.shape
        else:
            w, b = params
            out = x @ w.T + b
            cache = x
        if keep:
            caches.append(cache)
        x = out
    return x, caches


def _backward(arch: Architecture, params_all, caches, dout, want_params=True, want_input=True):
    grads = [()] * len(arch.layers)
    for i in range(len(arch.layers) - 1, -1, -1):
        layer, params, cache = arch.layers[i], params_all[i], caches[i]
        need_dx = want_input or i > 0
        if isinstance(layer, Conv2D):
            x_shape, cols = cache
            dx, dw, db = _conv_backward(layer, params[0], x_shape, cols, dout, need_dx, want_params)
            if want_params:
                grads[i] = (dw, db)
        elif isinstance(layer, MaxPool):
            dx = _pool_backward(layer, *cache, dout)
        elif isinstance(layer, ReLU):
            dx = dout * cache
        elif isinstance(layer, Flatten):
            dx = dout.reshape(cache)
        else:
            w, _ = params
            x = cache
            if want_params:
                grads[i] = (dout.T @ x, dout.sum(axis=0))
            dx = dout @ w if need_dx else None
        dout = dx
    return dout, tuple(grads)


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Logits for a batch ``(N, *input_shape)`` (a single sample is promoted to N=1)."""
    x = _as_batch(model.arch, batch, model.dtype)
    logits, _ = _forward(model.arch, model.params, x, keep=False)
    return logits


def predict(model: Model, x: np.ndarray) -> np.ndarray | int:
    """Argmax labels; ``np.argmax`` already breaks ties toward the lowest index."""
    x = np.asarray(x)
    single = x.shape == model.arch.input_shape
    labels = np.argmax(forward(model, x), axis=1)
    return int(labels[0]) if single else labels


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=-1)


# --------------------------------------------------------------------------
# losses


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy (float64) and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = lse - z[np.arange(len(z)), labels]
    probs = np.exp(z - lse[:, None])
    probs[np.arange(len(z)), labels] -= 1.0
    return loss, probs


def cw_margin(logits: np.ndarray, label: np.ndarray, confidence: float, targeted: bool):
    """Clipped logit margin used by the Carlini-Wagner objective.

    Targeted (``label`` is the target t): ``max(max_{i!=t} Z_i - Z_t, -k)``.
    Untargeted (``label`` is the true class y): ``max(Z_y - max_{i!=y} Z_i, -k)``.
    Returns the per-sample loss and its gradient w.r.t. the logits.
    """
    z = np.atleast_2d(logits).astype(np.float64)
    label = np.atleast_1d(np.asarray(label))
    rows = np.arange(len(z))
    other = z.copy()
    other[rows, label] = -np.inf
    j = other.argmax(axis=1)
    raw = other[rows, j] - z[rows, label]
    if not targeted:
        raw = -raw
    loss = np.maximum(raw, -confidence)
    active = (raw > -confidence).astype(np.float64)
    grad = np.zeros_like(z)
    sign = 1.0 if targeted else -1.0
    grad[rows, j] += sign * active
    grad[rows, label] -= sign * active
    return loss, grad


@dataclass(frozen=True)
class LossSpec:
    """What scalar ``grad_input`` differentiates.

    kind="xent": cross-entropy against ``label``.
    kind="cw": clipped CW margin with ``label`` as target (targeted) or true class.
    """

    kind: str
    label: object
    confidence: float = 0.0
    targeted: bool = True

    def __post_init__(self):
        if self.kind not in ("xent", "cw"):
            raise ValueError(f"unknown loss kind {self.kind!r}")


def loss_and_dlogits(logits: np.ndarray, spec: LossSpec):
    labels = np.broadcast_to(np.asarray(spec.label, dtype=np.int64), (len(logits),))
    c = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"label/target out of range [0, {c})")
    if spec.kind == "xent":
        return softmax_xent(logits, labels)
    return cw_margin(logits, labels, spec.confidence, spec.targeted)


def grad_input(model: Model, x: np.ndarray, spec: LossSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and d(loss_i)/d(x_i).

    Batched inputs are treated as independent samples: the gradient is that of
    the summed loss, so each row only sees its own loss.
    """
    x = np.asarray(x)
    single = x.shape == model.arch.input_shape
    xb = _as_batch(model.arch, x, model.dtype)
    logits, caches = _forward(model.arch, model.params, xb, keep=True)
    loss, dz = loss_and_dlogits(logits, spec)
    dx, _ = _backward(model.arch, model.params, caches, dz.astype(model.dtype), want_params=False)
    if single:
        return loss[0], dx[0]
    return loss, dx


def grad_params(model: Model, batch: np.ndarray, labels: np.ndarray) -> tuple[float, tuple]:
    """Mean cross-entropy over the batch and its per-layer parameter gradients."""
    x = _as_batch(model.arch, batch, model.dtype)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(x) == 0:
        raise ValueError("empty batch")
    if len(labels) != len(x):
        raise ShapeError(f"{len(labels)} labels for {len(x)} samples")
    c = model.arch.num_classes
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    return _grad_params(model.arch, model.params, x, labels)


def _grad_params(arch, params, x, labels):
    logits, caches = _forward(arch, params, x, keep=True)
    loss, dz = softmax_xent(logits, labels)
    dz = (dz / len(x)).astype(x.dtype)
    _, grads = _backward(arch, params, caches, dz, want_params=True, want_input=False)
    return float(loss.mean()), grads


def mean_loss(model: Model, batch: np.ndarray, labels: np.ndarray, chunk: int = 1024) -> float:
    total = 0.0
    for i in range(0, len(batch), chunk):
        logits = forward(model, batch[i:i + chunk])
        total += softmax_xent(logits, np.asarray(labels[i:i + chunk]))[0].sum()
    return total / len(batch)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray, chunk: int = 1024) -> float:
    hits = 0
    for i in range(0, len(images), chunk):
        hits += int(np.sum(predict(model, images[i:i + chunk]) == np.asarray(labels[i:i + chunk])))
    return hits / len(images)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


def train(arch: Architecture, dataset, cfg: SgdConfig) -> Model:
    """Minibatch SGD with momentum from a seeded Glorot initialisation.

    ``dataset`` is anything with ``images`` and ``labels`` arrays.  The same
    generator seeds the initialisation and the per-epoch shuffles, so
    ``(arch, data, cfg)`` fully determines the result.
    """
    images = np.asarray(dataset.images, dtype=np.float32)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty training set")
    if labels.max() >= arch.num_classes or labels.min() < 0:
        raise ValueError(f"labels must lie in [0, {arch.num_classes})")
    rng = np.random.default_rng(cfg.seed)
    model = init_model(arch, rng)
    params = [[p.copy() for p in layer] for layer in model.params]
    velocity = [[np.zeros_like(p) for p in layer] for layer in params]
    lr, mom = np.float32(cfg.learning_rate), np.float32(cfg.momentum)
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = _grad_params(arch, params, images[idx], labels[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            total += loss * len(idx)
            for p_layer, v_layer, g_layer in zip(params, velocity, grads):
                for p, v, g in zip(p_layer, v_layer, g_layer):
                    v *= mom
                    v -= lr * g
                    p += v
        log.debug("seed %d epoch %d loss %.4f", cfg.seed, epoch, total / n)
        if not math.isfinite(total):
            raise TrainingDivergedError(epoch, total)
    try:
        return Model(arch, params, train_seed=cfg.seed)
    except ValueError as exc:
        raise TrainingDivergedError(cfg.epochs - 1, float("nan")) from exc


# --------------------------------------------------------------------------
# serialisation

MAGIC = b"RLAB"
FORMAT_VERSION = 1


def save_model(model: Model, path) -> None:
    """``RLAB`` | u16 version | u32 header length | JSON header | LE f32 blocks."""
    header = json.dumps(
        {"arch": model.arch.to_dict(), "train_seed": int(model.train_seed)}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
        fh.write(header)
        for layer in model.params:
            for p in layer:
                fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic {blob[:4]!r})")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off = 10
    header = json.loads(blob[off:off + hlen].decode("utf-8"))
    off += hlen
    arch = Architecture.from_dict(header["arch"])
    params = []
    for shapes in arch.param_shapes():
        layer = []
        for shape in shapes:
            count = int(np.prod(shape))
            if off + 4 * count > len(blob):
                raise ValueError(f"{path}: truncated parameter block")
            layer.append(np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(shape))
            off += 4 * count
        params.append(tuple(layer))
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return Model(arch, tuple(params), train_seed=header["train_seed"])
