"""Small numpy network with hand-written reverse-mode gradients.

Layers are applied in sequence; every trainable tensor is a view into one flat
parameter vector so optimizers and EMA updates work on a single array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import resibn
from .resibn import NormState

PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"RESITTA-CHECKPOINT v1\n"


class NormMode(str, Enum):
    TRAIN_BATCH = "train_batch"
    EVAL_TARGET = "eval_target"
    EVAL_SOURCE = "eval_source"


class ShapeError(ValueError):
    pass


class Layer:
    kind = "layer"

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return []

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def describe(self) -> dict:
        return {"kind": self.kind}

    def init_params(self, p: dict[str, np.ndarray], rng: np.random.Generator) -> None:
        pass

    def forward(self, x, p, mode, hook=None):
        raise NotImplementedError

    def backward(self, g, p, dp):
        raise NotImplementedError


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        self.in_features = in_features
        self.out_features = out_features

    def param_shapes(self):
        return [("weight", (self.out_features, self.in_features)), ("bias", (self.out_features,))]

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"expects input ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def describe(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}

    def init_params(self, p, rng):
        p["weight"][...] = rng.normal(0.0, np.sqrt(2.0 / self.in_features), p["weight"].shape)
        p["bias"][...] = 0.0

    def forward(self, x, p, mode, hook=None):
        self._x = x
        return x @ p["weight"].T + p["bias"]

    def backward(self, g, p, dp):
        dp["weight"] += g.T @ self._x
        dp["bias"] += g.sum(axis=0)
        return g @ p["weight"]


class Conv2d(Layer):
    """Stride-1 convolution with an odd square kernel and zero 'same' padding."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3):
        if kernel % 2 != 1 or kernel < 1:
            raise ValueError(f"kernel must be odd and positive, got {kernel}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel

    def param_shapes(self):
        k = self.kernel
        return [
            ("weight", (self.out_channels, self.in_channels, k, k)),
            ("bias", (self.out_channels,)),
        ]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"expects input ({self.in_channels}, H, W), got {in_shape}")
        return (self.out_channels,) + tuple(in_shape[1:])

    def describe(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
        }

    def init_params(self, p, rng):
        fan_in = self.in_channels * self.kernel**2
        p["weight"][...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), p["weight"].shape)
        p["bias"][...] = 0.0

    def _cols(self, x):
        pad = self.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))
        # (B, Cin, H, W, k, k) -> (B, H, W, Cin*k*k)
        b, c, h, w = x.shape
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h, w, c * self.kernel**2)

    def forward(self, x, p, mode, hook=None):
        self._xshape = x.shape
        self._cols_cache = self._cols(x)
        wmat = p["weight"].reshape(self.out_channels, -1)
        out = self._cols_cache @ wmat.T + p["bias"]
        return out.transpose(0, 3, 1, 2)

    def backward(self, g, p, dp):
        b, c, h, w = self._xshape
        k = self.kernel
        pad = k // 2
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        cols = self._cols_cache.reshape(-1, c * k * k)
        dp["weight"] += (g2.T @ cols).reshape(dp["weight"].shape)
        dp["bias"] += g2.sum(axis=0)
        dcols = (g2 @ p["weight"].reshape(self.out_channels, -1)).reshape(b, h, w, c, k, k)
        dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + h, j : j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, pad : pad + h, pad : pad + w]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, p, mode, hook=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype)

    def backward(self, g, p, dp):
        return np.where(self._mask, g, 0).astype(g.dtype)


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, p, mode, hook=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g, p, dp):
        return g.reshape(self._shape)


class BatchNorm(Layer):
    """Normalization slot holding a :class:`NormState`.

    ``state.gamma``/``state.beta`` are bound to the network's parameter views;
    the statistics are plain arrays that only change through ``resibn``.
    """

    kind = "batchnorm"

    def __init__(self, channels: int, eps: float = resibn.DEFAULT_EPS):
        self.channels = channels
        self.eps = eps
        self.state: NormState | None = None
        self.last_batch_stats: resibn.BatchStats | None = None

    def param_shapes(self):
        return [("gamma", (self.channels,)), ("beta", (self.channels,))]

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeError(f"expects {self.channels} channels, got {in_shape}")
        return in_shape

    def describe(self):
        return {"kind": self.kind, "channels": self.channels, "eps": self.eps}

    def init_params(self, p, rng):
        p["gamma"][...] = 1.0
        p["beta"][...] = 0.0

    def bind(self, p):
        c = self.channels
        if self.state is None:
            self.state = NormState(
                np.zeros(c), np.ones(c), np.zeros(c), np.ones(c), p["gamma"], p["beta"], eps=self.eps
            )
        else:
            self.state = replace(self.state, gamma=p["gamma"], beta=p["beta"])

    def forward(self, x, p, mode, hook=None):
        mode = NormMode(mode)
        self._mode = mode
        if mode is NormMode.TRAIN_BATCH:
            bs = resibn.compute_batch_stats(x)
            self.last_batch_stats = bs
            mu, var = bs.mu_b, bs.var_b
        elif mode is NormMode.EVAL_TARGET:
            if hook is not None:
                hook(self, x)
            mu, var = self.state.mu_t, self.state.var_t
        else:
            mu, var = self.state.mu_s, self.state.var_s
        self._inv = (1.0 / np.sqrt(np.asarray(var, dtype=np.float64) + self.eps)).astype(x.dtype)
        self._xhat = resibn.standardize(x, mu, var, self.eps)
        return resibn.affine(self._xhat, p["gamma"], p["beta"])

    def backward(self, g, p, dp):
        axes = (0,) + tuple(range(2, g.ndim))
        shape = [1, -1] + [1] * (g.ndim - 2)
        xhat = self._xhat
        dp["gamma"] += (g * xhat).sum(axis=axes)
        dp["beta"] += g.sum(axis=axes)
        dxhat = g * p["gamma"].astype(g.dtype).reshape(shape)
        inv = self._inv.reshape(shape)
        if self._mode is not NormMode.TRAIN_BATCH:
            # statistics are constants here
            return dxhat * inv
        m = g.size // g.shape[1]
        s1 = dxhat.sum(axis=axes).reshape(shape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(shape)
        return (inv / m) * (m * dxhat - s1 - xhat * s2)


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, Flatten, BatchNorm)}


def layer_from_desc(desc: dict) -> Layer:
    desc = dict(desc)
    kind = desc.pop("kind")
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**desc)


@dataclass
class GradientTape:
    grads: np.ndarray

    def view(self, net: Network, layer_index: int, name: str) -> np.ndarray:
        return self.grads[net.slices[layer_index][name]].reshape(net.shapes[layer_index][name])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.grads)))


class Network:
    def __init__(
        self,
        layers: list[Layer],
        input_shape: tuple[int, ...],
        num_classes: int,
        dtype=np.float32,
        seed: int | None = 0,
    ):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)

        self.slices: list[dict[str, slice]] = []
        self.shapes: list[dict[str, tuple]] = []
        shape = self.input_shape
        offset = 0
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            sl, sh = {}, {}
            for name, pshape in layer.param_shapes():
                n = int(np.prod(pshape))
                sl[name] = slice(offset, offset + n)
                sh[name] = pshape
                offset += n
            self.slices.append(sl)
            self.shapes.append(sh)
        if shape != (num_classes,):
            raise ShapeError(f"network output {shape} does not match num_classes={num_classes}")

        self.params = np.zeros(offset, dtype=self.dtype)
        self._views = [self._param_views(i) for i in range(len(self.layers))]
        rng = np.random.default_rng(seed)
        for layer, p in zip(self.layers, self._views):
            layer.init_params(p, rng)
            if isinstance(layer, BatchNorm):
                layer.bind(p)
        self._recorded = False

    def _param_views(self, i: int) -> dict[str, np.ndarray]:
        return {name: self.params[s].reshape(self.shapes[i][name]) for name, s in self.slices[i].items()}

    @property
    def num_params(self) -> int:
        return self.params.size

    @property
    def norm_layers(self) -> list[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def param_mask(self, kinds: tuple[str, ...]) -> np.ndarray:
        mask = np.zeros(self.num_params, dtype=bool)
        for layer, sl in zip(self.layers, self.slices):
            if layer.kind in kinds:
                for s in sl.values():
                    mask[s] = True
        return mask

    def forward(self, x, norm_mode=NormMode.EVAL_SOURCE, stats_hook=None) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"layer 0 ({self.layers[0].kind}): expected input (B, *{self.input_shape}), got {x.shape}")
        for i, (layer, p) in enumerate(zip(self.layers, self._views)):
            x = layer.forward(x, p, norm_mode, stats_hook)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite activation after layer {i} ({layer.kind})")
        self._recorded = True
        return x

    __call__ = forward

    def backward(self, loss_grad) -> GradientTape:
        if not self._recorded:
            raise RuntimeError("backward called without a recorded forward pass")
        tape = GradientTape(np.zeros_like(self.params))
        g = np.asarray(loss_grad, dtype=self.dtype)
        for i in range(len(self.layers) - 1, -1, -1):
            dp = {n: tape.grads[s].reshape(self.shapes[i][n]) for n, s in self.slices[i].items()}
            g = self.layers[i].backward(g, self._views[i], dp)
        self._recorded = False
        return tape

    def copy(self) -> Network:
        layers = [layer_from_desc(d) for d in self.describe()]
        clone = Network(layers, self.input_shape, self.num_classes, dtype=self.dtype, seed=None)
        clone.params[:] = self.params
        for mine, theirs in zip(self.norm_layers, clone.norm_layers):
            theirs.state = replace(
                mine.state,
                mu_s=mine.state.mu_s.copy(),
                sigma_s=mine.state.sigma_s.copy(),
                mu_t=mine.state.mu_t.copy(),
                sigma_t=mine.state.sigma_t.copy(),
                gamma=theirs.state.gamma,
                beta=theirs.state.beta,
            )
        return clone

    def describe(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p_target, q_pred) -> float:
    p = np.asarray(p_target, dtype=np.float64)
    q = np.asarray(q_pred, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distribution length mismatch: {p.shape} vs {q.shape}")
    return float(-np.sum(p * np.log(np.maximum(q, PROB_FLOOR))))


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE between target distributions (or int labels) and softmax(logits).

    Returns the loss and its gradient w.r.t. the logits.
    """
    b, c = logits.shape
    if targets.ndim == 1:
        t = np.zeros((b, c), dtype=np.float64)
        t[np.arange(b), targets] = 1.0
    else:
        t = targets.astype(np.float64)
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logq = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-(t * logq).sum() / b)
    grad = (np.exp(logq) * t.sum(axis=1, keepdims=True) - t) / b
    return loss, grad.astype(logits.dtype)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def zeros(cls, n: int, **kw) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(net: Network, tape: GradientTape, state: AdamState, lr: float, mask=None) -> bool:
    """Apply one Adam update in place. Returns False when the step was skipped."""
    if state.m.shape != net.params.shape:
        raise ValueError("optimizer state does not match parameter count")
    g = tape.grads.astype(np.float64)
    if not np.all(np.isfinite(g)):
        state.skipped += 1
        return False
    if mask is not None:
        g = np.where(mask, g, 0.0)
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = state.m / (1 - state.beta1**state.t)
    vhat = state.v / (1 - state.beta2**state.t)
    update = lr * mhat / (np.sqrt(vhat) + state.eps)
    if mask is not None:
        update = np.where(mask, update, 0.0)
    net.params -= update.astype(net.dtype)
    return True


def toy_backbone(in_channels: int = 3, size: int = 8, num_classes: int = 10, seed: int = 0, dtype=np.float32) -> Network:
    layers = [
        Conv2d(in_channels, 8, 3),
        BatchNorm(8),
        ReLU(),
        Conv2d(8, 16, 3),
        BatchNorm(16),
        ReLU(),
        Flatten(),
        Dense(16 * size * size, num_classes),
    ]
    return Network(layers, (in_channels, size, size), num_classes, dtype=dtype, seed=seed)


# -- checkpoints -------------------------------------------------------------

NORM_FIELDS = ("mu_s", "sigma_s", "mu_t", "sigma_t")


def checkpoint_bytes(net: Network) -> bytes:
    header = {
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "layers": net.describe(),
        "param_count": net.num_params,
        "norm_layers": [
            {"channels": bn.channels, "nu_b": bn.state.nu_b, "eta_t": bn.state.eta_t, "eps": bn.eps}
            for bn in net.norm_layers
        ],
        "norm_fields": list(NORM_FIELDS),
    }
    parts = [CHECKPOINT_MAGIC, json.dumps(header, sort_keys=True).encode() + b"\n"]
    parts.append(net.params.astype("<f4").tobytes())
    for bn in net.norm_layers:
        for f in NORM_FIELDS:
            parts.append(getattr(bn.state, f).astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def checkpoint_from_bytes(blob: bytes) -> Network:
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a resitta checkpoint")
    rest = blob[len(CHECKPOINT_MAGIC) :]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    payload = memoryview(rest[nl + 1 :])
    layers = [layer_from_desc(d) for d in header["layers"]]
    net = Network(layers, tuple(header["input_shape"]), header["num_classes"], seed=None)
    n = header["param_count"]
    if n != net.num_params:
        raise ValueError(f"parameter count mismatch: header {n}, architecture {net.num_params}")
    off = 0

    def take(k):
        nonlocal off
        a = np.frombuffer(payload[off : off + 4 * k], dtype="<f4")
        if a.size != k:
            raise ValueError("truncated checkpoint payload")
        off += 4 * k
        return a

    net.params[:] = take(n)
    for bn, meta in zip(net.norm_layers, header["norm_layers"]):
        vals = {f: take(bn.channels).astype(np.float64) for f in NORM_FIELDS}
        bn.state = replace(bn.state, nu_b=meta["nu_b"], eta_t=meta["eta_t"], **vals)
    if off != len(payload):
        raise ValueError("trailing bytes in checkpoint")
    return net


def load_checkpoint(path) -> Network:
    return checkpoint_from_bytes(Path(path).read_bytes())
