"""Small feed-forward network engine with reverse-mode gradients.

Images are stored channels-last (N, H, W, C). Every layer exposes a forward
pass that returns a cache and a backward pass that consumes it, so a network
can return gradients for its parameters and for its input batch in one sweep.
Those input gradients are what the attacks consume.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_KINDS = ("dense", "conv2d", "relu", "maxpool2d", "dropout", "flatten", "softmax")


class ShapeError(ValueError):
    """Raised when an array does not fit the layer or network it is fed to."""


class NumericalError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


class FormatError(ValueError):
    """Raised when a serialized model or adversarial set cannot be decoded."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        kind = d.pop("kind")
        return cls(kind, d)

    def describe(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.params.items())
        return f"{self.kind}({args})"


def dense(in_features: int, out_features: int, l2: float = 0.0) -> LayerSpec:
    p = {"in_features": int(in_features), "out_features": int(out_features)}
    if l2:
        p["l2"] = float(l2)
    return LayerSpec("dense", p)


def conv2d(in_channels: int, out_channels: int, kernel_size: int,
           stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec("conv2d", {
        "in_channels": int(in_channels), "out_channels": int(out_channels),
        "kernel_size": int(kernel_size), "stride": int(stride), "padding": int(padding),
    })


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2d(window: int = 2, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool2d", {"window": int(window), "stride": int(stride or window)})


def dropout(keep_prob: float = 0.75) -> LayerSpec:
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError("keep_prob must lie in (0, 1]")
    return LayerSpec("dropout", {"keep_prob": float(keep_prob)})


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


# ---------------------------------------------------------------------------
# layer kernels


def _out_shape(layer: LayerSpec, shape: tuple) -> tuple:
    p = layer.params
    k = layer.kind
    if k == "dense":
        if shape != (p["in_features"],):
            raise ShapeError(f"{layer.describe()} expects input ({p['in_features']},), got {shape}")
        return (p["out_features"],)
    if k == "conv2d":
        if len(shape) != 3 or shape[2] != p["in_channels"]:
            raise ShapeError(f"{layer.describe()} expects (H, W, {p['in_channels']}), got {shape}")
        h, w, _ = shape
        ks, s, pad = p["kernel_size"], p["stride"], p["padding"]
        ho = (h + 2 * pad - ks) // s + 1
        wo = (w + 2 * pad - ks) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{layer.describe()} kernel larger than padded input {shape}")
        return (ho, wo, p["out_channels"])
    if k == "maxpool2d":
        if len(shape) != 3:
            raise ShapeError(f"{layer.describe()} expects (H, W, C), got {shape}")
        h, w, c = shape
        win, s = p["window"], p["stride"]
        ho, wo = (h - win) // s + 1, (w - win) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{layer.describe()} window larger than input {shape}")
        return (ho, wo, c)
    if k == "flatten":
        return (int(np.prod(shape)),)
    if k == "softmax":
        if len(shape) != 1:
            raise ShapeError(f"softmax expects a vector input, got {shape}")
        return shape
    return shape


def _init_params(layer: LayerSpec, rng: np.random.Generator, dtype) -> dict:
    p = layer.params
    if layer.kind == "dense":
        fan_in = p["in_features"]
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(p["in_features"], p["out_features"]))
        return {"W": w.astype(dtype), "b": np.zeros(p["out_features"], dtype)}
    if layer.kind == "conv2d":
        ks = p["kernel_size"]
        fan_in = ks * ks * p["in_channels"]
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(ks, ks, p["in_channels"], p["out_channels"]))
        return {"W": w.astype(dtype), "b": np.zeros(p["out_channels"], dtype)}
    return {}


def _param_shapes(layer: LayerSpec) -> dict:
    p = layer.params
    if layer.kind == "dense":
        return {"W": (p["in_features"], p["out_features"]), "b": (p["out_features"],)}
    if layer.kind == "conv2d":
        ks = p["kernel_size"]
        return {"W": (ks, ks, p["in_channels"], p["out_channels"]), "b": (p["out_channels"],)}
    return {}


def _im2col(x: np.ndarray, ks: int, stride: int, pad: int) -> tuple[np.ndarray, tuple]:
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (ks, ks), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (N, Ho, Wo, C, ks, ks)
    n, ho, wo = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, -1)
    return cols, (n, ho, wo)


def _conv_forward(x, prm, p):
    ks, s, pad = p["kernel_size"], p["stride"], p["padding"]
    cols, (n, ho, wo) = _im2col(x, ks, s, pad)
    w = prm["W"].reshape(-1, p["out_channels"])
    out = cols @ w + prm["b"]
    return out.reshape(n, ho, wo, -1), (x.shape, cols)


def _conv_backward(dout, cache, prm, p, need_dx, need_params=True):
    x_shape, cols = cache
    ks, s, pad = p["kernel_size"], p["stride"], p["padding"]
    n, ho, wo, co = dout.shape
    d2 = dout.reshape(-1, co)
    grads = {}
    if need_params:
        grads = {"W": (cols.T @ d2).reshape(prm["W"].shape), "b": d2.sum(axis=0)}
    if not need_dx:
        return None, grads
    wmat = prm["W"].reshape(ks * ks, -1, co)  # (ks*ks, C, co)
    _, h, w, c = x_shape
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dout.dtype)
    for i in range(ks):
        for j in range(ks):
            dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += (d2 @ wmat[i * ks + j].T).reshape(n, ho, wo, c)
    if pad:
        dxp = dxp[:, pad:pad + h, pad:pad + w, :]
    return dxp, grads


def _pool_forward(x, p):
    win, s = p["window"], p["stride"]
    n, h, w, c = x.shape
    ho, wo = (h - win) // s + 1, (w - win) // s + 1
    view = np.lib.stride_tricks.sliding_window_view(x, (win, win), axis=(1, 2))
    view = view[:, ::s, ::s][:, :ho, :wo]  # (N, Ho, Wo, C, win, win)
    flat = view.reshape(n, ho, wo, c, win * win)
    arg = flat.argmax(axis=-1)  # first max wins ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def _pool_backward(dout, cache, p):
    x_shape, arg = cache
    win, s = p["window"], p["stride"]
    n, ho, wo, c = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(win):
        for j in range(win):
            mask = arg == i * win + j
            dx[:, i:i + s * ho:s, j:j + s * wo:s, :] += np.where(mask, dout, 0)
    return dx


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# network


def validate_spec(spec: Sequence[LayerSpec], input_shape: tuple) -> list[tuple]:
    """Walk the layer stack and return the activation shape after each layer."""
    shape = tuple(input_shape)
    shapes = []
    for i, layer in enumerate(spec):
        if layer.kind == "softmax" and i != len(spec) - 1:
            raise ShapeError(f"layer {i}: softmax may only appear as the final layer")
        try:
            shape = _out_shape(layer, shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {i}: {exc}") from None
        shapes.append(shape)
    if len(shape) != 1:
        raise ShapeError(f"network output must be a vector, got {shape}")
    return shapes


class Network:
    """An ordered stack of layers plus its parameters.

    ``forward`` returns ``(probs, logits)`` where logits are the activations
    feeding the final softmax. If the spec has no trailing softmax layer the
    probabilities are still computed from the last activations.
    """

    def __init__(self, spec: Sequence[LayerSpec], input_shape: Sequence[int],
                 params: list[dict], id: str = "net"):
        self.spec = tuple(spec)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.shapes = validate_spec(self.spec, self.input_shape)
        if len(params) != len(self.spec):
            raise ShapeError("one parameter dict per layer is required")
        for i, (layer, prm) in enumerate(zip(self.spec, params)):
            want = _param_shapes(layer)
            got = {k: tuple(v.shape) for k, v in prm.items()}
            if got != want:
                raise ShapeError(f"layer {i} ({layer.describe()}): params {got} != {want}")
        self.params = params
        self.id = id

    @classmethod
    def create(cls, spec: Sequence[LayerSpec], input_shape: Sequence[int],
               seed: int = 0, id: str = "net", dtype=DEFAULT_DTYPE) -> "Network":
        rng = np.random.default_rng(seed)
        validate_spec(spec, input_shape)
        params = [_init_params(layer, rng, dtype) for layer in spec]
        return cls(spec, input_shape, params, id)

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def dtype(self):
        for prm in self.params:
            for v in prm.values():
                return v.dtype
        return np.dtype(DEFAULT_DTYPE)

    def astype(self, dtype) -> "Network":
        params = [{k: v.astype(dtype) for k, v in prm.items()} for prm in self.params]
        return Network(self.spec, self.input_shape, params, self.id)

    def copy(self, id: str | None = None) -> "Network":
        params = [{k: v.copy() for k, v in prm.items()} for prm in self.params]
        return Network(self.spec, self.input_shape, params, self.id if id is None else id)

    def same_architecture(self, other: "Network") -> bool:
        return self.spec == other.spec and self.input_shape == other.input_shape

    def _check_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"network {self.id!r} expects batches of shape (n, {', '.join(map(str, self.input_shape))}),"
                f" got {x.shape}")
        return x.astype(self.dtype, copy=False)

    @np.errstate(over="ignore", invalid="ignore")  # reported as NumericalError
    def _run(self, x: np.ndarray, rng: np.random.Generator | None, keep_cache: bool):
        caches = []
        for i, (layer, prm) in enumerate(zip(self.spec, self.params)):
            k, p = layer.kind, layer.params
            if k == "softmax":
                caches.append(None)
                continue
            if k == "dense":
                cache = x
                x = x @ prm["W"] + prm["b"]
            elif k == "conv2d":
                x, cache = _conv_forward(x, prm, p)
            elif k == "relu":
                cache = x > 0
                x = x * cache
            elif k == "maxpool2d":
                x, cache = _pool_forward(x, p)
            elif k == "flatten":
                cache = x.shape
                x = x.reshape(x.shape[0], -1)
            elif k == "dropout":
                if rng is None or p["keep_prob"] >= 1.0:
                    cache = None
                else:
                    keep = p["keep_prob"]
                    cache = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
                    x = x * cache
            if not np.all(np.isfinite(x)):
                raise NumericalError(f"non-finite activation after layer {i} ({layer.describe()})")
            caches.append(cache if keep_cache else None)
        return x, caches

    def forward(self, x: np.ndarray, rng: np.random.Generator | None = None):
        """Return ``(probs, logits)``; ``rng`` enables dropout (training mode)."""
        x = self._check_batch(x)
        logits, _ = self._run(x, rng, keep_cache=False)
        return _softmax(logits), logits

    def predict(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        x = self._check_batch(x)
        out = [self.forward(x[i:i + batch_size])[1].argmax(axis=1)
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    @np.errstate(over="ignore", invalid="ignore")  # reported as NumericalError
    def _backprop(self, dlogits, caches, need_dx=True, need_params=True):
        grads: list[dict] = [{} for _ in self.spec]
        d = dlogits
        for i in range(len(self.spec) - 1, -1, -1):
            layer, prm, cache = self.spec[i], self.params[i], caches[i]
            k, p = layer.kind, layer.params
            last = i == 0 and not need_dx
            if k == "softmax":
                continue
            if k == "dense":
                if need_params:
                    grads[i] = {"W": cache.T @ d, "b": d.sum(axis=0)}
                    l2 = p.get("l2", 0.0)
                    if l2:
                        grads[i]["W"] = grads[i]["W"] + l2 * prm["W"]
                d = None if last else d @ prm["W"].T
            elif k == "conv2d":
                d, g = _conv_backward(d, cache, prm, p, need_dx=not last, need_params=need_params)
                if need_params:
                    grads[i] = g
            elif k == "relu":
                d = d * cache
            elif k == "maxpool2d":
                d = _pool_backward(d, cache, p)
            elif k == "flatten":
                d = d.reshape(cache)
            elif k == "dropout":
                if cache is not None:
                    d = d * cache
            if d is not None and not np.all(np.isfinite(d)):
                raise NumericalError(f"non-finite gradient at layer {i} ({layer.describe()})")
            if last:
                break
        return d, grads

    def vjp(self, x: np.ndarray, rng: np.random.Generator | None = None):
        """Forward pass plus a pullback mapping logit cotangents to input gradients."""
        x = self._check_batch(x)
        logits, caches = self._run(x, rng, keep_cache=True)

        def pullback(dlogits: np.ndarray) -> np.ndarray:
            d, _ = self._backprop(np.asarray(dlogits, dtype=logits.dtype), caches,
                                  need_dx=True, need_params=False)
            return d

        return _softmax(logits), logits, pullback

    def l2_penalty(self) -> float:
        total = 0.0
        for layer, prm in zip(self.spec, self.params):
            l2 = layer.params.get("l2", 0.0) if layer.kind == "dense" else 0.0
            if l2:
                total += 0.5 * l2 * float(np.sum(prm["W"].astype(np.float64) ** 2))
        return total

    def num_parameters(self) -> int:
        return sum(v.size for prm in self.params for v in prm.values())

    def __repr__(self):
        layers = ", ".join(l.describe() for l in self.spec)
        return f"Network(id={self.id!r}, input_shape={self.input_shape}, [{layers}])"


@dataclass
class Gradients:
    params: list[dict]
    input: np.ndarray | None


def forward(net: Network, batch: np.ndarray):
    """Evaluation-mode forward pass returning ``(probs, logits)``."""
    return net.forward(batch)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    logp = _log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), labels], dtype=np.float64))
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1
    return loss, dlogits / n


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError("labels must be a vector")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.int64, copy=False)


def backward(net: Network, batch: np.ndarray, labels, rng: np.random.Generator | None = None,
             need_input: bool = True) -> tuple[float, Gradients]:
    """Mean cross-entropy loss and its exact gradients.

    Gradients cover every parameter and, unless ``need_input`` is False,
    the input batch as well. Dense layers with an ``l2`` coefficient add
    ``0.5 * l2 * ||W||^2`` to the loss.
    """
    batch = net._check_batch(batch)
    if len(batch) == 0:
        raise ShapeError("empty batch")
    labels = _check_labels(labels, net.num_classes)
    if len(labels) != len(batch):
        raise ShapeError(f"{len(labels)} labels for a batch of {len(batch)}")
    logits, caches = net._run(batch, rng, keep_cache=True)
    loss, dlogits = cross_entropy(logits, labels)
    loss += net.l2_penalty()
    dx, grads = net._backprop(dlogits.astype(logits.dtype, copy=False), caches,
                              need_dx=need_input, need_params=True)
    return loss, Gradients(grads, dx)


def accuracy(clf, x: np.ndarray, y: np.ndarray | None = None) -> float:
    """Fraction of examples whose argmax class equals the stored label.

    ``x`` may be a Dataset-like object carrying ``x`` and ``y`` attributes.
    Ties in the argmax resolve to the lowest class index.
    """
    if y is None:
        x, y = x.x, x.y
    if len(x) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(clf.predict(x) == np.asarray(y)))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    batch_size: int = 128
    max_epochs: int = 10
    early_stop_min_delta: float = 0.001
    early_stop_patience: int = 5
    rng_seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.early_stop_min_delta < 0:
            raise ValueError("early_stop_min_delta must be nonnegative")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class EarlyStopping:
    """Stop after ``patience`` epochs without a ``min_delta`` improvement on the best loss.

    ``best`` is the lowest loss seen so far, including epochs whose gain was
    too small to count. A long run of tiny gains therefore never resets the
    counter, even once their sum exceeds ``min_delta``.
    """

    def __init__(self, min_delta: float = 0.001, patience: int = 5):
        self.min_delta = min_delta
        self.patience = patience
        self.best = math.inf
        self.wait = 0

    def update(self, loss: float) -> bool:
        """Record one epoch's validation loss; return True when training should stop."""
        if loss < self.best - self.min_delta:
            self.wait = 0
        else:
            self.wait += 1
        self.best = min(self.best, loss)
        return self.wait >= self.patience


@dataclass
class TrainedReport:
    epochs: int
    train_loss: float
    val_loss: float
    stop_reason: str
    val_history: list = field(default_factory=list)


class _Adam:
    def __init__(self, cfg: TrainConfig, params):
        self.cfg = cfg
        self.t = 0
        self.m = [{k: np.zeros_like(v) for k, v in prm.items()} for prm in params]
        self.v = [{k: np.zeros_like(v) for k, v in prm.items()} for prm in params]

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        lr = c.learning_rate * math.sqrt(1 - c.beta2 ** self.t) / (1 - c.beta1 ** self.t)
        for prm, g, m, v in zip(params, grads, self.m, self.v):
            for k in prm:
                m[k] *= c.beta1
                m[k] += (1 - c.beta1) * g[k]
                v[k] *= c.beta2
                v[k] += (1 - c.beta2) * g[k] * g[k]
                prm[k] -= (lr * m[k] / (np.sqrt(v[k]) + c.eps)).astype(prm[k].dtype)


class _SGD:
    def __init__(self, cfg: TrainConfig, params):
        self.lr = cfg.learning_rate

    def step(self, params, grads):
        for prm, g in zip(params, grads):
            for k in prm:
                prm[k] -= (self.lr * g[k]).astype(prm[k].dtype)


def mean_loss(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 1024) -> float:
    total = 0.0
    for i in range(0, len(x), batch_size):
        _, logits = net.forward(x[i:i + batch_size])
        logp = _log_softmax(logits.astype(np.float64))
        total -= logp[np.arange(len(logits)), y[i:i + batch_size]].sum()
    return total / len(x) + net.l2_penalty()


def train(net: Network, train_set, cfg: TrainConfig,
          log: Callable[[str], Any] | None = None) -> TrainedReport:
    """Train ``net`` in place with mini-batches and validation early stopping.

    A validation split of ``cfg.validation_fraction`` is drawn without
    replacement from ``train_set`` using ``cfg.rng_seed``; the same seed
    drives shuffling and dropout, so reruns are bit-identical.
    """
    x, y = np.asarray(train_set.x), np.asarray(train_set.y)
    n = len(x)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    _check_labels(y, net.num_classes)
    n_val = max(1, int(round(n * cfg.validation_fraction)))
    if n - n_val < 1:
        raise ValueError("validation split leaves no training examples")
    if cfg.batch_size > n - n_val:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds training-set size {n - n_val}")
    rng = np.random.default_rng(cfg.rng_seed)
    perm = rng.permutation(n)
    val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    xv, yv = x[val_idx], y[val_idx]
    xt, yt = x[tr_idx], y[tr_idx]

    opt = (_Adam if cfg.optimizer == "adam" else _SGD)(cfg, net.params)
    stopper = EarlyStopping(cfg.early_stop_min_delta, cfg.early_stop_patience)
    history = []
    stop_reason = "max_epochs"
    train_loss = math.nan
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(xt))
        running, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = backward(net, xt[idx], yt[idx], rng=rng, need_input=False)
            opt.step(net.params, grads.params)
            running += loss * len(idx)
            seen += len(idx)
        train_loss = running / seen
        val_loss = mean_loss(net, xv, yv)
        history.append(val_loss)
        if log is not None:
            log(f"[{net.id}] epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f}")
        if stopper.update(val_loss):
            stop_reason = "early_stop"
            break
    return TrainedReport(epoch, float(train_loss), float(history[-1]), stop_reason, history)


# ---------------------------------------------------------------------------
# serialization

MODEL_MAGIC = b"MULDEFNN"
MODEL_VERSION = 1


def _pack(magic: bytes, version: int, header: dict, blocks: Sequence[np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<II", version, len(head)))
    buf.write(head)
    for b in blocks:
        buf.write(np.ascontiguousarray(b).astype("<f4").tobytes())
    return buf.getvalue()


def _unpack(data: bytes, magic: bytes, version: int) -> tuple[dict, memoryview]:
    data = memoryview(bytes(data))
    if bytes(data[:len(magic)]) != magic:
        raise FormatError("bad magic string")
    off = len(magic)
    if len(data) < off + 8:
        raise FormatError("truncated header")
    ver, hlen = struct.unpack("<II", data[off:off + 8])
    if ver != version:
        raise FormatError(f"unsupported format version {ver} (expected {version})")
    off += 8
    if len(data) < off + hlen:
        raise FormatError("truncated header")
    try:
        header = json.loads(bytes(data[off:off + hlen]).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    return header, data[off + hlen:]


def save(net: Network) -> bytes:
    """Serialize a network: magic, version, JSON spec header, little-endian float32 blocks."""
    header = {
        "id": net.id,
        "input_shape": list(net.input_shape),
        "spec": [l.to_dict() for l in net.spec],
    }
    blocks = [prm[k] for prm in net.params for k in sorted(prm)]
    return _pack(MODEL_MAGIC, MODEL_VERSION, header, blocks)


def load(data: bytes) -> Network:
    header, body = _unpack(data, MODEL_MAGIC, MODEL_VERSION)
    try:
        spec = [LayerSpec.from_dict(d) for d in header["spec"]]
        input_shape = tuple(header["input_shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed spec header: {exc}") from None
    validate_spec(spec, input_shape)
    need = sum(int(np.prod(s)) for l in spec for s in _param_shapes(l).values())
    have = len(body) // 4
    if len(body) % 4 or have != need:
        raise ShapeError(f"spec requires {need} float32 values, payload holds {len(body) / 4:g}")
    flat = np.frombuffer(body, dtype="<f4")
    params, off = [], 0
    for layer in spec:
        prm = {}
        for k, shape in sorted(_param_shapes(layer).items()):
            size = int(np.prod(shape))
            prm[k] = flat[off:off + size].reshape(shape).astype(np.float32)
            off += size
        params.append(prm)
    return Network(spec, input_shape, params, header.get("id", "net"))
