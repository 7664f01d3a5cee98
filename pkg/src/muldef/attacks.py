"""White-box attacks (FGSM, C&W-L2) and the substitute-model black-box pipeline.

Every attack works against any differentiable classifier exposing
``vjp(x) -> (probs, logits, pullback)`` and an ``id``; both
:class:`muldef.nn.Network` and :class:`muldef.defense.MergedModel` qualify.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .data import Dataset, sample_subset
from .nn import FormatError, Network, NumericalError, TrainConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FgsmConfig:
    eps: float = 0.3
    clip_min: float = 0.0
    clip_max: float = 1.0
    iterations: int = 1
    batch_size: int = 500

    name = "fgsm"

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError(f"eps must be nonnegative, got {self.eps}")
        if not self.clip_min < self.clip_max:
            raise ValueError("clip_min must be below clip_max")
        if self.eps > self.clip_max - self.clip_min:
            raise ValueError("eps exceeds the pixel range")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    def to_dict(self) -> dict:
        return {"name": self.name, **asdict(self)}


@dataclass(frozen=True)
class CwConfig:
    confidence: float = 0.01
    max_iterations: int = 300
    c_init: float = 1.0
    binary_search_steps: int = 5
    step_size: float = 0.01
    clip_min: float = 0.0
    clip_max: float = 1.0
    abort_early: bool = True
    optimizer: str = "adam"
    batch_size: int = 500

    name = "cw"

    def __post_init__(self):
        if self.confidence < 0:
            raise ValueError(f"confidence must be nonnegative, got {self.confidence}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.c_init <= 0:
            raise ValueError("c_init must be positive")
        if self.binary_search_steps < 0:
            raise ValueError("binary_search_steps must be nonnegative")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not self.clip_min < self.clip_max:
            raise ValueError("clip_min must be below clip_max")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError("optimizer must be 'gd' or 'adam'")

    def to_dict(self) -> dict:
        return {"name": self.name, **asdict(self)}


def attack_from_dict(d: dict):
    d = dict(d)
    name = d.pop("name")
    if name == "fgsm":
        return FgsmConfig(**d)
    if name == "cw":
        return CwConfig(**d)
    raise ValueError(f"unknown attack {name!r}")


@dataclass
class AdversarialSet:
    """Adversarial images paired with the labels of the normals they came from."""

    x: np.ndarray
    y: np.ndarray
    index: np.ndarray
    source_model_id: str
    attack: FgsmConfig | CwConfig
    scenario: str = "whitebox"
    failed: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    def as_dataset(self, num_classes: int = 10, name: str | None = None) -> Dataset:
        return Dataset(self.x, self.y, num_classes, name or f"adv[{self.source_model_id}]", "train")


def _pixels_from_dataset(normals) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(normals.x, dtype=np.float32), np.asarray(normals.y, dtype=np.int64)


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def _ce_input_grad(clf, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    probs, logits, pullback = clf.vjp(x)
    dlogits = probs.astype(logits.dtype, copy=True)
    dlogits[np.arange(len(y)), y] -= 1
    return pullback(dlogits / len(y))


def fgsm(clf, normals, cfg: FgsmConfig) -> AdversarialSet:
    """x' = clip(x + eps * sign(grad_x J(x, y))) with J the cross-entropy loss.

    With ``cfg.iterations > 1`` the step is split into equal sub-steps and
    each iterate is projected back into the eps-ball around x.
    """
    x, y = _pixels_from_dataset(normals)
    out = np.empty_like(x)
    step = np.float32(cfg.eps / cfg.iterations)
    for sl in _chunks(len(x), cfg.batch_size):
        x0 = x[sl]
        xa = x0.copy()
        for _ in range(cfg.iterations):
            g = _ce_input_grad(clf, xa, y[sl])
            xa = xa + step * np.sign(g).astype(np.float32)
            if cfg.iterations > 1:
                xa = np.clip(xa, x0 - np.float32(cfg.eps), x0 + np.float32(cfg.eps))
            xa = np.clip(xa, cfg.clip_min, cfg.clip_max).astype(np.float32)
        out[sl] = xa
    return AdversarialSet(out, y.copy(), np.arange(len(y)), clf.id, cfg)


# ---------------------------------------------------------------------------
# Carlini & Wagner L2


def _margin(logits: np.ndarray, y: np.ndarray):
    """Return (Z_y - max_{i != y} Z_i, index of the best other class)."""
    n = len(y)
    real = logits[np.arange(n), y]
    other = logits.copy()
    other[np.arange(n), y] = -np.inf
    j = other.argmax(axis=1)
    return real - other[np.arange(n), j], j


def _cw_success(logits: np.ndarray, y: np.ndarray, kappa: float) -> np.ndarray:
    z = logits.astype(np.float64, copy=True)
    z[np.arange(len(y)), y] += kappa
    return z.argmax(axis=1) != y


@np.errstate(over="ignore", invalid="ignore")
def _cw_chunk(clf, x0: np.ndarray, y: np.ndarray, cfg: CwConfig):
    n = len(x0)
    lo, hi = np.float32(cfg.clip_min), np.float32(cfg.clip_max)
    half = (hi - lo) / 2
    kappa = cfg.confidence
    axes = tuple(range(1, x0.ndim))

    best_l2 = np.full(n, np.inf)
    best_x = x0.copy()
    dead = np.zeros(n, dtype=bool)
    diagnostics: dict[int, str] = {}

    _, logits0 = clf.forward(x0)
    hit0 = _cw_success(logits0, y, kappa)
    best_l2[hit0] = 0.0

    w0 = np.arctanh(np.clip((x0 - lo) / half - 1, -1, 1) * np.float32(0.999999)).astype(np.float32)
    const = np.full(n, cfg.c_init)
    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    check_every = max(1, cfg.max_iterations // 10)

    for _ in range(max(1, cfg.binary_search_steps)):
        rows = np.flatnonzero(~hit0 & ~dead)
        if not len(rows):
            break
        w = w0[rows].copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        prev = np.full(len(rows), np.inf)
        round_hit = np.zeros(n, dtype=bool)
        for it in range(cfg.max_iterations):
            if not len(rows):
                break
            ya, xr, cr = y[rows], x0[rows], const[rows]
            t = np.tanh(w)
            xa = lo + (t + 1) * half
            _, logits, pullback = clf.vjp(xa)
            diff = xa - xr
            l2 = np.sum(diff.astype(np.float64) ** 2, axis=axes)
            gap, j = _margin(logits, ya)
            total = l2 + cr * np.maximum(gap, -kappa)

            ok = np.isfinite(total)
            for k in rows[~ok]:
                diagnostics[int(k)] = f"non-finite C&W objective at iteration {it}"
                dead[k] = True

            hit = _cw_success(logits, ya, kappa) & ok
            better = hit & (l2 < best_l2[rows])
            best_l2[rows[better]] = l2[better]
            best_x[rows[better]] = xa[better]
            round_hit[rows[hit]] = True

            live = np.flatnonzero((gap > -kappa) & ok)
            dlog = np.zeros_like(logits)
            c32 = cr.astype(np.float32)
            dlog[live, ya[live]] = c32[live]
            dlog[live, j[live]] = -c32[live]
            gw = (pullback(dlog) + 2 * diff) * (1 - t * t) * half
            if cfg.optimizer == "adam":
                m = 0.9 * m + 0.1 * gw
                v = 0.999 * v + 0.001 * gw * gw
                mh = m / np.float32(1 - 0.9 ** (it + 1))
                vh = v / np.float32(1 - 0.999 ** (it + 1))
                w = w - np.float32(cfg.step_size) * mh / (np.sqrt(vh) + np.float32(1e-8))
            else:
                w = w - np.float32(cfg.step_size) * gw

            keep = ok
            if cfg.abort_early and it % check_every == 0:
                keep = keep & ~(total > prev * 0.9999)
                prev = np.where(keep, total, prev)
            if not keep.all():
                rows, w, m, v, prev = rows[keep], w[keep], m[keep], v[keep], prev[keep]

        succ = round_hit
        upper = np.where(succ, np.minimum(upper, const), upper)
        lower = np.where(~succ, np.maximum(lower, const), lower)
        const = np.where(upper < 1e9, (lower + upper) / 2, const * 10)

    failed = ~np.isfinite(best_l2)
    best_x[failed] = x0[failed]
    best_l2[failed] = np.nan
    return best_x, best_l2, failed, diagnostics


def cw_l2(clf, normals, cfg: CwConfig) -> AdversarialSet:
    """Untargeted Carlini & Wagner L2 attack.

    Minimizes ``||x' - x||^2 + c * max(Z_y(x') - max_{i != y} Z_i(x'), -kappa)``
    over ``x' = lo + (tanh(w) + 1) * (hi - lo) / 2`` with a binary search on
    ``c``. Each example keeps its successful candidate of smallest L2
    distance; examples with no success are returned unchanged and flagged in
    ``failed``.
    """
    x, y = _pixels_from_dataset(normals)
    out = x.copy()
    dist = np.full(len(y), np.nan)
    failed = np.zeros(len(y), dtype=bool)
    diagnostics: dict[int, str] = {}
    for sl in _chunks(len(x), cfg.batch_size):
        try:
            parts = [(sl, _cw_chunk(clf, x[sl], y[sl], cfg))]
        except NumericalError:
            parts = []
            for k in range(sl.start, sl.stop):
                one = slice(k, k + 1)
                try:
                    parts.append((one, _cw_chunk(clf, x[one], y[one], cfg)))
                except NumericalError as exc:
                    failed[k] = True
                    diagnostics[k] = str(exc)
        for part, (bx, bl2, bf, diag) in parts:
            out[part] = bx
            dist[part] = np.sqrt(bl2)
            failed[part] = bf
            for k, msg in diag.items():
                diagnostics[part.start + k] = msg
    for k, msg in diagnostics.items():
        log.warning("C&W example %d aborted: %s", k, msg)
    meta = {"l2": dist, "diagnostics": {str(k): v for k, v in diagnostics.items()}}
    return AdversarialSet(out, y.copy(), np.arange(len(y)), clf.id, cfg, failed=failed, meta=meta)


def generate(clf, normals, attack) -> AdversarialSet:
    if isinstance(attack, FgsmConfig):
        return fgsm(clf, normals, attack)
    if isinstance(attack, CwConfig):
        return cw_l2(clf, normals, attack)
    raise TypeError(f"unsupported attack config {type(attack).__name__}")


# ---------------------------------------------------------------------------
# black-box substitute pipeline


class CountingOracle:
    """Wrap a label oracle and count the examples it has been asked to label."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn
        self.queries = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        self.queries += len(x)
        return np.asarray(self.fn(x), dtype=np.int64)


def jacobian_augment(sub: Network, data: Dataset, oracle: Callable, lam: float,
                     clip_min: float = 0.0, clip_max: float = 1.0,
                     batch_size: int = 500) -> Dataset:
    """Double ``data`` with points stepped along sign(d Z_label / dx) of the substitute.

    The labels already in ``data`` are taken to be oracle labels; only the
    new points are sent to ``oracle``.
    """
    x, y = _pixels_from_dataset(data)
    new = np.empty_like(x)
    for sl in _chunks(len(x), batch_size):
        _, logits, pullback = sub.vjp(x[sl])
        sel = np.zeros_like(logits)
        sel[np.arange(len(logits)), y[sl]] = 1
        g = pullback(sel)
        new[sl] = np.clip(x[sl] + np.float32(lam) * np.sign(g), clip_min, clip_max)
    new_y = np.asarray(oracle(new), dtype=np.int64)
    return Dataset(np.concatenate([x, new]), np.concatenate([y, new_y]), data.num_classes,
                   data.name, data.split)


def default_substitute_spec(input_shape: tuple, num_classes: int = 10, hidden: int = 200):
    dim = int(np.prod(input_shape))
    spec = [nn.flatten(), nn.dense(dim, hidden), nn.relu(), nn.dense(hidden, hidden), nn.relu(),
            nn.dense(hidden, num_classes), nn.softmax()]
    return spec


@dataclass
class SubstituteConfig:
    holdout_size: int = 150
    augmentation_epochs: int = 5
    lam: float = 0.1
    substitute_spec: list | None = None
    train_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=32, max_epochs=10))
    seed: int = 0

    def __post_init__(self):
        if self.holdout_size < 1:
            raise ValueError("holdout_size must be positive")
        if self.augmentation_epochs < 0:
            raise ValueError("augmentation_epochs must be nonnegative")
        if self.lam <= 0:
            raise ValueError("lam must be positive")


def train_substitute(oracle: Callable, holdout: Dataset, cfg: SubstituteConfig,
                     substitute: Network | None = None) -> tuple[Network, Dataset, list]:
    """Train a substitute on Jacobian-augmented, oracle-labeled holdout data."""
    if substitute is None:
        spec = cfg.substitute_spec or default_substitute_spec(holdout.shape, holdout.num_classes)
        substitute = Network.create(spec, holdout.shape, seed=cfg.seed, id="substitute")
    data = Dataset(holdout.x, np.asarray(oracle(holdout.x), dtype=np.int64),
                   holdout.num_classes, "substitute", "train")
    reports = []
    for rho in range(cfg.augmentation_epochs + 1):
        tcfg = TrainConfig(**{**cfg.train_cfg.to_dict(), "rng_seed": cfg.train_cfg.rng_seed + rho})
        reports.append(nn.train(substitute, data, tcfg))
        if rho < cfg.augmentation_epochs:
            data = jacobian_augment(substitute, data, oracle, cfg.lam)
    return substitute, data, reports


def blackbox_attack(target: Callable, cfg: SubstituteConfig, attack, normals: Dataset,
                    holdout: Dataset | None = None, substitute: Network | None = None) -> AdversarialSet:
    """Craft adversarial examples for an opaque label oracle via a trained substitute.

    ``holdout`` defaults to a seeded class-balanced sample of ``normals``.
    """
    oracle = target if isinstance(target, CountingOracle) else CountingOracle(target)
    if holdout is None:
        if cfg.holdout_size > len(normals):
            raise ValueError("holdout_size exceeds the available examples")
        holdout = sample_subset(normals, cfg.holdout_size, cfg.seed)
    sub, synth, reports = train_substitute(oracle, holdout, cfg, substitute)
    adv = generate(sub, normals, attack)
    adv.scenario = "blackbox"
    adv.meta.update({
        "oracle_queries": oracle.queries,
        "substitute_set_size": len(synth),
        "substitute_epochs": [r.epochs for r in reports],
    })
    return adv


# ---------------------------------------------------------------------------
# persistence

ADV_MAGIC = b"MULDEFAX"
ADV_VERSION = 1


def save_adversarial(adv: AdversarialSet, seed: int | None = None) -> bytes:
    """Container: magic, version, JSON metadata, then float32 image/label/index blocks."""
    meta = {k: v for k, v in adv.meta.items() if k != "l2"}
    header = {
        "source_model_id": adv.source_model_id,
        "attack": adv.attack.to_dict(),
        "scenario": adv.scenario,
        "seed": seed,
        "shape": list(adv.x.shape),
        "has_failed": adv.failed is not None,
        "has_l2": "l2" in adv.meta,
        "meta": meta,
    }
    blocks = [adv.x, adv.y.astype(np.float32), adv.index.astype(np.float32)]
    if adv.failed is not None:
        blocks.append(adv.failed.astype(np.float32))
    if "l2" in adv.meta:
        blocks.append(np.asarray(adv.meta["l2"], dtype=np.float32))
    return nn._pack(ADV_MAGIC, ADV_VERSION, header, blocks)


def load_adversarial(data: bytes) -> AdversarialSet:
    header, body = nn._unpack(data, ADV_MAGIC, ADV_VERSION)
    try:
        shape = tuple(header["shape"])
        n = shape[0]
        attack = attack_from_dict(header["attack"])
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"malformed adversarial-set header: {exc}") from None
    size = int(np.prod(shape))
    extra = int(header.get("has_failed", False)) + int(header.get("has_l2", False))
    need = size + n * (2 + extra)
    if len(body) != 4 * need:
        raise FormatError(f"payload holds {len(body) / 4:g} floats, header requires {need}")
    flat = np.frombuffer(body, dtype="<f4")
    x = flat[:size].reshape(shape).astype(np.float32)
    off = size
    y = flat[off:off + n].astype(np.int64)
    off += n
    index = flat[off:off + n].astype(np.int64)
    off += n
    failed = None
    meta = dict(header.get("meta", {}))
    if header.get("has_failed"):
        failed = flat[off:off + n] > 0.5
        off += n
    if header.get("has_l2"):
        meta["l2"] = flat[off:off + n].astype(np.float64)
    return AdversarialSet(x, y, index, header["source_model_id"], attack,
                          header["scenario"], failed, meta)
