"""Model-family generation and randomized runtime model selection.

A family ``[T, M_1, ..., M_p]`` shares T's architecture. Each ``M_i`` is
trained from scratch on the original training set plus adversarial examples
crafted white-box against earlier members:

* ``solution1``: only the previous member's set ``Adv_{M_{i-1}}`` (``Adv_T`` for i = 1)
* ``solution2``: every earlier set ``Adv_T, Adv_{M_1}, ..., Adv_{M_{i-1}}``

At inference time :class:`MuldefClassifier` routes each input to one member
chosen uniformly at random from a seeded, replayable stream.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import attacks, nn
from .attacks import AdversarialSet, CwConfig, FgsmConfig
from .data import Dataset, concat, sample_indices
from .nn import Network, TrainConfig

log = logging.getLogger(__name__)

SOLUTIONS = ("solution1", "solution2")


def derive_seed(*keys: int) -> int:
    """Deterministic 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass
class ConvergenceStop:
    enabled: bool = False
    min_delta: float = 0.005


@dataclass
class GeneratorConfig:
    num_additional: int = 4
    solution: str = "solution2"
    aug_fraction: float = 0.15
    attack: FgsmConfig | CwConfig = field(default_factory=FgsmConfig)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    rng_seed: int = 0
    convergence_stop: ConvergenceStop = field(default_factory=ConvergenceStop)
    warm_start: bool = False

    def __post_init__(self):
        if self.num_additional < 0:
            raise ValueError("num_additional must be nonnegative")
        if self.solution not in SOLUTIONS:
            raise ValueError(f"solution must be one of {SOLUTIONS}, got {self.solution!r}")
        if not 0.0 < self.aug_fraction <= 1.0:
            raise ValueError("aug_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "num_additional": self.num_additional,
            "solution": self.solution,
            "aug_fraction": self.aug_fraction,
            "attack": self.attack.to_dict(),
            "train_cfg": self.train_cfg.to_dict(),
            "rng_seed": self.rng_seed,
            "convergence_stop": {"enabled": self.convergence_stop.enabled,
                                 "min_delta": self.convergence_stop.min_delta},
            "warm_start": self.warm_start,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        d["attack"] = attacks.attack_from_dict(d["attack"])
        d["train_cfg"] = TrainConfig(**d["train_cfg"])
        d["convergence_stop"] = ConvergenceStop(**d.get("convergence_stop", {}))
        return cls(**d)


@dataclass
class ModelFamily:
    models: list
    adv_sets: list
    generator: GeneratorConfig
    reports: list = field(default_factory=list)
    history: list = field(default_factory=list)
    stop_reason: str = "complete"

    def __len__(self) -> int:
        return len(self.models)

    @property
    def ids(self) -> list[str]:
        return [m.id for m in self.models]

    def prefix(self, k: int) -> "ModelFamily":
        """The first ``k`` members (valid for solution2 families, which are built incrementally)."""
        return ModelFamily(self.models[:k], self.adv_sets[:k], self.generator,
                           self.reports[:k], self.history[:k], self.stop_reason)


class FamilyGenerationError(RuntimeError):
    def __init__(self, msg: str, partial: ModelFamily):
        super().__init__(msg)
        self.partial = partial


def compose_training_set(train_set: Dataset, adv_sets: list, i: int, solution: str,
                         num_classes: int | None = None) -> tuple[Dataset, list]:
    """Training data for member ``i`` (1-based) and the (source id, size) tag of each block."""
    if i < 1:
        raise ValueError("member index must be >= 1")
    if solution == "solution1":
        blocks = [adv_sets[i - 1]]
    elif solution == "solution2":
        blocks = list(adv_sets[:i])
    else:
        raise ValueError(f"unknown solution {solution!r}")
    k = num_classes or train_set.num_classes
    parts = [train_set] + [b.as_dataset(k) for b in blocks]
    tags = [("original", len(train_set))] + [(b.source_model_id, len(b)) for b in blocks]
    return concat(parts, name=f"train+adv[{i}]"), tags


def _adv_from_train(model, train_set: Dataset, n: int, seed: int, attack) -> AdversarialSet:
    idx = sample_indices(train_set, n, seed)
    adv = attacks.generate(model, train_set.take(idx), attack)
    adv.index = idx
    adv.meta["sample_seed"] = seed
    return adv


def generate_family(target: Network, train_set: Dataset, cfg: GeneratorConfig,
                    progress: Callable[[str], None] | None = None) -> ModelFamily:
    """Build ``[T, M_1, ..., M_p]`` and each member's white-box adversarial set.

    ``target`` must already be trained on ``train_set``. Adversarial sets are
    crafted from seeded class-balanced samples of ``aug_fraction * |train_set|``
    training examples, one fresh sample per member.
    """
    n_aug = int(round(cfg.aug_fraction * len(train_set)))
    if n_aug < 1:
        raise ValueError("aug_fraction * |train_set| must be at least 1")
    say = progress or (lambda msg: log.info(msg))

    family = ModelFamily([target], [], cfg)
    try:
        family.adv_sets.append(
            _adv_from_train(target, train_set, n_aug, derive_seed(cfg.rng_seed, 0, 1), cfg.attack))
    except Exception as exc:
        raise FamilyGenerationError(f"attack on {target.id} failed: {exc}", family) from exc
    prev_acc = None
    for i in range(1, cfg.num_additional + 1):
        data, tags = compose_training_set(train_set, family.adv_sets, i, cfg.solution,
                                          target.num_classes)
        mid = f"M{i}"
        if cfg.warm_start:
            model = target.copy(id=mid)
        else:
            model = Network.create(target.spec, target.input_shape,
                                   seed=derive_seed(cfg.rng_seed, i, 2), id=mid, dtype=target.dtype)
        tcfg = TrainConfig(**{**cfg.train_cfg.to_dict(), "rng_seed": derive_seed(cfg.rng_seed, i, 3)})
        try:
            report = nn.train(model, data, tcfg)
            adv = _adv_from_train(model, train_set, n_aug, derive_seed(cfg.rng_seed, i, 1), cfg.attack)
        except Exception as exc:
            raise FamilyGenerationError(f"building {mid} failed: {exc}", family) from exc
        family.models.append(model)
        family.adv_sets.append(adv)
        family.reports.append(report)
        say(f"built {mid} on {len(data)} examples ({tags}), {report.epochs} epochs")

        if cfg.convergence_stop.enabled:
            clf = MuldefClassifier(family, 0)
            acc = clf.expected_accuracy(adv.x, adv.y)
            family.history.append(acc)
            if prev_acc is not None and abs(acc - prev_acc) < cfg.convergence_stop.min_delta:
                family.stop_reason = "converged"
                say(f"stopping after {mid}: accuracy on newest set moved {abs(acc - prev_acc):.4f}")
                break
            prev_acc = acc
    return family


# ---------------------------------------------------------------------------
# runtime selection

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return z ^ (z >> np.uint64(31))


def uniform_draws(seed: int, draw_index) -> np.ndarray:
    """Counter-based uniforms in [0, 1) keyed by ``(seed, draw_index)``."""
    idx = np.asarray(draw_index, dtype=np.uint64)
    key = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    with np.errstate(over="ignore"):
        h = _splitmix64(_splitmix64(idx ^ key) + key)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


class MuldefClassifier:
    """The randomized defense: one uniformly drawn family member per input."""

    def __init__(self, family: ModelFamily, selection_seed: int = 0):
        if len(family) == 0:
            raise ValueError("family must be nonempty")
        self.family = family
        self.selection_seed = int(selection_seed)
        self.id = "muldef[" + ",".join(family.ids) + "]"

    @property
    def models(self) -> list:
        return self.family.models

    def select_models(self, draw_indices) -> np.ndarray:
        u = uniform_draws(self.selection_seed, draw_indices)
        return np.minimum((u * len(self.models)).astype(np.int64), len(self.models) - 1)

    def select_model(self, draw_index: int) -> int:
        return int(self.select_models(np.array([draw_index]))[0])

    def classify_batch(self, x: np.ndarray, draw_indices) -> np.ndarray:
        draw_indices = np.asarray(draw_indices)
        if len(draw_indices) != len(x):
            raise ValueError("one draw index per example is required")
        choice = self.select_models(draw_indices)
        out = np.empty(len(x), dtype=np.int64)
        for k in np.unique(choice):
            rows = choice == k
            out[rows] = self.models[k].predict(x[rows])
        return out

    def classify(self, x: np.ndarray, draw_index: int) -> int:
        x = np.asarray(x)
        return int(self.classify_batch(x[None], [draw_index])[0])

    def predict(self, x: np.ndarray, draw_offset: int = 0) -> np.ndarray:
        return self.classify_batch(x, draw_offset + np.arange(len(x)))

    def member_accuracies(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.array([nn.accuracy(m, x, y) for m in self.models])

    def expected_accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        """Exact accuracy under uniform selection: the mean of member accuracies."""
        return float(np.mean(self.member_accuracies(x, y)))

    def oracle(self, start: int = 0) -> Callable[[np.ndarray], np.ndarray]:
        """Label oracle for black-box use; consumes consecutive draw indices."""
        state = {"next": start}

        def query(x: np.ndarray) -> np.ndarray:
            k = state["next"]
            state["next"] = k + len(x)
            return self.classify_batch(x, np.arange(k, k + len(x)))

        return query


class MergedModel:
    """All family members fused into one differentiable classifier.

    ``rule="mean_prob"`` averages member probabilities and exposes
    ``log(mean prob)`` as surrogate logits; ``rule="mean_logits"`` averages
    the members' logits instead.
    """

    def __init__(self, models: list, rule: str = "mean_prob"):
        if not models:
            raise ValueError("cannot merge an empty family")
        if rule not in ("mean_prob", "mean_logits"):
            raise ValueError(f"unknown merge rule {rule!r}")
        self.models = list(models)
        self.rule = rule
        self.id = "merged[" + ",".join(m.id for m in self.models) + "]"
        self.input_shape = self.models[0].input_shape
        self.num_classes = self.models[0].num_classes

    def _combine(self, logits_list):
        k = len(logits_list)
        if self.rule == "mean_logits":
            z = sum(logits_list) / k
            return z, None
        logp = np.stack([nn._log_softmax(z) for z in logits_list])  # (K, n, C)
        top = logp.max(axis=0)
        lse = top + np.log(np.exp(logp - top).sum(axis=0))
        resp = np.exp(logp - lse)  # p_k / (K * mean p), summed over k gives 1
        return lse - np.log(k), (logp, resp)

    def forward(self, x: np.ndarray):
        z, _ = self._combine([m.forward(x)[1] for m in self.models])
        return nn._softmax(z), z

    def vjp(self, x: np.ndarray):
        parts = [m.vjp(x) for m in self.models]
        z, aux = self._combine([p[1] for p in parts])
        k = len(parts)

        def pullback(g: np.ndarray) -> np.ndarray:
            g = np.asarray(g, dtype=z.dtype)
            total = None
            for idx, (_, _, pb) in enumerate(parts):
                if self.rule == "mean_logits":
                    dz = g / k
                else:
                    logp, resp = aux
                    u = g * resp[idx]
                    dz = u - np.exp(logp[idx]) * u.sum(axis=1, keepdims=True)
                dx = pb(dz.astype(z.dtype, copy=False))
                total = dx if total is None else total + dx
            return total

        return nn._softmax(z), z, pullback

    def predict(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size])[1].argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out)


def merged_model(family: ModelFamily | list, rule: str = "mean_prob") -> MergedModel:
    models = family.models if isinstance(family, ModelFamily) else family
    return MergedModel(models, rule)


# ---------------------------------------------------------------------------
# persistence


def save_family(family: ModelFamily, directory, seed: int | None = None) -> Path:
    """Write one model file and one adversarial-set file per member plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    members = []
    for i, (m, adv) in enumerate(zip(family.models, family.adv_sets)):
        mfile, afile = f"model_{i:02d}.mdl", f"adv_{i:02d}.adv"
        (d / mfile).write_bytes(nn.save(m))
        (d / afile).write_bytes(attacks.save_adversarial(adv, seed=adv.meta.get("sample_seed")))
        members.append({"order": i, "id": m.id, "model": mfile, "adversarial_set": afile})
    manifest = {
        "format": "muldef-family/1",
        "generator": family.generator.to_dict(),
        "seed": seed,
        "members": members,
        "stop_reason": family.stop_reason,
        "history": family.history,
        "reports": [{"epochs": r.epochs, "train_loss": r.train_loss, "val_loss": r.val_loss,
                     "stop_reason": r.stop_reason} for r in family.reports],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_family(directory) -> ModelFamily:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    members = sorted(manifest["members"], key=lambda m: m["order"])
    models = [nn.load((d / m["model"]).read_bytes()) for m in members]
    advs = [attacks.load_adversarial((d / m["adversarial_set"]).read_bytes()) for m in members]
    gen = GeneratorConfig.from_dict(manifest["generator"])
    reports = [nn.TrainedReport(r["epochs"], r["train_loss"], r["val_loss"], r["stop_reason"])
               for r in manifest.get("reports", [])]
    return ModelFamily(models, advs, gen, reports, manifest.get("history", []),
                       manifest.get("stop_reason", "complete"))
