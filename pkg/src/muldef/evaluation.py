"""Measurement protocol: test/adversarial accuracy, white-box indirect and
direct attacks, cross-attack and black-box evaluations, exploratory sweeps,
and CSV/JSON report emission.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, nn
from .attacks import AdversarialSet, CwConfig, FgsmConfig, SubstituteConfig
from .data import Dataset, concat, sample_indices
from .defense import (GeneratorConfig, ModelFamily, MuldefClassifier, derive_seed,
                      generate_family, merged_model)
from .nn import Network, TrainConfig

CSV_HEADER = ["classifier", "adv_source", "attack", "scenario", "seed", "accuracy", "n"]


@dataclass
class Cell:
    classifier: str
    adv_source: str
    attack: str
    scenario: str
    seed: int
    accuracy: float
    n: int


@dataclass
class EvalReport:
    cells: list = field(default_factory=list)
    test_accuracy: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    configs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    adv_sets: dict = field(default_factory=dict)

    def add(self, classifier, adv_source, attack, scenario, seed, accuracy, n):
        acc = float(accuracy)
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        self.cells.append(Cell(classifier, adv_source, attack, scenario, int(seed), acc, int(n)))

    def merge(self, other: "EvalReport", prefix: str = "") -> "EvalReport":
        self.cells.extend(other.cells)
        self.test_accuracy.update(other.test_accuracy)
        self.summary.update({prefix + k: v for k, v in other.summary.items()})
        self.configs.update(other.configs)
        self.timings.update({prefix + k: v for k, v in other.timings.items()})
        self.adv_sets.update(other.adv_sets)
        return self

    def lookup(self, classifier: str, adv_source: str, scenario: str | None = None) -> float:
        for c in self.cells:
            if c.classifier == classifier and c.adv_source == adv_source and (
                    scenario is None or c.scenario == scenario):
                return c.accuracy
        raise KeyError((classifier, adv_source, scenario))

    def matrix(self, classifiers: list, sources: list, scenario: str | None = None) -> np.ndarray:
        """``acc[classifier][adv_source]`` for the requested rows and columns."""
        return np.array([[self.lookup(c, s, scenario) for s in sources] for c in classifiers])


def _predictions(models, x) -> np.ndarray:
    return np.stack([m.predict(x) for m in models])


def adversarial_accuracy(clf, adv, draws: int = 1, seed: int = 0):
    """Fraction of examples classified to their original labels.

    Returns ``(monte_carlo, exact)``. For a plain network both are the
    deterministic accuracy and ``exact`` is None. For a
    :class:`MuldefClassifier` the Monte-Carlo estimate averages ``draws``
    independent selection passes over the set, and ``exact`` is the mean of
    the member accuracies.
    """
    x, y = adv.x, adv.y
    if len(y) == 0:
        raise ValueError("empty adversarial set")
    if not isinstance(clf, MuldefClassifier):
        return nn.accuracy(clf, x, y), None
    if draws < 1:
        raise ValueError("draws must be >= 1")
    preds = _predictions(clf.models, x)
    correct = preds == y[None, :]
    exact = float(correct.mean(axis=1).mean())
    base = (int(seed) & 0xFFFFFFFF) << 32
    n = len(y)
    hits = 0
    for r in range(draws):
        choice = clf.select_models(base + r * n + np.arange(n))
        hits += int(correct[choice, np.arange(n)].sum())
    return hits / (draws * n), exact


def monte_carlo_tolerance(exact: float, draws: int, n: int, k: float = 3.0) -> float:
    return k * math.sqrt(max(exact * (1 - exact), 0.0) / (draws * n))


def _attack_name(attack) -> str:
    return attack.name


def _eval_set(report: EvalReport, defense: MuldefClassifier, adv: AdversarialSet, source: str,
              scenario: str, seed: int, draws: int) -> float:
    x, y = adv.x, adv.y
    preds = _predictions(defense.models, x)
    accs = (preds == y[None, :]).mean(axis=1)
    for m, a in zip(defense.models, accs):
        report.add(m.id, source, _attack_name(adv.attack), scenario, seed, a, len(y))
    mc, exact = adversarial_accuracy(defense, adv, draws, seed)
    report.add("muldef", source, _attack_name(adv.attack), scenario, seed, exact, len(y))
    report.add("muldef_mc", source, _attack_name(adv.attack), scenario, seed, mc, len(y))
    return exact


def test_accuracy_report(defense: MuldefClassifier, test_set: Dataset, seed: int = 0,
                         draws: int = 1) -> EvalReport:
    report = EvalReport()
    preds = _predictions(defense.models, test_set.x)
    accs = (preds == test_set.y[None, :]).mean(axis=1)
    for m, a in zip(defense.models, accs):
        report.test_accuracy[m.id] = float(a)
        report.add(m.id, "test", "none", "clean", seed, a, len(test_set))
    clean = AdversarialSet(test_set.x, test_set.y, np.arange(len(test_set)), "test", FgsmConfig(eps=0.0))
    mc, exact = adversarial_accuracy(defense, clean, draws, seed)
    report.test_accuracy["muldef"] = exact
    report.test_accuracy["muldef_mc"] = mc
    report.add("muldef", "test", "none", "clean", seed, exact, len(test_set))
    return report


def indirect_attack_eval(defense: MuldefClassifier, attack, test_set: Dataset,
                         seed: int = 0, draws: int = 1) -> EvalReport:
    """Attack every member separately; the defense scores its worst set."""
    report = EvalReport()
    per_set = {}
    t0 = time.perf_counter()
    for m in defense.models:
        adv = attacks.generate(m, test_set, attack)
        report.adv_sets[("whitebox", attack.name, m.id)] = adv
        per_set[m.id] = _eval_set(report, defense, adv, m.id, "whitebox", seed, draws)
    worst = min(per_set, key=per_set.get)
    report.summary.update({
        "indirect_min_accuracy": per_set[worst],
        "indirect_min_source": worst,
        "indirect_per_set": per_set,
    })
    report.configs["indirect_attack"] = attack.to_dict()
    report.timings["indirect"] = time.perf_counter() - t0
    return report


def direct_attack_eval(defense: MuldefClassifier, cw_cfg: CwConfig, test_set: Dataset,
                       seed: int = 0, draws: int = 1, rule: str = "mean_prob") -> EvalReport:
    """C&W against all members fused into one differentiable model."""
    if not isinstance(cw_cfg, CwConfig):
        raise TypeError("the direct attack is defined for C&W only; FGSM has no gradient "
                        "through the randomized selector")
    report = EvalReport()
    t0 = time.perf_counter()
    merged = merged_model(defense.family, rule)
    adv = attacks.cw_l2(merged, test_set, cw_cfg)
    report.adv_sets[("whitebox", "cw", "merged")] = adv
    acc = _eval_set(report, defense, adv, "merged", "whitebox", seed, draws)
    report.add(merged.id, "merged", "cw", "whitebox", seed, nn.accuracy(merged, adv.x, adv.y), len(adv))
    report.summary["direct_accuracy"] = acc
    report.configs["direct_attack"] = cw_cfg.to_dict()
    report.timings["direct"] = time.perf_counter() - t0
    return report


def whitebox_eval(defense: MuldefClassifier, attack, test_set: Dataset, seed: int = 0,
                  draws: int = 1, direct: bool = True) -> EvalReport:
    """Indirect attack, plus the direct attack for C&W; the attacker keeps the better one."""
    report = indirect_attack_eval(defense, attack, test_set, seed, draws)
    best = report.summary["indirect_min_accuracy"]
    if direct and isinstance(attack, CwConfig) and len(defense.models) > 1:
        report.merge(direct_attack_eval(defense, attack, test_set, seed, draws))
        best = min(best, report.summary["direct_accuracy"])
    report.summary["whitebox_accuracy"] = best
    return report


def cross_attack_eval(defense: MuldefClassifier, attack, test_set: Dataset, seed: int = 0,
                      draws: int = 1, direct: bool = True) -> EvalReport:
    """Evaluate a family built with one attack's examples under another attack."""
    report = whitebox_eval(defense, attack, test_set, seed, draws, direct)
    built = defense.family.generator.attack.name
    report.summary["built_with"] = built
    report.summary["attacked_by"] = attack.name
    return report


def blackbox_eval(clf, sub_cfg: SubstituteConfig, attack, test_set: Dataset,
                  holdout: Dataset, seed: int = 0, draws: int = 1, label: str | None = None) -> EvalReport:
    """Train a substitute against ``clf``'s labels and evaluate ``clf`` on the transferred set."""
    report = EvalReport()
    t0 = time.perf_counter()
    oracle = clf.oracle(start=(int(seed) & 0xFFFF) << 40) if isinstance(clf, MuldefClassifier) else clf.predict
    adv = attacks.blackbox_attack(oracle, sub_cfg, attack, test_set, holdout=holdout)
    name = label or ("muldef" if isinstance(clf, MuldefClassifier) else clf.id)
    report.adv_sets[("blackbox", attack.name, name)] = adv
    mc, exact = adversarial_accuracy(clf, adv, draws, seed)
    acc = exact if exact is not None else mc
    report.add(name, f"substitute[{name}]", attack.name, "blackbox", seed, acc, len(adv))
    report.summary[f"blackbox_accuracy[{name}]"] = acc
    report.summary[f"blackbox_queries[{name}]"] = adv.meta["oracle_queries"]
    report.summary[f"substitute_set_size[{name}]"] = adv.meta["substitute_set_size"]
    report.timings[f"blackbox[{name}]"] = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# sweeps


def sweep_augmentation(target: Network, train_set: Dataset, test_set: Dataset, attack,
                       fractions, train_cfg: TrainConfig, seed: int = 0) -> dict:
    """Adversarial-training sweeps over the augmentation fraction.

    Curve ``retrained``: T fine-tuned on ``train + Adv_T(fraction)`` and then
    attacked white-box on the test set. Curve ``separate``: a fresh model D
    trained on ``train + Adv_T'(fraction)`` scored on an independent Adv_T
    crafted from the test set against the original T.
    """
    adv_test = attacks.generate(target, test_set, attack)
    retrained, separate = [], []
    for k, frac in enumerate(fractions):
        n = int(round(frac * len(train_set)))
        if n:
            idx = sample_indices(train_set, n, derive_seed(seed, k, 7))
            adv_train = attacks.generate(target, train_set.take(idx), attack)
            data = concat([train_set, adv_train.as_dataset(train_set.num_classes)])
        else:
            data = train_set
        tcfg = TrainConfig(**{**train_cfg.to_dict(), "rng_seed": derive_seed(seed, k, 8)})

        t_prime = target.copy(id=f"T'[{frac}]")
        nn.train(t_prime, data, tcfg)
        own = attacks.generate(t_prime, test_set, attack)
        retrained.append(nn.accuracy(t_prime, own.x, own.y))

        d = Network.create(target.spec, target.input_shape, seed=derive_seed(seed, k, 9),
                           id=f"D[{frac}]", dtype=target.dtype)
        nn.train(d, data, tcfg)
        separate.append(nn.accuracy(d, adv_test.x, adv_test.y))
    return {"fractions": list(map(float, fractions)), "retrained": retrained, "separate": separate,
            "target_adv_accuracy": nn.accuracy(target, adv_test.x, adv_test.y)}


def sweep_family_size(target: Network, train_set: Dataset, test_set: Dataset,
                      gen_cfg: GeneratorConfig, sizes, attack=None, seed: int = 0,
                      direct: bool = True) -> dict:
    """White-box accuracy of families of increasing size.

    One solution-2 family with ``max(sizes) - 1`` additional models is built
    and its prefixes are evaluated, since each member only depends on its
    predecessors.
    """
    attack = attack or gen_cfg.attack
    biggest = max(sizes)
    cfg = GeneratorConfig(**{**gen_cfg.__dict__, "num_additional": biggest - 1})
    family = generate_family(target, train_set, cfg)
    out = {"sizes": [], "indirect": [], "direct": [], "whitebox": []}
    for k in sizes:
        clf = MuldefClassifier(family.prefix(k), seed)
        rep = whitebox_eval(clf, attack, test_set, seed, direct=direct)
        out["sizes"].append(int(k))
        out["indirect"].append(rep.summary["indirect_min_accuracy"])
        out["direct"].append(rep.summary.get("direct_accuracy"))
        out["whitebox"].append(rep.summary["whitebox_accuracy"])
    return out


# ---------------------------------------------------------------------------
# report files


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def emit_report(report: EvalReport, path, include_timings: bool = False) -> list[Path]:
    """Write ``cells.csv`` (one row per classifier/adv-set/scenario) and ``summary.json``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    csv_path = d / "cells.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for c in report.cells:
            w.writerow([c.classifier, c.adv_source, c.attack, c.scenario, c.seed, _fmt(c.accuracy), c.n])
    configs = _jsonable(report.configs)
    digest = hashlib.sha256(json.dumps(configs, sort_keys=True).encode()).hexdigest()
    summary = {
        "summary": _jsonable(report.summary),
        "test_accuracy": _jsonable(report.test_accuracy),
        "configs": configs,
        "config_digest": digest,
    }
    if include_timings:
        summary["timings"] = _jsonable(report.timings)
    sum_path = d / "summary.json"
    sum_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return [csv_path, sum_path]


def read_cells(path) -> list[Cell]:
    p = Path(path)
    if p.is_dir():
        p = p / "cells.csv"
    with p.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {rows[0]}")
    return [Cell(r[0], r[1], r[2], r[3], int(r[4]), float(r[5]), int(r[6])) for r in rows[1:]]
