"""End-to-end experiment stages shared by the command line and the demos.

Every stage is a pure function of the configuration and one integer seed,
so rerunning a stage with the same inputs rewrites identical files.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from . import attacks, data, evaluation, nn
from .config import ExperimentConfig
from .data import Dataset
from .defense import (GeneratorConfig, ModelFamily, MuldefClassifier, derive_seed, generate_family,
                      save_family)
from .nn import Network, TrainConfig

log = logging.getLogger(__name__)

# stream tags for derive_seed(seed, TAG, ...)
_TARGET_INIT, _TARGET_TRAIN, _FAMILY, _SPLIT, _SUBSTITUTE = 100, 101, 102, 103, 104


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    gen = dataclasses.replace(cfg.generator, rng_seed=seed)
    return dataclasses.replace(cfg, seed=seed, generator=gen)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train and test splits, subset to the configured sizes."""
    ds = cfg.dataset
    if ds.source == "blobs":
        spec, shape = cfg.layer_spec()
        dim = int(np.prod(shape))
        n_train, n_test = ds.n_train or 1000, ds.n_test or 200
        per = -(-(n_train + n_test) // 10)
        full = data.synth_blobs(10, per, dim, 0.15, seed=ds.subset_seed, image_shape=shape)
        return (full.take(np.arange(n_train), split="train"),
                full.take(np.arange(n_train, n_train + n_test), split="test"))
    root = ds.root or data.data_dir()
    if ds.source == "mnist":
        train, test = data.load_mnist("train", root), data.load_mnist("test", root)
    else:
        train, test = data.load_cifar10("train", root), data.load_cifar10("test", root)
    if ds.n_train is not None and ds.n_train < len(train):
        train = data.sample_subset(train, ds.n_train, ds.subset_seed)
    if ds.n_test is not None and ds.n_test < len(test):
        test = data.sample_subset(test, ds.n_test, ds.subset_seed + 1)
    return train, test


def split_evaluation(cfg: ExperimentConfig, test: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Carve the black-box holdout from the test split; the rest is attacked.

    Returns ``(eval_set, holdout)``. The evaluation set is a class-balanced
    sample of ``evaluation.n_eval`` examples from what remains.
    """
    rng_seed = derive_seed(seed, _SPLIT)
    hold_n = min(cfg.substitute.holdout_size, len(test) - 1)
    hold_idx = data.sample_indices(test, hold_n, rng_seed)
    rest = test.take(np.setdiff1d(np.arange(len(test)), hold_idx))
    holdout = test.take(hold_idx, split="holdout")
    n_eval = cfg.evaluation.n_eval
    if n_eval is not None and n_eval < len(rest):
        rest = data.sample_subset(rest, n_eval, derive_seed(seed, _SPLIT, 1))
    return rest, holdout


def train_target(cfg: ExperimentConfig, train: Dataset, seed: int) -> tuple[Network, nn.TrainedReport]:
    spec, shape = cfg.layer_spec()
    if tuple(shape) != train.shape:
        raise ValueError(f"architecture expects inputs {tuple(shape)}, data has {train.shape}")
    net = Network.create(spec, shape, seed=derive_seed(seed, _TARGET_INIT), id="T")
    tcfg = TrainConfig(**{**cfg.train.to_dict(), "rng_seed": derive_seed(seed, _TARGET_TRAIN)})
    report = nn.train(net, train, tcfg)
    return net, report


def build_family(cfg: ExperimentConfig, target: Network, train: Dataset, seed: int) -> ModelFamily:
    gen = GeneratorConfig(**{**cfg.generator.__dict__, "rng_seed": derive_seed(seed, _FAMILY)})
    return generate_family(target, train, gen, progress=log.info)


def substitute_config(cfg: ExperimentConfig, seed: int) -> attacks.SubstituteConfig:
    sub = cfg.substitute
    tcfg = TrainConfig(**{**sub.train_cfg.to_dict(), "rng_seed": derive_seed(seed, _SUBSTITUTE, 1)})
    return dataclasses.replace(sub, seed=derive_seed(seed, _SUBSTITUTE), train_cfg=tcfg)


def attack_target(cfg: ExperimentConfig, target: Network, eval_set: Dataset, holdout: Dataset,
                  seed: int) -> attacks.AdversarialSet:
    """The configured scenario's adversarial set for one undefended model."""
    if cfg.evaluation.scenario == "blackbox":
        atk = cfg.blackbox_attack or cfg.attack
        return attacks.blackbox_attack(target.predict, substitute_config(cfg, seed), atk,
                                       eval_set, holdout=holdout)
    return attacks.generate(target, eval_set, cfg.attack)


def evaluate(cfg: ExperimentConfig, family: ModelFamily, eval_set: Dataset, holdout: Dataset,
             seed: int) -> evaluation.EvalReport:
    """Score the target alone and the defense under the configured plan."""
    plan = cfg.evaluation
    target = family.models[0]
    defense = MuldefClassifier(family, selection_seed=derive_seed(seed, _FAMILY, 1))
    report = evaluation.test_accuracy_report(defense, eval_set, seed, plan.draws)
    report.configs["experiment"] = cfg.to_dict()
    report.configs["seed"] = seed

    if plan.scenario == "whitebox":
        wb = evaluation.whitebox_eval(defense, cfg.attack, eval_set, seed, plan.draws, plan.direct)
        report.merge(wb)
        # T's accuracy on its own white-box set is the undefended baseline
        report.summary["target_whitebox_accuracy"] = wb.lookup(target.id, target.id)
        report.summary["defense_whitebox_accuracy"] = wb.summary["whitebox_accuracy"]
    else:
        atk = cfg.blackbox_attack or cfg.attack
        sub = substitute_config(cfg, seed)
        bt = evaluation.blackbox_eval(target, sub, atk, eval_set, holdout, seed, plan.draws, "T")
        bd = evaluation.blackbox_eval(defense, sub, atk, eval_set, holdout, seed, plan.draws, "muldef")
        report.merge(bt).merge(bd)
        report.summary["target_blackbox_accuracy"] = bt.summary["blackbox_accuracy[T]"]
        report.summary["defense_blackbox_accuracy"] = bd.summary["blackbox_accuracy[muldef]"]

    for other in plan.cross:
        cr = evaluation.cross_attack_eval(defense, other, eval_set, seed, plan.draws, plan.direct)
        for c in cr.cells:
            c.scenario = f"cross:{family.generator.attack.name}->{other.name}"
        report.cells.extend(cr.cells)
        report.summary[f"cross_whitebox_accuracy[{other.name}]"] = cr.summary["whitebox_accuracy"]
    report.adv_sets.clear()
    return report


_HEADLINE = ("target_whitebox_accuracy", "defense_whitebox_accuracy", "indirect_min_accuracy",
             "direct_accuracy", "target_blackbox_accuracy", "defense_blackbox_accuracy")


def run_experiment(cfg: ExperimentConfig, out_dir, save_models: bool = True) -> dict:
    """Train, defend and evaluate ``cfg.repeats`` times; write one report directory.

    Layout: ``repeat_XX/target.mdl``, ``repeat_XX/family/``, ``repeat_XX/report/``
    per repeat, plus a top-level ``cells.csv`` holding every repeat's rows and a
    ``summary.json`` with per-repeat and mean headline numbers.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_datasets(cfg)
    combined = evaluation.EvalReport()
    runs = []
    for r in range(cfg.repeats):
        seed = cfg.seed + r
        log.info("repeat %d/%d (seed %d)", r + 1, cfg.repeats, seed)
        rdir = out / f"repeat_{r:02d}"
        target, _ = train_target(cfg, train, seed)
        family = build_family(cfg, target, train, seed)
        eval_set, holdout = split_evaluation(cfg, test, seed)
        report = evaluate(cfg, family, eval_set, holdout, seed)
        if save_models:
            rdir.mkdir(parents=True, exist_ok=True)
            (rdir / "target.mdl").write_bytes(nn.save(target))
            save_family(family, rdir / "family", seed=seed)
        evaluation.emit_report(report, rdir / "report")
        combined.cells.extend(report.cells)
        runs.append({"seed": seed, "test_accuracy": report.test_accuracy,
                     **{k: report.summary[k] for k in _HEADLINE if k in report.summary}})
    mean = {}
    for k in ("target_test_accuracy", "defense_test_accuracy") + _HEADLINE:
        if k == "target_test_accuracy":
            vals = [run["test_accuracy"]["T"] for run in runs]
        elif k == "defense_test_accuracy":
            vals = [run["test_accuracy"]["muldef"] for run in runs]
        else:
            vals = [run[k] for run in runs if k in run]
        if vals:
            mean[k] = float(np.mean(vals))
    summary = {"experiment": cfg.to_dict(), "repeats": runs, "mean": mean}
    evaluation.emit_report(combined, out)  # cells.csv; summary.json is replaced below
    (out / "summary.json").write_text(json.dumps(evaluation._jsonable(summary), indent=2,
                                                 sort_keys=True) + "\n")
    return summary
