"""Desk-scale acceptance run.

Three seeds, each with a target trained on a class-balanced 12000/2000 MNIST
subset, a five-model solution-2 family built from FGSM examples, a
four-model solution-1 family for comparison, C&W on a 150-example
evaluation subset, and the substitute-model black-box attack. Every
criterion prints one PASS/FAIL line, collected again at the end of the
session.
"""

import math

import numpy as np
import pytest
from scipy.stats import chisquare

import conftest
from conftest import mnist_root, requires_mnist
from muldef import attacks, cli, config, data, defense, evaluation as ev, nn, pipeline
from oracles import gradcheck, random_instance

SEEDS = (0, 1, 2)
CW_EVAL_N = 150
CW = attacks.CwConfig(confidence=0.01, max_iterations=300)
FGSM = attacks.FgsmConfig(eps=0.3)


def verdict(tag, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pct(v):
    return f"{100 * v:.2f}%"


# ---------------------------------------------------------------------------
# criterion 1 needs no data


@pytest.mark.parametrize("kind", ["dense", "conv2d", "relu", "maxpool2d", "dropout", "flatten",
                                  "softmax"])
def test_c01_gradient_check_per_layer_kind(kind):
    errs = [gradcheck(*random_instance(kind, 1000 + k)) for k in range(20)]
    verdict(f"C01 gradcheck[{kind}]", max(errs) < 1e-3,
            f"worst relative error {max(errs):.2e} over {len(errs)} float64 instances (< 1e-3)")


# ---------------------------------------------------------------------------
# the shared desk-scale runs


@pytest.fixture(scope="module")
def cfg():
    return config.load("mnist-fgsm-wb", "desk")


@pytest.fixture(scope="module")
def runs(cfg):
    if mnist_root() is None:
        pytest.skip("MNIST IDX files not found")
    cfg = config.ExperimentConfig(**{**cfg.__dict__,
                                     "dataset": config.DatasetConfig(root=str(mnist_root()))})
    train, test = pipeline.load_datasets(cfg)
    out = []
    for seed in SEEDS:
        target, _ = pipeline.train_target(cfg, train, seed)
        family = pipeline.build_family(cfg, target, train, seed)
        eval_set, holdout = pipeline.split_evaluation(cfg, test, seed)
        cw_set = data.sample_subset(eval_set, CW_EVAL_N, defense.derive_seed(seed, 7))
        clf = defense.MuldefClassifier(family, defense.derive_seed(seed, 8))

        sol1_cfg = config.ExperimentConfig(**{**cfg.__dict__, "generator": defense.GeneratorConfig(
            **{**cfg.generator.__dict__, "solution": "solution1", "num_additional": 3})})
        sol1 = pipeline.build_family(sol1_cfg, target, train, seed)

        fgsm_rep = ev.indirect_attack_eval(clf, FGSM, eval_set, seed)
        cw_rep = ev.whitebox_eval(clf, CW, cw_set, seed)
        s1 = ev.indirect_attack_eval(defense.MuldefClassifier(sol1, seed), FGSM, eval_set, seed)
        s2 = ev.indirect_attack_eval(defense.MuldefClassifier(family.prefix(4), seed), FGSM,
                                     eval_set, seed)
        sub = pipeline.substitute_config(cfg, seed)
        bb_t = ev.blackbox_eval(target, sub, FGSM, eval_set, holdout, seed, label="T")
        bb_d = ev.blackbox_eval(clf, sub, FGSM, eval_set, holdout, seed, label="muldef")
        ids = family.ids
        out.append({
            "seed": seed, "family": family, "clf": clf, "eval_set": eval_set,
            "test": {m.id: nn.accuracy(m, test) for m in family.models},
            "defense_test": clf.expected_accuracy(test.x, test.y),
            "fgsm_matrix": fgsm_rep.matrix(ids, ids),
            "fgsm_adv_T": fgsm_rep.adv_sets[("whitebox", "fgsm", "T")],
            "fgsm_indirect_min": fgsm_rep.summary["indirect_min_accuracy"],
            "cw_target": cw_rep.lookup("T", "T"),
            "cw_direct": cw_rep.summary["direct_accuracy"],
            "cw_whitebox": cw_rep.summary["whitebox_accuracy"],
            "cw_n": len(cw_set),
            "sol1_min": s1.summary["indirect_min_accuracy"],
            "sol2_min": s2.summary["indirect_min_accuracy"],
            "bb_target": bb_t.summary["blackbox_accuracy[T]"],
            "bb_defense": bb_d.summary["blackbox_accuracy[muldef]"],
            "bb_sizes": (bb_t.summary["substitute_set_size[T]"],
                         bb_d.summary["substitute_set_size[muldef]"]),
        })
    return out


def mean(runs, key):
    return float(np.mean([r[key] for r in runs]))


@requires_mnist
def test_c02_target_clean_accuracy(runs):
    acc = float(np.mean([r["test"]["T"] for r in runs]))
    per = ", ".join(pct(r["test"]["T"]) for r in runs)
    verdict("C02 target test accuracy", acc >= 0.96, f"mean {pct(acc)} ({per}) >= 96%")


@requires_mnist
def test_c03_attacks_break_the_target(runs):
    fgsm = float(np.mean([r["fgsm_matrix"][0, 0] for r in runs]))
    cw = mean(runs, "cw_target")
    verdict("C03 target under FGSM / C&W", fgsm <= 0.25 and cw <= 0.05,
            f"FGSM {pct(fgsm)} (<= 25%), C&W {pct(cw)} (<= 5%, n={runs[0]['cw_n']})")


@requires_mnist
def test_c04_indirect_minimum_beats_target(runs):
    target = float(np.mean([r["fgsm_matrix"][0, 0] for r in runs]))
    low = mean(runs, "fgsm_indirect_min")
    verdict("C04 FGSM indirect minimum", low >= target + 0.25,
            f"defense {pct(low)} vs target {pct(target)} (needs +25 points)")


@requires_mnist
def test_c05_direct_attack_on_merged_family(runs):
    direct, target = mean(runs, "cw_direct"), mean(runs, "cw_target")
    verdict("C05 direct C&W on merged family", direct >= target + 0.30,
            f"defense {pct(direct)} vs target {pct(target)} (needs +30 points)")


@requires_mnist
def test_c06_members_keep_test_accuracy(runs):
    worst = 0.0
    for r in runs:
        t = r["test"]["T"]
        gaps = [abs(a - t) for a in r["test"].values()] + [abs(r["defense_test"] - t)]
        worst = max(worst, max(gaps))
    verdict("C06 test-accuracy band", worst <= 0.03,
            f"largest member/defense gap to T {100 * worst:.2f} points (<= 3)")


@requires_mnist
def test_c07_adversarial_training_ordering(runs):
    m = np.mean([r["fgsm_matrix"] for r in runs], axis=0)  # rows: classifier, cols: adv set
    own_is_min = all(m[j, j] == m[:, j].min() for j in range(len(m)))
    later_higher = all(m[i + 1:, i].mean() > m[i, i] for i in range(len(m) - 1))
    diag = ", ".join(f"{100 * m[j, j]:.1f}" for j in range(len(m)))
    later = ", ".join(f"{100 * m[i + 1:, i].mean():.1f}" for i in range(len(m) - 1))
    verdict("C07 ordering on own/later sets", own_is_min and later_higher,
            f"own-set accuracies [{diag}] are column minima: {own_is_min}; "
            f"later-model means [{later}] exceed them: {later_higher}")


@requires_mnist
def test_c08_solution2_not_worse_than_solution1(runs):
    s1, s2 = mean(runs, "sol1_min"), mean(runs, "sol2_min")
    verdict("C08 solution 2 vs solution 1 (p=3)", s2 >= s1,
            f"solution 2 minimum {pct(s2)} vs solution 1 {pct(s1)}")


@requires_mnist
def test_c09_uniform_selection_and_expectation(runs):
    r = runs[0]
    clf = r["clf"]
    counts = np.bincount(clf.select_models(np.arange(100_000)), minlength=len(r["family"]))
    p = chisquare(counts).pvalue
    adv = r["fgsm_adv_T"]
    mc, exact = ev.adversarial_accuracy(clf, adv, draws=10, seed=11)
    se = math.sqrt(exact * (1 - exact) / (10 * len(adv)))
    ok = p > 0.01 and abs(mc - exact) <= 3 * se
    verdict("C09 selection uniformity / Monte-Carlo", ok,
            f"chi-square p={p:.3f} (> 0.01) over counts {counts.tolist()}; "
            f"MC {pct(mc)} vs exact {pct(exact)}, |diff| {abs(mc - exact):.4f} <= 3SE {3 * se:.4f}")


@requires_mnist
def test_c10_blackbox(runs):
    sizes = {s for r in runs for s in r["bb_sizes"]}
    bb_t, bb_d = mean(runs, "bb_target"), mean(runs, "bb_defense")
    wb_t = float(np.mean([r["fgsm_matrix"][0, 0] for r in runs]))
    ok = sizes == {4800} and bb_t > wb_t and bb_d >= bb_t - 0.02
    verdict("C10 black-box", ok,
            f"substitute sets {sorted(sizes)} (== 4800); target black-box {pct(bb_t)} > "
            f"white-box {pct(wb_t)}; defense black-box {pct(bb_d)} >= target - 2 points")


@requires_mnist
def test_c11_fgsm_built_defense_under_cw(runs):
    d, t = mean(runs, "cw_whitebox"), mean(runs, "cw_target")
    verdict("C11 FGSM-built defense under C&W", d >= t + 0.20,
            f"defense white-box {pct(d)} (min of indirect and direct) vs undefended {pct(t)} "
            f"(needs +20 points)")


def test_c12_repro_is_byte_identical(tmp_path):
    over = tmp_path / "reduced.yaml"
    if mnist_root() is not None:
        dataset = f"dataset: {{n_train: 1500, n_test: 400, root: '{mnist_root()}'}}\n"
    else:
        dataset = "dataset: {source: blobs, n_train: 600, n_test: 200}\n"
    over.write_text(dataset + "train: {max_epochs: 2}\ngenerator: {num_additional: 2}\n"
                    "evaluation: {n_eval: 200}\n")
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [cli.main(["repro", "mnist-fgsm-wb", "--config", str(over), "--repeats", "1",
                       "--out", str(o)]) for o in outs]
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    other = sorted(p.relative_to(outs[1]) for p in outs[1].rglob("*") if p.is_file())
    same = files == other and all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
                                  for f in files)
    verdict("C12 repro determinism", codes == [0, 0] and same and len(files) > 0,
            f"exit codes {codes}; {len(files)} files compared byte for byte, identical: {same}")
