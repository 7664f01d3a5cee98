import math

import numpy as np
import pytest

from muldef import attacks, defense, evaluation as ev, nn
from conftest import make_dataset

FGSM = attacks.FgsmConfig(eps=0.2)
QUICK_CW = attacks.CwConfig(max_iterations=40, binary_search_steps=2)


@pytest.fixture(scope="module")
def family(trained_blob_net, blob_split):
    cfg = defense.GeneratorConfig(num_additional=2, attack=FGSM, rng_seed=2,
                                  train_cfg=nn.TrainConfig(batch_size=32, max_epochs=5,
                                                           learning_rate=5e-3))
    return defense.generate_family(trained_blob_net, blob_split[0], cfg)


def test_perfect_members_score_one(trained_blob_net, blob_split):
    _, te = blob_split
    right = te.y == trained_blob_net.predict(te.x)
    clean = attacks.AdversarialSet(te.x[right], te.y[right], np.flatnonzero(right), "test", FGSM)
    clf = defense.MuldefClassifier(defense.ModelFamily([trained_blob_net] * 3, [], None))
    for draws in (1, 7):
        assert ev.adversarial_accuracy(clf, clean, draws=draws) == (1.0, 1.0)


def test_monte_carlo_within_binomial_tolerance(family, blob_split):
    _, te = blob_split
    clf = defense.MuldefClassifier(family, 9)
    adv = attacks.fgsm(family.models[0], te, FGSM)
    for seed in range(5):
        mc, exact = ev.adversarial_accuracy(clf, adv, draws=20, seed=seed)
        assert abs(mc - exact) <= ev.monte_carlo_tolerance(exact, 20, len(adv)) + 1e-12


def test_plain_network_has_no_exact_term(trained_blob_net, blob_split):
    _, te = blob_split
    adv = attacks.fgsm(trained_blob_net, te, FGSM)
    acc, exact = ev.adversarial_accuracy(trained_blob_net, adv)
    assert exact is None and acc == nn.accuracy(trained_blob_net, adv.x, adv.y)


def test_empty_set_rejected(trained_blob_net):
    empty = attacks.AdversarialSet(np.zeros((0, 4, 4, 1)), np.zeros(0, int), np.zeros(0, int), "T", FGSM)
    with pytest.raises(ValueError, match="empty"):
        ev.adversarial_accuracy(trained_blob_net, empty)


def test_family_of_one_reduces_to_plain_attack(trained_blob_net, blob_split):
    _, te = blob_split
    clf = defense.MuldefClassifier(defense.ModelFamily([trained_blob_net], [], None))
    rep = ev.indirect_attack_eval(clf, FGSM, te)
    adv = attacks.fgsm(trained_blob_net, te, FGSM)
    assert rep.summary["indirect_min_accuracy"] == nn.accuracy(trained_blob_net, adv.x, adv.y)


def test_indirect_report_shape(family, blob_split):
    _, te = blob_split
    rep = ev.indirect_attack_eval(defense.MuldefClassifier(family), FGSM, te, draws=3)
    ids = family.ids
    m = rep.matrix(ids + ["muldef"], ids)
    assert m.shape == (4, 3)
    np.testing.assert_allclose(m[-1], m[:-1].mean(axis=0))
    assert rep.summary["indirect_min_accuracy"] == m[-1].min()
    assert rep.summary["indirect_min_source"] == ids[int(m[-1].argmin())]


def test_direct_attack_requires_cw(family, blob_split):
    with pytest.raises(TypeError, match="C&W"):
        ev.direct_attack_eval(defense.MuldefClassifier(family), FGSM, blob_split[1])


def test_direct_on_identical_members_equals_single_attack(trained_blob_net, blob_split):
    te = blob_split[1].take(np.arange(30))
    clf = defense.MuldefClassifier(defense.ModelFamily([trained_blob_net] * 3, [], None))
    rep = ev.direct_attack_eval(clf, QUICK_CW, te)
    single = attacks.cw_l2(trained_blob_net, te, QUICK_CW)
    alone = nn.accuracy(trained_blob_net, single.x, single.y)
    assert abs(rep.summary["direct_accuracy"] - alone) <= 1 / 30 + 1e-12


def test_whitebox_takes_the_stronger_attack(family, blob_split):
    te = blob_split[1].take(np.arange(30))
    rep = ev.whitebox_eval(defense.MuldefClassifier(family), QUICK_CW, te)
    s = rep.summary
    assert s["whitebox_accuracy"] == min(s["indirect_min_accuracy"], s["direct_accuracy"])


def test_cross_attack_with_same_attack_matches_whitebox(family, blob_split):
    _, te = blob_split
    clf = defense.MuldefClassifier(family)
    cross = ev.cross_attack_eval(clf, FGSM, te)
    plain = ev.whitebox_eval(clf, FGSM, te)
    assert cross.summary["whitebox_accuracy"] == plain.summary["whitebox_accuracy"]
    assert cross.summary["built_with"] == cross.summary["attacked_by"] == "fgsm"


def test_blackbox_report(family, blob_split):
    tr, te = blob_split
    cfg = attacks.SubstituteConfig(holdout_size=20, augmentation_epochs=2,
                                   train_cfg=nn.TrainConfig(batch_size=8, max_epochs=3))
    rep = ev.blackbox_eval(defense.MuldefClassifier(family), cfg, FGSM, te, tr.take(np.arange(20)))
    assert rep.summary["substitute_set_size[muldef]"] == 80
    assert rep.summary["blackbox_queries[muldef]"] == 80
    assert 0 <= rep.summary["blackbox_accuracy[muldef]"] <= 1


def test_report_rejects_out_of_range_accuracy():
    with pytest.raises(ValueError):
        ev.EvalReport().add("T", "T", "fgsm", "whitebox", 0, 1.5, 10)


def test_sweep_zero_fraction_is_plain_retrain(trained_blob_net, blob_split):
    tr, te = blob_split
    tcfg = nn.TrainConfig(batch_size=32, max_epochs=3)
    out = ev.sweep_augmentation(trained_blob_net, tr, te, FGSM, [0.0, 0.15], tcfg, seed=4)
    assert len(out["retrained"]) == len(out["separate"]) == 2
    d = nn.Network.create(trained_blob_net.spec, trained_blob_net.input_shape,
                          seed=defense.derive_seed(4, 0, 9))
    nn.train(d, tr, nn.TrainConfig(**{**tcfg.to_dict(), "rng_seed": defense.derive_seed(4, 0, 8)}))
    adv = attacks.fgsm(trained_blob_net, te, FGSM)
    assert out["separate"][0] == nn.accuracy(d, adv.x, adv.y)


def test_family_size_one_is_target_baseline(trained_blob_net, blob_split):
    tr, te = blob_split
    gen = defense.GeneratorConfig(attack=FGSM, train_cfg=nn.TrainConfig(batch_size=32, max_epochs=2))
    out = ev.sweep_family_size(trained_blob_net, tr, te, gen, [1, 2])
    adv = attacks.fgsm(trained_blob_net, te, FGSM)
    assert out["sizes"] == [1, 2]
    assert out["whitebox"][0] == nn.accuracy(trained_blob_net, adv.x, adv.y)


def test_emit_report_round_trip_and_determinism(family, blob_split, tmp_path):
    _, te = blob_split
    clf = defense.MuldefClassifier(family, 1)
    rep = ev.indirect_attack_eval(clf, FGSM, te, seed=1, draws=2)
    rep.configs["generator"] = family.generator.to_dict()
    ev.emit_report(rep, tmp_path / "a")
    cells = ev.read_cells(tmp_path / "a")
    assert cells == rep.cells
    assert (tmp_path / "a" / "cells.csv").read_text().splitlines()[0] == ",".join(ev.CSV_HEADER)
    again = ev.indirect_attack_eval(clf, FGSM, te, seed=1, draws=2)
    again.configs["generator"] = family.generator.to_dict()
    ev.emit_report(again, tmp_path / "b")
    for name in ("cells.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_evaluation_does_not_mutate(family, blob_split):
    _, te = blob_split
    before = [nn.save(m) for m in family.models]
    x0 = te.x.copy()
    ev.whitebox_eval(defense.MuldefClassifier(family), FGSM, te)
    assert [nn.save(m) for m in family.models] == before
    assert np.array_equal(te.x, x0)
