import math

import numpy as np
import pytest
from scipy.stats import chisquare

from muldef import attacks, defense, nn
from conftest import make_dataset, small_conv_spec


def fast_cfg(**kw):
    base = dict(num_additional=2, aug_fraction=0.15, attack=attacks.FgsmConfig(eps=0.2),
                train_cfg=nn.TrainConfig(batch_size=32, max_epochs=5, learning_rate=5e-3),
                rng_seed=1)
    base.update(kw)
    return defense.GeneratorConfig(**base)


def constant_model(label, num_classes=3, dim=2, id="c"):
    net = nn.Network.create([nn.dense(dim, num_classes), nn.softmax()], (dim,), seed=0, id=id)
    net.params[0]["W"][:] = 0
    net.params[0]["b"][:] = np.eye(num_classes)[label] * 5
    return net


def family_of(models):
    return defense.ModelFamily(list(models), [], defense.GeneratorConfig())


@pytest.fixture(scope="module")
def blob_family(trained_blob_net, blob_split):
    tr, _ = blob_split
    return defense.generate_family(trained_blob_net, tr, fast_cfg())


def test_zero_additional_models(trained_blob_net, blob_split):
    tr, _ = blob_split
    fam = defense.generate_family(trained_blob_net, tr, fast_cfg(num_additional=0))
    assert fam.ids == ["T"] and len(fam.adv_sets) == 1
    assert fam.adv_sets[0].source_model_id == "T" and len(fam.adv_sets[0]) == 36


def test_family_structure(blob_family, trained_blob_net):
    assert blob_family.ids == ["T", "M1", "M2"]
    assert [a.source_model_id for a in blob_family.adv_sets] == blob_family.ids
    assert all(m.spec == trained_blob_net.spec for m in blob_family.models)
    # adversarial sets come from training examples, with their labels
    for adv in blob_family.adv_sets:
        assert len(adv) == 36 and adv.scenario == "whitebox"


def test_family_generation_is_deterministic(blob_family, trained_blob_net, blob_split):
    again = defense.generate_family(trained_blob_net, blob_split[0], fast_cfg())
    for a, b in zip(again.models, blob_family.models):
        assert nn.save(a) == nn.save(b)


def test_solution2_composition(blob_split, blob_family):
    tr, _ = blob_split
    advs = blob_family.adv_sets
    data, tags = defense.compose_training_set(tr, advs, 3, "solution2")
    assert len(data) == round(len(tr) * (1 + 3 * 0.15))
    assert tags == [("original", 240), ("T", 36), ("M1", 36), ("M2", 36)]
    np.testing.assert_array_equal(data.y[240:276], advs[0].y)


def test_solution1_composition(blob_split, blob_family):
    tr, _ = blob_split
    data, tags = defense.compose_training_set(tr, blob_family.adv_sets, 2, "solution1")
    assert len(data) == 276 and tags == [("original", 240), ("M1", 36)]


def test_generator_config_validation():
    with pytest.raises(ValueError, match="solution"):
        defense.GeneratorConfig(solution="solution3")
    with pytest.raises(ValueError, match="aug_fraction"):
        defense.GeneratorConfig(aug_fraction=0.0)
    cfg = fast_cfg(attack=attacks.CwConfig(confidence=10))
    assert defense.GeneratorConfig.from_dict(cfg.to_dict()) == cfg


def test_partial_failure_reports_built_members(trained_blob_net, blob_split, monkeypatch):
    calls = {"n": 0}
    real = nn.train

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise nn.NumericalError("diverged")
        return real(*args, **kw)

    monkeypatch.setattr(defense.nn, "train", flaky)
    with pytest.raises(defense.FamilyGenerationError, match="M2") as err:
        defense.generate_family(trained_blob_net, blob_split[0], fast_cfg())
    assert err.value.partial.ids == ["T", "M1"]


def test_convergence_stop(trained_blob_net, blob_split):
    cfg = fast_cfg(num_additional=4,
                   convergence_stop=defense.ConvergenceStop(enabled=True, min_delta=1.0))
    fam = defense.generate_family(trained_blob_net, blob_split[0], cfg)
    # any change is below 1.0, so generation halts right after the second new model
    assert fam.ids == ["T", "M1", "M2"] and fam.stop_reason == "converged"
    assert len(fam.history) == 2


def test_single_member_always_selected():
    clf = defense.MuldefClassifier(family_of([constant_model(0)]), selection_seed=4)
    assert set(clf.select_models(np.arange(1000)).tolist()) == {0}


def test_selection_is_uniform():
    clf = defense.MuldefClassifier(family_of([constant_model(0)] * 5), selection_seed=7)
    counts = np.bincount(clf.select_models(np.arange(100_000)), minlength=5)
    assert np.all(np.abs(counts / 1e5 - 0.2) < 0.01)
    assert chisquare(counts).pvalue > 0.01


def test_selection_replays():
    clf = defense.MuldefClassifier(family_of([constant_model(0)] * 5), selection_seed=7)
    other = defense.MuldefClassifier(family_of([constant_model(0)] * 5), selection_seed=7)
    assert [clf.select_model(k) for k in range(50)] == [other.select_model(k) for k in range(50)]
    shifted = defense.MuldefClassifier(family_of([constant_model(0)] * 5), selection_seed=8)
    assert [clf.select_model(k) for k in range(50)] != [shifted.select_model(k) for k in range(50)]


def test_consensus_ignores_draw():
    clf = defense.MuldefClassifier(family_of([constant_model(2, id=f"m{i}") for i in range(4)]))
    x = np.zeros(2, np.float32)
    assert {clf.classify(x, k) for k in range(200)} == {2}


def test_two_way_disagreement_is_a_coin_flip():
    clf = defense.MuldefClassifier(family_of([constant_model(0), constant_model(1)]), 3)
    n = 20_000
    labels = clf.predict(np.zeros((n, 2), np.float32))
    assert abs(np.mean(labels == 0) - 0.5) < 3 * math.sqrt(0.25 / n)


def test_monte_carlo_matches_expected_accuracy(blob_family, blob_split):
    _, te = blob_split
    adv = attacks.fgsm(blob_family.models[0], te, attacks.FgsmConfig(eps=0.2))
    clf = defense.MuldefClassifier(blob_family, 5)
    exact = clf.expected_accuracy(adv.x, adv.y)
    assert exact == pytest.approx(np.mean([nn.accuracy(m, adv.x, adv.y) for m in blob_family.models]))
    hits = np.concatenate([clf.predict(adv.x, draw_offset=r * len(adv)) == adv.y for r in range(50)])
    se = hits.std() / math.sqrt(len(hits))
    assert abs(hits.mean() - exact) <= 3 * max(se, 1e-12)


def test_classify_rejects_mismatched_draws():
    clf = defense.MuldefClassifier(family_of([constant_model(0)]))
    with pytest.raises(ValueError, match="draw index"):
        clf.classify_batch(np.zeros((3, 2)), [0, 1])


def test_merged_identical_models_match_member(trained_blob_net, blob_split):
    _, te = blob_split
    merged = defense.merged_model([trained_blob_net] * 3)
    p_m, _ = merged.forward(te.x)
    p_t, _ = trained_blob_net.forward(te.x)
    np.testing.assert_allclose(p_m, p_t, rtol=1e-5, atol=1e-7)


def test_merged_averages_probabilities():
    a = nn.Network.create([nn.dense(1, 2), nn.softmax()], (1,), seed=0)
    a.params[0]["W"][:] = 0
    a.params[0]["b"][:] = [60, -60]
    b = a.copy(id="b")
    b.params[0]["b"][:] = [-60, 60]
    probs, logits = defense.merged_model([a, b]).forward(np.zeros((1, 1), np.float32))
    np.testing.assert_allclose(probs, [[0.5, 0.5]], atol=1e-6)
    np.testing.assert_allclose(logits, np.log([[0.5, 0.5]]), atol=1e-5)


@pytest.mark.parametrize("rule", ["mean_prob", "mean_logits"])
def test_merged_gradient_matches_finite_differences(rule):
    from oracles import central_difference, relative_error
    spec, shape = small_conv_spec()
    models = [nn.Network.create(spec, shape, seed=s, dtype=np.float64) for s in range(3)]
    merged = defense.merged_model(models, rule)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=(2,) + shape)
    y = np.array([0, 2])

    def loss():
        probs, _ = merged.forward(x)
        return -np.mean(np.log(probs[np.arange(2), y]))

    probs, logits, pull = merged.vjp(x)
    d = probs.copy()
    d[np.arange(2), y] -= 1
    g = pull(d / 2)
    worst = 0.0
    for idx in list(np.ndindex(x.shape))[::3]:
        worst = max(worst, relative_error(central_difference(loss, x, idx), g[idx]))
    assert worst < 1e-3


def test_family_persistence(blob_family, tmp_path):
    defense.save_family(blob_family, tmp_path / "fam", seed=1)
    back = defense.load_family(tmp_path / "fam")
    assert back.ids == blob_family.ids and back.generator == blob_family.generator
    for a, b in zip(back.models, blob_family.models):
        assert nn.save(a) == nn.save(b)
    for a, b in zip(back.adv_sets, blob_family.adv_sets):
        assert np.array_equal(a.x, b.x) and np.array_equal(a.index, b.index)
    first = (tmp_path / "fam" / "manifest.json").read_bytes()
    defense.save_family(back, tmp_path / "again", seed=1)
    assert (tmp_path / "again" / "manifest.json").read_bytes() == first
