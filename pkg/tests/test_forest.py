import numpy as np
import pytest

from posecal.core import InvalidArgument
from posecal.forest import (DecisionTree, Forest, ForestConfig, dumps_forests, feature_importance,
                            is_patch_bank, load_forests, loads_forests, predict_bank, predict_proba,
                            predict_tree, save_forests, train_forest, train_patch_bank, train_tree)

from forest_oracle import forest_proba, walk


def toy(n=300, d=12, seed=0, classes=16):
    rng = np.random.default_rng(seed)
    y = rng.integers(1, classes + 1, size=n)
    X = rng.standard_normal((n, d)).astype(np.float32)
    X[:, 0] += y * 0.8
    X[:, 3] -= (y % 4) * 1.5
    return X, y


def leaf(counts):
    c = np.asarray(counts, dtype=np.int64)[None]
    return DecisionTree(np.array([-1]), np.zeros(1, np.float32), np.array([-1]), np.array([-1]), c)


def check_structure(tree, cfg, d):
    referenced = np.r_[tree.left[~tree.is_leaf], tree.right[~tree.is_leaf]]
    assert sorted(referenced.tolist()) == list(range(1, tree.n_nodes))
    for i in np.flatnonzero(~tree.is_leaf):
        assert tree.left[i] > i and tree.right[i] > i
        assert 0 <= tree.feature[i] < d
        assert np.array_equal(tree.counts[i], tree.counts[tree.left[i]] + tree.counts[tree.right[i]])
    assert tree.depth() <= cfg.max_depth
    assert np.all(tree.counts[tree.is_leaf].sum(axis=1) >= cfg.min_samples_leaf)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        ForestConfig(n_trees=0).resolved(10)
    with pytest.raises(InvalidArgument):
        ForestConfig(features_per_split=11).resolved(10)
    with pytest.raises(InvalidArgument):
        ForestConfig(laplace=0).resolved(10)
    assert ForestConfig().resolved(576).features_per_split == 24
    assert ForestConfig().resolved(20736).features_per_split == 144


def test_bad_training_data():
    with pytest.raises(InvalidArgument):
        train_tree(np.zeros((0, 3)), np.zeros(0, int))
    with pytest.raises(InvalidArgument):
        train_tree(np.zeros((2, 3)), np.array([0, 1]))
    with pytest.raises(InvalidArgument):
        train_tree(np.zeros((2, 3)), np.array([1, 17]))
    with pytest.raises(InvalidArgument):
        train_tree(np.zeros((2, 3)), np.array([1]))


def test_single_sample_gives_single_leaf():
    t = train_tree(np.ones((1, 5)), np.array([7]))
    assert t.n_nodes == 1
    assert t.counts[0, 6] == 1 and t.counts.sum() == 1


def test_two_separable_samples():
    X = np.array([[0.0, 5.0], [1.0, 5.0]])
    t = train_tree(X, np.array([2, 9]), ForestConfig(features_per_split=2, bootstrap=False))
    assert t.n_nodes == 3 and t.depth() == 1
    assert t.feature[0] == 0
    assert t.threshold[0] == np.float32(0.5)
    assert t.counts[1, 1] == 1 and t.counts[2, 8] == 1


def test_max_depth_zero():
    X, y = toy(50)
    t = train_tree(X, y, ForestConfig(max_depth=0))
    assert t.n_nodes == 1
    assert np.array_equal(t.counts[0], np.bincount(y - 1, minlength=16))


def test_predict_tree_smoothing():
    assert np.allclose(predict_tree(leaf(np.zeros(16)), np.zeros(3)), 1 / 16)
    p = predict_tree(leaf(np.r_[16, np.zeros(15)]), np.zeros(3))
    assert p[0] == 17 / 32 and np.all(p[1:] == 1 / 32)
    p = predict_tree(leaf(np.arange(16)), np.zeros(3), laplace=0.5)
    assert abs(p.sum() - 1) < 1e-15


def test_tree_structure_invariants():
    X, y = toy(400)
    for cfg in (ForestConfig(max_depth=6), ForestConfig(min_samples_leaf=5), ForestConfig()):
        t = train_tree(X, y, cfg)
        check_structure(t, cfg.resolved(X.shape[1]), X.shape[1])


def test_unbounded_tree_fits_training_data():
    X, y = toy(200)
    t = train_tree(X, y, ForestConfig(features_per_split=12))
    assert np.all(t.counts[t.is_leaf].max(axis=1) == t.counts[t.is_leaf].sum(axis=1)) \
        or len(np.unique(X, axis=0)) < len(X)
    assert np.mean(np.argmax(t.predict_proba(X), 1) + 1 == y) == 1.0


def test_linearly_separable_two_class():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((200, 5)).astype(np.float32)
    y = np.where(X[:, 2] > 0.1, 1, 2)
    f = train_forest(X, y, ForestConfig(n_trees=5, max_depth=1, features_per_split=5, seed=1))
    assert np.mean(np.argmax(f.predict_proba(X), 1) + 1 == y) == 1.0


def test_training_reaches_above_chance():
    X, y = toy(1000, seed=2)
    f = train_forest(X, y, ForestConfig(n_trees=100, seed=3))
    assert np.mean(np.argmax(f.predict_proba(X), 1) + 1 == y) > 1 / 16


def test_forest_determinism_and_threads():
    X, y = toy(300)
    cfg = ForestConfig(n_trees=8, seed=11)
    a = train_forest(X, y, cfg)
    b = train_forest(X, y, cfg, threads=4)
    assert dumps_forests([a]) == dumps_forests([b])
    c = train_forest(X, y, ForestConfig(n_trees=8, seed=12))
    assert dumps_forests([a]) != dumps_forests([c])


def test_single_tree_without_bootstrap():
    X, y = toy(200)
    cfg = ForestConfig(n_trees=1, bootstrap=False, seed=9)
    f = train_forest(X, y, cfg)
    assert np.array_equal(f.predict_proba(X), f.trees[0].predict_proba(X))


def test_identical_trees_average_to_one_tree():
    X, y = toy(100)
    t = train_tree(X, y)
    f = Forest(ForestConfig(n_trees=3).resolved(12), [t, t, t], 0, 12)
    assert np.allclose(f.predict_proba(X), t.predict_proba(X), rtol=0, atol=1e-15)


def test_delta_trees_average():
    cfg = ForestConfig(n_trees=2, laplace=1e-12).resolved(3)
    f = Forest(cfg, [leaf(np.eye(16, dtype=int)[0] * 10), leaf(np.eye(16, dtype=int)[1] * 10)], 0, 3)
    p = predict_proba(f, np.zeros(3))
    assert p[0] == pytest.approx(0.5) and p[1] == pytest.approx(0.5)


def test_strict_positivity_and_normalization():
    X, y = toy(300)
    f = train_forest(X, y, ForestConfig(n_trees=10, seed=2))
    p = f.predict_proba(np.random.default_rng(9).standard_normal((500, 12)) * 5)
    assert np.all(p > 0)
    assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-9


def test_brute_force_oracle():
    X, y = toy(500, d=20)
    f = train_forest(X, y, ForestConfig(n_trees=15, max_depth=12, seed=21))
    Q = np.random.default_rng(5).standard_normal((1000, 20)).astype(np.float32) * 3
    assert np.max(np.abs(f.predict_proba(Q) - forest_proba(f, Q))) <= 1e-12
    for t in f.trees[:3]:
        assert np.array_equal(t.apply(Q[:50]), [walk(t, q) for q in Q[:50]])


def test_serialization_round_trip(tmp_path):
    X, y = toy(300)
    f = train_forest(X, y, ForestConfig(n_trees=6, seed=4), patch_index=0)
    save_forests(tmp_path / "m.pcf", [f])
    raw = (tmp_path / "m.pcf").read_bytes()
    assert raw[:4] == b"PCF1"
    (g,) = load_forests(tmp_path / "m.pcf")
    assert g == f
    Q = np.random.default_rng(0).standard_normal((200, 12)).astype(np.float32)
    assert f.predict_proba(Q).tobytes() == g.predict_proba(Q).tobytes()
    assert dumps_forests([g]) == raw
    with pytest.raises(InvalidArgument):
        loads_forests(b"NOPE" + raw[4:])
    with pytest.raises(InvalidArgument):
        loads_forests(raw[:4] + (2).to_bytes(4, "little") + raw[8:])


def _bank_data(n=120, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(1, 17, size=n)
    F = rng.random((n, 36, 8)).astype(np.float32)
    F[:, :, 0] += (y[:, None] * np.arange(1, 37)[None, :] % 7) / 7.0
    return F, y


def test_patch_bank_shape_and_determinism():
    F, y = _bank_data()
    cfg = ForestConfig(n_trees=2, max_depth=4, seed=8)
    bank = train_patch_bank(F, y, cfg)
    assert len(bank) == 36 and [f.patch_index for f in bank] == list(range(36))
    assert is_patch_bank(bank)
    assert dumps_forests(bank) == dumps_forests(train_patch_bank(F, y, cfg, threads=3))
    q = predict_bank(bank, F[:5])
    assert q.shape == (5, 36, 16)
    assert len({f.config.seed for f in bank}) == 36


def test_patch_bank_permutation():
    F, y = _bank_data()
    # every feature is scored and no resampling, so trees do not depend on the seed
    cfg = ForestConfig(n_trees=1, max_depth=5, bootstrap=False, features_per_split=8, seed=1)
    perm = np.random.default_rng(3).permutation(36)
    bank = train_patch_bank(F, y, cfg)
    permuted = train_patch_bank(F[:, perm], y, cfg)
    q, qp = predict_bank(bank, F), predict_bank(permuted, F[:, perm])
    assert np.array_equal(qp, q[:, perm])


def test_feature_importance():
    f = Forest(ForestConfig(n_trees=1).resolved(10), [leaf(np.ones(16, int))], 0, 10)
    assert not feature_importance(f).any()
    rng = np.random.default_rng(1)
    X = rng.random((300, 10)).astype(np.float32)
    y = np.where(X[:, 7] > 0.5, 3, 5)
    f = train_forest(X, y, ForestConfig(n_trees=10, seed=3))
    imp = feature_importance(f)
    assert np.argmax(imp) == 7 and imp[7] > 0.5
    assert np.all(imp >= 0) and imp.sum() == pytest.approx(1.0)
