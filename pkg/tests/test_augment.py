import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import transferlab as tl
from transferlab.augment import load_augmented, save_augmented


def test_interpolate_endpoints():
    x_a = np.array([0.1, -0.2, 0.3])
    x_b = np.array([-0.5, 0.4, 0.0])
    assert np.array_equal(tl.interpolate(x_a, x_b, 0.0), x_a)
    assert np.array_equal(tl.interpolate(x_a, x_b, 1.0), x_b)


def test_interpolate_linear_case():
    out = tl.interpolate(np.zeros(2), np.ones(2), 0.25)
    assert np.allclose(out, [0.25, 0.25], atol=1e-15)


def test_interpolate_dim_mismatch():
    with pytest.raises(ValueError):
        tl.interpolate(np.zeros(3), np.zeros(4), 0.5)


@given(st.floats(0.0, 1.0), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=60, deadline=None)
def test_interpolate_distance_ratio_identity(lam, seed):
    rng = np.random.default_rng(seed)
    x_a = rng.uniform(-0.9, 0.9, 10)
    x_b = rng.uniform(-0.9, 0.9, 10)
    if np.linalg.norm(x_b - x_a) < 1e-6:
        return
    x = tl.interpolate(x_a, x_b, lam)
    ratio = np.linalg.norm(x - x_a) / np.linalg.norm(x_b - x_a)
    assert abs(ratio - lam) < 1e-12


@pytest.fixture(scope="module")
def gallery100():
    # 10 identities x 10 images = 100 samples
    return tl.gen_synthetic(seed=21, num_identities=10, per_identity=10, image_side=6)


def test_impersonation_pair_counts(gallery100):
    aug = tl.augment_dataset(gallery100, tl.PoiPair(0, 1), m=10, seed=5)
    assert len(aug.tuples) == 1000  # m * |D|
    cross = [t for t in aug.tuples if t.a == 0 and t.b == 1]
    mixed = [t for t in aug.tuples if not (t.a == 0 and t.b == 1)]
    assert len(cross) == 100   # (|D|/m = 10 pairs) x m
    assert len(mixed) == 900   # 90 pairs x m
    for t in mixed:
        assert t.a in (0, 1)
        assert t.b not in (0, 1)


def test_dodging_has_no_cross_pairs(gallery100):
    aug = tl.augment_dataset(gallery100, tl.PoiPair(3, 3), m=10, seed=5)
    assert len(aug.tuples) == 1000
    for t in aug.tuples:
        assert t.a == 3
        assert t.b != 3


def test_every_pair_yields_exactly_m_tuples(gallery100):
    m = 7
    aug = tl.augment_dataset(gallery100, tl.PoiPair(0, 1), m=m, seed=2)
    assert len(aug.tuples) % m == 0
    for start in range(0, len(aug.tuples), m):
        block = aug.tuples[start : start + m]
        assert len({(t.idx_a, t.idx_b) for t in block}) == 1


def test_tuple_blend_is_exact(gallery100):
    aug = tl.augment_dataset(gallery100, tl.PoiPair(0, 1), m=4, seed=8)
    for t in aug.tuples[::37]:
        assert np.array_equal(t.x_interp, tl.interpolate(t.x_a, t.x_b, t.lam))
        assert 0.0 <= t.lam <= 1.0
        assert t.a == int(gallery100.labels[t.idx_a])
        assert t.b == int(gallery100.labels[t.idx_b])


def test_lambda_uniformity(gallery100):
    aug = tl.augment_dataset(gallery100, tl.PoiPair(0, 1), m=10, seed=13,
                             total_tuples=10_000)
    lams = np.array([t.lam for t in aug.tuples])
    assert len(lams) == 10_000
    assert abs(lams.mean() - 0.5) < 0.02
    # KS statistic below the 1% critical value 1.63 / sqrt(n)
    ks = stats.kstest(lams, "uniform").statistic
    assert ks < 1.63 / np.sqrt(len(lams))


def test_same_seed_reproduces_tuples(gallery100):
    a = tl.augment_dataset(gallery100, tl.PoiPair(2, 5), m=3, seed=4)
    b = tl.augment_dataset(gallery100, tl.PoiPair(2, 5), m=3, seed=4)
    assert len(a.tuples) == len(b.tuples)
    for ta, tb in zip(a.tuples, b.tuples):
        assert ta.idx_a == tb.idx_a and ta.idx_b == tb.idx_b and ta.lam == tb.lam


def test_swap_orientation_swaps_roles(gallery100):
    aug = tl.augment_dataset(gallery100, tl.PoiPair(0, 1), m=10, seed=5,
                             swap_orientation=True)
    cross = [t for t in aug.tuples if {t.a, t.b} == {0, 1}]
    assert cross and all(t.a == 1 and t.b == 0 for t in cross)
    for t in aug.tuples[::53]:
        assert np.array_equal(t.x_interp, tl.interpolate(t.x_a, t.x_b, t.lam))


def test_augment_missing_poi_raises(gallery100):
    with pytest.raises(ValueError):
        tl.augment_dataset(gallery100, tl.PoiPair(0, 99), m=5, seed=1)


def test_augment_no_rest_raises():
    d = tl.gen_synthetic(seed=1, num_identities=2, per_identity=3, image_side=6)
    with pytest.raises(ValueError):
        tl.augment_dataset(d, tl.PoiPair(0, 1), m=2, seed=1)


def test_augmented_round_trip(tmp_path, gallery100):
    aug = tl.augment_dataset(gallery100, tl.PoiPair(0, 1), m=5, seed=6)
    path = tmp_path / "aug.exag"
    save_augmented(aug, path)
    loaded = load_augmented(path)
    assert loaded.poi == aug.poi
    assert loaded.m == aug.m
    assert len(loaded.tuples) == len(aug.tuples)
    for ta, tb in zip(aug.tuples, loaded.tuples):
        assert ta.idx_a == tb.idx_a and ta.idx_b == tb.idx_b
        assert ta.lam == tb.lam
        assert np.array_equal(ta.x_interp, tb.x_interp)
