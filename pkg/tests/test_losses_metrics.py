import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings, strategies as st

from grmp import autodiff as ad
from grmp.losses import quality_loss, rescale_mos, semantic_kl_loss
from grmp.metrics import average_ranks, plcc, srcc


# ---------------------------------------------------------------- oracles

def brute_ranks(xs):
    """O(n^2) average rank: 1 + #smaller + (#equal - 1) / 2."""
    return [1 + sum(y < x for y in xs) + (sum(y == x for y in xs) - 1) / 2 for x in xs]


def direct_pearson(xs, ys):
    """Textbook single-pass formula, independent of the centred implementation."""
    n = len(xs)
    sx, sy = math.fsum(xs), math.fsum(ys)
    sxx = math.fsum(x * x for x in xs)
    syy = math.fsum(y * y for y in ys)
    sxy = math.fsum(x * y for x, y in zip(xs, ys))
    return (n * sxy - sx * sy) / math.sqrt((n * sxx - sx * sx) * (n * syy - sy * sy))


def brute_srcc(xs, ys):
    return direct_pearson(brute_ranks(list(xs)), brute_ranks(list(ys)))


# ---------------------------------------------------------------- quality loss

def test_quality_loss_examples():
    assert quality_loss(np.array([0.5]), np.array([1.0])).item() == pytest.approx(math.log(2), abs=1e-12)
    assert quality_loss(np.array([0.5]), np.array([0.0])).item() == pytest.approx(math.log(2), abs=1e-12)
    assert quality_loss(np.array([1 - 1e-12]), np.array([1.0])).item() < 1e-9


def test_quality_loss_symmetry_and_minimum():
    rng = np.random.default_rng(0)
    p, y = rng.uniform(0.01, 0.99, 20), rng.uniform(0, 1, 20)
    a = quality_loss(p, y).item()
    b = quality_loss(1 - p, 1 - y).item()
    assert a == pytest.approx(b, rel=1e-12)
    grid = np.linspace(0.01, 0.99, 99)
    for target in (0.0, 1.0, 0.3):
        vals = [quality_loss(np.array([q]), np.array([target])).item() for q in grid]
        assert np.all(np.diff(vals, 2) > -1e-12)  # convex on the grid
    vals0 = [quality_loss(np.array([q]), np.array([0.0])).item() for q in grid]
    assert np.argmin(vals0) == 0


def test_quality_loss_rejects_bad_labels():
    with pytest.raises(ValueError):
        quality_loss(np.array([0.5]), np.array([1.2]))
    with pytest.raises(ValueError):
        quality_loss(np.array([0.5]), np.array([-0.1]))


def test_quality_loss_finite_at_saturation():
    v = quality_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0])).item()
    assert np.isfinite(v) and v == pytest.approx(-math.log(1e-12))


# ---------------------------------------------------------------- KL

def test_kl_examples():
    p = np.full(9, 1 / 9)
    assert semantic_kl_loss(p, p).item() == 0.0
    a = np.zeros(9)
    a[:2] = [0.5, 0.5]
    b = np.zeros(9)
    b[:2] = [0.25, 0.75]
    ref = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert ref == pytest.approx(0.143841036225890, abs=1e-14)
    assert semantic_kl_loss(a, b).item() == pytest.approx(ref, abs=1e-12)


def test_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(1)
    p = rng.dirichlet(np.ones(9), size=1000)
    q = rng.dirichlet(np.ones(9), size=1000)
    per_row = [semantic_kl_loss(p[i], q[i]).item() for i in range(1000)]
    assert min(per_row) >= 0
    assert semantic_kl_loss(p, q).item() == pytest.approx(np.mean(per_row), rel=1e-12)
    np.testing.assert_allclose(per_row, scipy.stats.entropy(p, q, axis=1), rtol=1e-10)


def test_kl_rejects_non_distributions():
    with pytest.raises(ValueError):
        semantic_kl_loss(np.full(9, 0.2), np.full(9, 1 / 9))
    with pytest.raises(ValueError):
        semantic_kl_loss(np.full(9, 1 / 9), -np.full(9, 1 / 9))


def test_kl_reference_carries_no_gradient():
    ref = ad.Tensor(np.full(3, 1 / 3), requires_grad=True)
    q = ad.Tensor(np.array([0.2, 0.3, 0.5]), requires_grad=True)
    g = ad.backward(semantic_kl_loss(ref, q))
    assert ref.node_id not in g
    np.testing.assert_allclose(g[q.node_id], -(1 / 3) / q.data)


# ---------------------------------------------------------------- rescale

def test_rescale_examples():
    np.testing.assert_array_equal(rescale_mos([10, 30, 50]), [0, 0.5, 1])
    np.testing.assert_array_equal(rescale_mos([0.0, 0.3, 1.0]), [0.0, 0.3, 1.0])
    with pytest.raises(ValueError, match="degenerate label set"):
        rescale_mos([2.0, 2.0, 2.0])
    with pytest.raises(ValueError):
        rescale_mos([1.0])


# ---------------------------------------------------------------- ranks / correlation

def test_average_ranks_match_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(50):
        x = rng.integers(0, 5, size=rng.integers(2, 30)).astype(float)
        np.testing.assert_array_equal(average_ranks(x), brute_ranks(list(x)))


def test_srcc_examples():
    xs = np.arange(10.0)
    assert srcc(xs, xs ** 3 + 2) == 1.0
    assert srcc(xs, -xs) == -1.0
    v = srcc([1, 2, 2, 4], [1, 3, 2, 4])
    assert v == pytest.approx(brute_srcc([1, 2, 2, 4], [1, 3, 2, 4]), abs=1e-12)
    assert v == pytest.approx(0.9486832980505138, abs=1e-12)


def test_plcc_examples():
    rng = np.random.default_rng(3)
    xs = rng.normal(size=10)
    assert plcc(xs, 2 * xs + 3) == pytest.approx(1.0, abs=1e-15)
    assert plcc(xs, -xs) == pytest.approx(-1.0, abs=1e-15)
    ys = rng.normal(size=10)
    assert plcc(xs, ys) == pytest.approx(direct_pearson(list(xs), list(ys)), abs=1e-12)


def _samples(n_samples=100, seed=4):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_samples):
        n = int(rng.integers(3, 40))
        if i % 2:
            x = rng.integers(0, 6, n).astype(float)
            y = rng.integers(0, 6, n).astype(float)
        else:
            x, y = rng.normal(size=n), rng.normal(size=n)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            x[0], y[0] = x[0] + 1, y[0] + 1
        out.append((x, y))
    return out


def test_metrics_against_oracles_and_scipy():
    for x, y in _samples():
        assert abs(srcc(x, y) - brute_srcc(x, y)) <= 1e-12
        assert abs(plcc(x, y) - direct_pearson(list(x), list(y))) <= 1e-12
        assert srcc(x, y) == pytest.approx(scipy.stats.spearmanr(x, y)[0], abs=1e-12)
        assert plcc(x, y) == pytest.approx(scipy.stats.pearsonr(x, y)[0], abs=1e-12)


def test_srcc_monotone_invariance_exact():
    for x, y in _samples(seed=5):
        base = srcc(x, y)
        for t in (np.exp, lambda v: v ** 3, lambda v: 3.0 * v - 7.0):
            assert srcc(t(x), y) == base
            assert srcc(x, t(y)) == base


def test_plcc_affine_invariance():
    for x, y in _samples(20, seed=6):
        base = plcc(x, y)
        assert plcc(2.5 * x + 1, y) == pytest.approx(base, abs=1e-12)
        assert plcc(-x, y) == pytest.approx(-base, abs=1e-12)


def test_zero_variance_errors():
    with pytest.raises(ValueError):
        plcc([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        srcc([1, 2, 3], [5, 5, 5])
    with pytest.raises(ValueError):
        srcc([1, 2], [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), min_size=3, max_size=25))
def test_srcc_bounds_property(pairs):
    x = np.array([p[0] for p in pairs], float)
    y = np.array([p[1] for p in pairs], float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return
    r = srcc(x, y)
    assert -1 <= r <= 1
    assert r == pytest.approx(brute_srcc(x, y), abs=1e-12)
