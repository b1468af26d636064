import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from nolab import tensor as T
from nolab.analysis import (
    PcaModel,
    cosine_distance_curve,
    cosine_distances,
    expand_rows,
    fit_pca,
    gaas_directions,
    gaas_success,
    grid_axis,
    loss_surface_grid,
    project,
    reconstruct,
    sylvester_hadamard,
    tap_features,
    variance_curve,
)
from nolab.data import Dataset
from nolab.models import build_model
from nolab.noise import init_noise
from nolab.tensor import ShapeError


def eig_oracle(f):
    """Singular values and right vectors from the eigendecomposition of the centred scatter matrix."""
    c = f - f.mean(axis=0)
    lam, vec = np.linalg.eigh(c.T @ c)
    order = np.argsort(lam)[::-1]
    lam, vec = lam[order], vec[:, order]
    lam = np.where(lam < max(lam[0], 0) * 1e-12, 0.0, lam)
    return np.sqrt(lam), vec


def check_against_oracle(f):
    pca = fit_pca(f)
    s_ref, v_ref = eig_oracle(f)
    r = pca.n_components
    np.testing.assert_allclose(pca.singular_values, s_ref[:r], rtol=0, atol=1e-8)
    np.testing.assert_allclose(pca.components.T @ pca.components, np.eye(r), atol=1e-8)
    for i in range(pca.rank):
        assert abs(abs(pca.components[:, i] @ v_ref[:, i]) - 1) <= 1e-8


@settings(max_examples=100, deadline=None, derandomize=True)
@given(n=st.integers(2, 8), d=st.integers(1, 8), seed=st.integers(0, 2**32 - 1))
def test_pca_matches_covariance_eigendecomposition(n, d, seed):
    check_against_oracle(np.random.default_rng(seed).normal(size=(n, d)))


def test_points_on_a_line():
    f = np.array([[0.0, 0.0], [1.0, 2.0], [2.0, 4.0]])
    pca = fit_pca(f)
    assert pca.singular_values[1] == 0.0
    direction = np.array([1.0, 2.0]) / np.sqrt(5)
    assert abs(pca.components[:, 0] @ direction) == pytest.approx(1.0, abs=1e-12)
    # hand covariance [[1, 2], [2, 4]] has eigenvalues 5 and 0; scatter = 2 * covariance
    assert pca.singular_values[0] == pytest.approx(np.sqrt(10), abs=1e-12)


def test_centred_orthogonal_data_recovers_axes():
    f = np.array([[3.0, 0.0], [-3.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    pca = fit_pca(f)
    np.testing.assert_allclose(np.abs(pca.components), np.eye(2), atol=1e-12)


def test_identical_rows_give_zero_spectrum():
    pca = fit_pca(np.ones((4, 3)))
    assert np.all(pca.singular_values == 0) and pca.rank == 0
    with pytest.raises(ValueError):
        variance_curve(pca)


def test_projection_contracts():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(30, 6)) * np.array([5, 3, 2, 1, 0.5, 0.1])
    pca = fit_pca(f)
    p = project(pca, f)
    assert np.all(np.diff(p.var(axis=0)) <= 1e-12)
    np.testing.assert_allclose(project(pca, pca.mean[None]), 0, atol=1e-12)
    np.testing.assert_allclose(reconstruct(pca, p), f, atol=1e-6)
    d_in = np.linalg.norm(f[:, None] - f[None], axis=-1)
    d_pc = np.linalg.norm(p[:, None] - p[None], axis=-1)
    np.testing.assert_allclose(d_pc, d_in, atol=1e-10)
    with pytest.raises(ShapeError):
        project(pca, np.zeros((2, 5)))


def test_wide_features_reconstruct():
    f = np.random.default_rng(1).normal(size=(5, 40))
    pca = fit_pca(f)
    assert pca.rank == 4
    u = reconstruct(pca, project(pca, f))
    assert np.linalg.norm(u - f) / np.linalg.norm(f) <= 1e-6


def test_variance_curve_examples():
    pca = PcaModel(np.zeros(2), np.eye(2), np.array([2.0, 1.0]))
    assert variance_curve(pca).tolist() == [80.0, 100.0]
    with pytest.raises(ValueError):
        variance_curve(pca, [2])


@settings(max_examples=50, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2**32 - 1))
def test_variance_monotone_and_full(seed):
    rng = np.random.default_rng(seed)
    pca = fit_pca(rng.normal(size=(int(rng.integers(3, 9)), int(rng.integers(2, 9)))))
    v = variance_curve(pca)
    assert np.all(np.diff(v) >= 0) and v[-1] == 100.0


def test_cosine_distance_examples():
    pca = PcaModel(np.zeros(2), np.eye(2), np.array([1.0, 1.0]))
    clean = np.array([[1.0, 0.0], [1.0, 1.0]])
    adv = np.array([[0.0, 1.0], [1.0, 0.0]])
    d = cosine_distance_curve(pca, clean, adv)
    # k=0: sample 1 has a zero-norm truncation on one side -> 1; sample 2 -> 0
    assert d[0] == pytest.approx(0.5, abs=1e-15)
    assert d[1] == pytest.approx(((1 - 0) + (1 - 1 / np.sqrt(2))) / 2, abs=1e-15)
    assert cosine_distances(np.zeros((1, 2)), np.zeros((1, 2))).tolist() == [0.0]


def test_cosine_distance_identical_orthogonal_and_full():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(12, 4))
    pca = fit_pca(f)
    assert np.all(cosine_distance_curve(pca, f, f) == pytest.approx(0, abs=1e-12))
    p = project(pca, f)
    full = 1 - np.sum(p * p[::-1], axis=1) / (np.linalg.norm(p, axis=1) * np.linalg.norm(p[::-1], axis=1))
    assert cosine_distance_curve(pca, f, f[::-1])[-1] == pytest.approx(full.mean(), abs=1e-12)
    # orthogonal truncations: clean on PC0, adversarial on PC1
    pca2 = PcaModel(np.zeros(2), np.eye(2), np.array([1.0, 1.0]))
    c = np.array([[2.0, 0.0], [-1.0, 0.0]])
    a = np.array([[0.0, 1.0], [0.0, -3.0]])
    assert cosine_distance_curve(pca2, c, a, [1]).tolist() == [1.0]


# ---------------------------------------------------------------- GAAS


@pytest.mark.parametrize("k", [1, 2, 4, 8, 16, 32, 64, 128])
def test_sylvester_matches_scipy_and_is_orthogonal(k):
    h = sylvester_hadamard(k)
    assert np.array_equal(h, scipy.linalg.hadamard(k))
    assert np.array_equal(h @ h.T, k * np.eye(k))


def test_hadamard_order_validation():
    with pytest.raises(ValueError):
        sylvester_hadamard(12)
    with pytest.raises(ValueError):
        expand_rows(sylvester_hadamard(8), 4)


@pytest.mark.parametrize("k,d", [(4, 16), (8, 784), (16, 784), (4, 10), (128, 784)])
def test_expanded_directions(k, d):
    rows = expand_rows(sylvester_hadamard(k), d)
    assert rows.shape == (k, d)
    gram = rows @ rows.T
    if d % k == 0:
        assert np.array_equal(gram, (d) * np.eye(k))
    grad = np.random.default_rng(k).normal(size=d)
    r = gaas_directions(grad, k, 0.3)
    assert np.all(np.abs(r).max(axis=1) == 0.3)


def _linear_model(w_diff, bias_diff):
    d = w_diff.size
    m = build_model("custom-small-cnn", 2, (1, 1, d), conv=(), hidden=())
    m.params["fc1.w"].data = np.stack([np.zeros(d), w_diff], axis=1)
    m.params["fc1.b"].data = np.array([0.0, bias_diff])
    return m


def _oracle_success(x, y, w_diff, bias, eps, k):
    """Exhaustive evaluation against the closed-form decision rule (ties go to class 0)."""
    hits = 0
    d = w_diff.size
    h = scipy.linalg.hadamard(k)
    block = -(-d // k)
    for xi, yi in zip(x.reshape(len(x), -1), y):
        s1 = 1 / (1 + np.exp(-(xi @ w_diff + bias)))
        g = (s1 - (yi == 1)) * w_diff  # d(CE)/dx for two-class softmax
        ok = True
        for row in h:
            r = eps * np.repeat(row, block)[:d] * np.sign(g)
            z = np.clip(xi + r, 0, 1) @ w_diff + bias
            pred = 1 if z > 0 else 0
            ok &= pred != yi
        hits += ok
    return hits / len(x)


@pytest.mark.parametrize("seed", range(6))
def test_gaas_linear_oracle(seed):
    rng = np.random.default_rng(seed)
    d = 16
    w = rng.normal(size=d)
    bias = float(rng.normal() * 0.5)
    x = rng.uniform(0, 1, size=(40, 1, 1, d))
    y = rng.integers(0, 2, size=40)
    m = _linear_model(w, bias)
    orders = [2, 4, 8, 16]
    got = gaas_success(m, Dataset(x, y, 2), 0.25, orders)
    for k in orders:
        assert got[k] == _oracle_success(x, y, w, bias, 0.25, k)


def test_gaas_small_margin_succeeds_everywhere():
    d = 16
    w = np.full(d, 0.1)
    w[:2] = 10.0  # weight concentrated on the block every Sylvester row keeps positive
    x = np.full((5, 1, 1, d), 0.5)
    bias = -float(x[0].ravel() @ w) - 0.05  # every point sits just on the class-0 side
    m = _linear_model(w, bias)
    got = gaas_success(m, Dataset(x, np.zeros(5, int), 2), 0.2, [2, 4, 8])
    assert got == {2: 1.0, 4: 1.0, 8: 1.0}


def test_gaas_order_above_dimension_rejected():
    m = _linear_model(np.ones(4), 0.0)
    with pytest.raises(ValueError):
        gaas_success(m, Dataset(np.zeros((1, 1, 1, 4)), np.zeros(1, int), 2), 0.1, [8])


# ---------------------------------------------------------------- loss surface


@pytest.fixture(scope="module")
def nets():
    a = build_model("custom-small-cnn", 3, (1, 6, 6), seed=0, conv=(2,), kernel=3)
    b = build_model("custom-small-cnn", 3, (1, 6, 6), seed=1, conv=(2,), kernel=3)
    x = np.random.default_rng(0).uniform(0, 1, size=(1, 1, 6, 6))
    return a, b, x, np.array([2])


def test_grid_origin_is_clean_loss(nets):
    a, b, x, y = nets
    axis = grid_axis(0, 0.3, 4)
    grid = loss_surface_grid(a, b, x, y, axis, axis)
    assert grid.shape == (4, 4)
    assert grid[0, 0] == T.softmax_cross_entropy(a(x), y).item()


def test_grid_symmetric_when_source_is_target(nets):
    a, _, x, y = nets
    axis = grid_axis(-0.2, 0.3, 6)
    grid = loss_surface_grid(a, a, x, y, axis, axis)
    assert np.array_equal(grid, grid.T)
    # constant along e1 + e2 = const
    assert grid[1, 3] == pytest.approx(grid[2, 2], abs=1e-12)


def test_grid_with_noise_bank(nets):
    a, b, x, y = nets
    bank = init_noise((1, 6, 6), 4, 0)
    grid = loss_surface_grid(a, b, x, y, [0.0], [0.0], target_noise=bank)
    assert grid[0, 0] == T.softmax_cross_entropy(a(bank.compose_mean(x)), y).item()


def test_tap_features_shape(nets):
    a, _, x, _ = nets
    assert tap_features(a, np.repeat(x, 3, axis=0), "conv1").shape == (3, 2 * 4 * 4)
