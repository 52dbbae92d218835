import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nnchange.errors import AllWeightsZero, DimensionMismatch, NotPSD, TooShort
from nnchange.fitting import RegressionDataset, embed_series, fit_network, residuals
from nnchange.nn_model import NetworkParams, NetworkShape, eval_network, grad_network
from nnchange.score_stats import (
    WeightConfig,
    WeightMatrix,
    a_norm,
    argmax_statistic,
    observation_scores,
    residual_matrix_A,
    score_partial_sums,
    selection_matrix_A,
    test_statistic as statistic,
    weight,
)
from oracles import residual_cusum


def _data(rng, n=60, p=1, h=1):
    return embed_series(rng.standard_normal(n + p), None, NetworkShape(p, 0, h))


def test_path_row_zero_and_increments(rng):
    data = _data(rng)
    theta = NetworkParams(data.shape, rng.standard_normal(data.shape.q))
    path = score_partial_sums(data, theta)
    assert path.sums.shape == (data.n + 1, theta.q)
    np.testing.assert_array_equal(path.sums[0], 0.0)
    np.testing.assert_allclose(np.diff(path.sums, axis=0), observation_scores(data, theta), rtol=1e-12, atol=1e-14)


def test_path_h0_mean_closes_at_zero(rng):
    data = _data(rng, h=0)
    theta = NetworkParams.from_parts(np.mean(data.x), p=1)
    assert abs(score_partial_sums(data, theta).sums[-1, 0]) < 1e-12


def test_path_five_point_hand():
    theta = NetworkParams.from_parts(0.1, [0.5], [[2.0]], [-1.0])
    y = np.array([[0.0], [0.5], [1.0], [-1.0], [2.0]])
    x = np.array([0.3, 0.2, 1.0, -0.4, 0.9])
    data = RegressionDataset(x, y, theta.shape)
    acc = np.zeros(4)
    rows = [acc.copy()]
    for t in range(5):
        f = 0.1 + 0.5 / (1 + np.exp(-(2.0 * y[t, 0] - 1.0)))
        acc = acc + grad_network(theta, y[t]) * (x[t] - f)
        rows.append(acc.copy())
    np.testing.assert_allclose(score_partial_sums(data, theta).sums, np.array(rows), rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize(
    "eta,gamma,s,expected",
    [(0.0, 0.0, 0.3, 1.0), (0.1, 0.0, 0.05, 0.0), (0.0, 0.5, 0.5, 2.0), (0.1, 0.25, 0.9, 0.0), (0.0, 0.25, 0.2, 0.16**-0.25)],
)
def test_weight_examples(eta, gamma, s, expected):
    assert weight(s, WeightConfig(eta, gamma)) == pytest.approx(expected)


@given(st.floats(0.0, 0.5), st.floats(0.0, 0.5), st.floats(0.001, 0.999))
def test_weight_symmetry(eta, gamma, s):
    cfg = WeightConfig(eta, gamma)
    assert weight(s, cfg) == pytest.approx(weight(1 - s, cfg), rel=1e-9)


def test_weight_config_range():
    with pytest.raises(ValueError):
        WeightConfig(eta=0.6)
    with pytest.raises(ValueError):
        WeightConfig(gamma=-0.1)
    assert WeightConfig(0.0, 0.5).is_darling_erdos_corner


def test_a_norm_examples():
    q = 4
    assert a_norm([3, 4, 0, 0], WeightMatrix.identity(q)) == pytest.approx(5.0)
    assert a_norm([1, 2, 3, 4], WeightMatrix(np.zeros((q, q)))) == 0.0
    A = np.zeros((q, q))
    A[0, 0] = 4
    assert a_norm([1, 5, 0, 0], WeightMatrix(A)) == pytest.approx(2.0)


def test_weight_matrix_psd_checks():
    with pytest.raises(NotPSD):
        WeightMatrix(np.diag([1.0, -0.5]))
    tiny = WeightMatrix(np.diag([1.0, -1e-13]))
    assert np.linalg.eigvalsh(tiny.a).min() >= 0
    assert tiny.rank == 1
    with pytest.raises(NotPSD):
        WeightMatrix(np.array([[2.0, 1.0], [0.0, 2.0]]))
    nearly = WeightMatrix(np.array([[2.0, 1.0], [1.0 + 1e-14, 2.0]]))
    np.testing.assert_array_equal(nearly.a, nearly.a.T)
    with pytest.raises(DimensionMismatch):
        a_norm([1.0, 2.0, 3.0], WeightMatrix.identity(2))


def test_residual_matrix():
    np.testing.assert_array_equal(residual_matrix_A(1).a, [[1.0]])
    A = residual_matrix_A(4)
    assert A.rank == 1 and A.a[0, 0] == 1 and A.a.sum() == 1
    sel = selection_matrix_A(4, [2])
    assert sel.a[2, 2] == 1 and sel.rank == 1


def test_residual_norm_is_residual_sum(rng):
    data = _data(rng)
    theta = NetworkParams(data.shape, rng.standard_normal(data.shape.q))
    path = score_partial_sums(data, theta)
    r = residuals(theta, data)
    for k in (1, 10, 37):
        assert a_norm(path.sums[k], residual_matrix_A(theta.q)) == pytest.approx(abs(r[:k].sum()), rel=1e-12)


def test_statistic_equals_residual_cusum(rng):
    for trial in range(20):
        data = _data(rng, n=50 + trial, h=2)
        theta = NetworkParams(data.shape, rng.standard_normal(data.shape.q))
        cfg = WeightConfig(eta=0.05 * (trial % 3), gamma=0.1 * (trial % 4))
        value, k = statistic(data, theta, residual_matrix_A(theta.q), cfg)
        ref_value, ref_k = residual_cusum(residuals(theta, data), cfg.eta, cfg.gamma)
        assert value == pytest.approx(ref_value, rel=1e-12, abs=1e-12)
        assert k == ref_k


def test_statistic_scale_is_bridge_like():
    rng = np.random.default_rng(0)
    vals = []
    for _ in range(200):
        x = rng.standard_normal(400)
        data = RegressionDataset(x, np.zeros((400, 1)), NetworkShape(1, 0, 0))
        theta = NetworkParams.from_parts(x.mean(), p=1)
        vals.append(statistic(data, theta, WeightMatrix.identity(1), WeightConfig())[0])
    # the Kolmogorov median is about 0.83; a missing n^{-1/2} would give about 17
    assert 0.6 < np.median(vals) < 1.1


def test_statistic_locates_large_mean_shift():
    rng = np.random.default_rng(1)
    n = 400
    x = rng.standard_normal(n)
    x[n // 2 :] += 3.0
    data = RegressionDataset(x, np.zeros((n, 1)), NetworkShape(1, 0, 0))
    theta = fit_network(data).theta_hat
    _, k = statistic(data, theta, WeightMatrix.identity(1), WeightConfig())
    assert abs(k - n // 2) <= 0.05 * n


def test_scaling_A(rng):
    data = _data(rng, h=2)
    theta = NetworkParams(data.shape, rng.standard_normal(data.shape.q))
    A = WeightMatrix.identity(theta.q)
    v1, k1 = statistic(data, theta, A, WeightConfig(gamma=0.2))
    v2, k2 = statistic(data, theta, A.scaled(9.0), WeightConfig(gamma=0.2))
    assert v2 == pytest.approx(3 * v1, rel=1e-12)
    assert k1 == k2
    assert v1 >= 0


def test_ties_go_to_smallest_k():
    # residuals +1, -1, +1, -1 give |S(k)| = 1, 0, 1, 0, ...
    x = np.array([1.0, -1.0] * 5)
    data = RegressionDataset(x, np.zeros((10, 1)), NetworkShape(1, 0, 0))
    theta = NetworkParams.from_parts(0.0, p=1)
    _, k = statistic(data, theta, WeightMatrix.identity(1), WeightConfig())
    assert k == 1


def test_all_weights_zero_and_too_short():
    # n = 5 and eta = 0.45: every s = k/5 falls outside [0.45, 0.55]
    x = np.arange(5.0)
    data = RegressionDataset(x, np.zeros((5, 1)), NetworkShape(1, 0, 0))
    theta = NetworkParams.from_parts(2.0, p=1)
    with pytest.raises(AllWeightsZero):
        statistic(data, theta, WeightMatrix.identity(1), WeightConfig(eta=0.45))
    short = RegressionDataset(x[:2], np.zeros((2, 1)), NetworkShape(1, 0, 0))
    with pytest.raises(TooShort):
        statistic(short, theta, WeightMatrix.identity(1), WeightConfig())


def test_gamma_only_changes_weights(rng):
    data = _data(rng, n=80)
    theta = NetworkParams(data.shape, rng.standard_normal(data.shape.q))
    path = score_partial_sums(data, theta)
    A = WeightMatrix.identity(theta.q)
    norms = np.sqrt(np.einsum("ki,ij,kj->k", path.sums[1:-1], A.a, path.sums[1:-1])) / np.sqrt(data.n)
    s = np.arange(1, data.n) / data.n
    for gamma in (0.0, 0.3):
        v, _ = argmax_statistic(path, A, WeightConfig(gamma=gamma))
        assert v == pytest.approx(np.max(norms * (s * (1 - s)) ** -gamma), rel=1e-12)
