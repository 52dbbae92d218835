import io
from dataclasses import replace

import numpy as np
import pytest

from nnchange.errors import InvalidFamily
from nnchange.fitting import FitConfig
from nnchange.nn_model import NetworkParams, NetworkShape, eval_network
from nnchange.simulation import (
    FAMILIES,
    GAR_PRE_THETA,
    PowerRow,
    ScenarioSpec,
    estimate_theta_representative,
    generate,
    get_family,
    power_study,
    replicate_seeds,
    run_replications,
    simulate_regime,
    v_hat_statistic,
    write_power_csv,
)
from oracles import tar1_post, tar1_pre, tar2_post


def test_families_registered():
    assert set(FAMILIES) == {"GAR1", "GAR2", "GAR3", "GAR4", "AR1", "AR2", "TAR1", "TAR2", "NULL"}
    assert get_family("gar2").name == "GAR2"
    with pytest.raises(InvalidFamily):
        get_family("GAR9")
    with pytest.raises(InvalidFamily):
        ScenarioSpec("nope", 100)


def test_gar_functions():
    x = np.linspace(-3, 3, 13)
    pre = 0.5 + 1 / (1 + np.exp(0.5 * (1 + 0.7 * x)))
    np.testing.assert_allclose(FAMILIES["NULL"].pre(x), pre, rtol=1e-15)
    np.testing.assert_allclose(eval_network(GAR_PRE_THETA, x[:, None]), pre, atol=1e-14)
    params = {"GAR1": (0.1, 1, 0.7), "GAR2": (0.5, -1, 0.7), "GAR3": (0.5, 1, -0.7), "GAR4": (0.5, -1, -0.7)}
    for name, (mu, alpha, beta) in params.items():
        want = mu + alpha / (1 + np.exp(0.5 * (1 + beta * x)))
        np.testing.assert_allclose(FAMILIES[name].post(x), want, rtol=1e-15)


def test_ar_and_tar_branches(rng):
    x = rng.uniform(-4, 4, 200)
    np.testing.assert_allclose(FAMILIES["AR1"].pre(x), 0.3 * x)
    np.testing.assert_allclose(FAMILIES["AR1"].post(x), 0.5 + 0.1 * x)
    np.testing.assert_allclose(FAMILIES["AR2"].post(x), 1 - 0.1 * x)
    np.testing.assert_allclose(FAMILIES["TAR1"].pre(x), [tar1_pre(v) for v in x])
    np.testing.assert_allclose(FAMILIES["TAR1"].post(x), [tar1_post(v) for v in x])
    np.testing.assert_allclose(FAMILIES["TAR2"].post(x), [tar2_post(v) for v in x])


def test_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec("GAR2", 100, tau=0.0)
    with pytest.raises(ValueError):
        ScenarioSpec("GAR2", 100, burn_in=50)
    with pytest.raises(ValueError):
        ScenarioSpec("GAR2", 100, coupling="glued")
    s = ScenarioSpec("GAR2", 250, tau=0.5)
    assert s.m == 125 and s.has_change
    assert ScenarioSpec("GAR2", 101, tau=0.25).m == 25
    assert not ScenarioSpec("NULL", 100).has_change
    assert not ScenarioSpec("GAR2", 100, tau=1.0).has_change


@pytest.mark.parametrize("coupling", ["independent_segments", "continuous_path"])
def test_generate_length_and_determinism(coupling):
    spec = ScenarioSpec("AR1", 300, coupling=coupling, seed=5)
    a, b = generate(spec), generate(spec)
    assert a.shape == (301,)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, generate(replace(spec, seed=6)))


def test_no_change_never_uses_post_regime(monkeypatch):
    calls = []
    fam = FAMILIES["AR1"]

    def spy(x):
        calls.append(1)
        return fam.post(x)

    monkeypatch.setitem(FAMILIES, "AR1", replace(fam, post=spy))
    generate(ScenarioSpec("AR1", 200, tau=1.0))
    generate(ScenarioSpec("AR1", 200, tau=1.0, coupling="continuous_path"))
    assert not calls


def test_continuous_path_switches_at_m():
    spec = ScenarioSpec("AR1", 10, tau=0.5, coupling="continuous_path", burn_in=100, noise_sd=0.0)
    raw = generate(spec)
    # noiseless: the pre regime stays at 0, after m the post regime drives it to 0.5 + 0.1 x
    np.testing.assert_array_equal(raw[: spec.m + 1], 0.0)
    assert raw[spec.m + 1] == pytest.approx(0.5)
    assert raw[spec.m + 2] == pytest.approx(0.55)


def test_ar1_post_segment_mean():
    spec = ScenarioSpec("AR1", 40000, tau=0.5, seed=3)
    post = generate(spec)[spec.m + 1 :]
    se = np.sqrt(1 / (1 - 0.01)) * np.sqrt((1 + 0.1) / (1 - 0.1)) / np.sqrt(post.size)
    assert abs(post.mean() - 0.5 / 0.9) < 3 * se


def test_ar1_pre_change_autocorrelation():
    raw = generate(ScenarioSpec("AR1", 40000, tau=1.0, seed=4))
    r1 = np.corrcoef(raw[:-1], raw[1:])[0, 1]
    assert r1 == pytest.approx(0.3, abs=0.02)


def test_burn_in_moments_stable():
    g = FAMILIES["GAR2"].pre
    moments = []
    for burn in (500, 1500):
        paths = simulate_regime(g, 5000, np.random.default_rng(burn), size=20, burn_in=burn)
        assert paths.shape == (20, 5001)
        moments.append((paths.mean(), paths.var()))
    (m1, v1), (m2, v2) = moments
    assert abs(m1 - m2) < 0.03 and abs(v1 - v2) < 0.05


def test_replicate_seeds_distinct_and_reproducible():
    a = replicate_seeds(1, 50)
    assert a == replicate_seeds(1, 50)
    assert len(set(a)) == 50
    assert a != replicate_seeds(2, 50)


def test_run_replications_thread_independent():
    spec = ScenarioSpec("GAR2", 120, seed=8)
    cfg = FitConfig(restarts=4)
    one = run_replications(spec, 4, ("residual", "a"), fit_cfg=cfg, threads=1)
    two = run_replications(spec, 4, ("residual", "a"), fit_cfg=cfg, threads=2)
    assert [r.stats for r in one] == [r.stats for r in two]
    assert all(r.ok for r in one)
    assert all(r.stats["residual"][2] == 1 for r in one)


def test_power_study_rows_and_csv(cv_cache_dir):
    spec = ScenarioSpec("GAR2", 150, seed=9)
    rows = power_study(spec, M=100, rules=("residual",), fit_cfg=FitConfig(restarts=4), cache_dir=cv_cache_dir)
    (row,) = rows
    assert row.test_kind == "T_residual" and row.reps + row.failures == 100
    assert 0 <= row.rate <= 1 and row.rate == row.rejections / row.reps
    assert row.rate > 0.8
    buf = io.StringIO()
    write_power_csv(rows, buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0].split(",") == list(PowerRow.__dataclass_fields__)
    assert len(lines) == 2
    with pytest.raises(ValueError):
        power_study(spec, M=99)


def test_v_hat_statistic_hand():
    shape = NetworkShape(1, 0, 0)
    thetas = [NetworkParams(shape, [c]) for c in (0.0, 1.0, 2.0)]
    ys = [np.zeros((5, 1))] * 3
    # held-out path i leaves two fits whose constant difference is 1, 2 or 1
    assert v_hat_statistic(thetas, ys) == pytest.approx((4 + 1 + 1) / 3)
    with pytest.raises(ValueError):
        v_hat_statistic(thetas[:2], ys[:2])


def test_representative_fits():
    spec = ScenarioSpec("GAR2", 100, tau=0.25, seed=2)
    res = estimate_theta_representative(spec, 300, M=10, fit_cfg=FitConfig(restarts=4))
    assert res.n_used == 300 and res.v_hat >= 0
    assert res.sse.size == 10 - res.failures
    assert np.sum(res.sse < res.sse[np.argsort(res.sse)[4]]) == 4
    with pytest.raises(ValueError):
        estimate_theta_representative(spec, 300, M=9)


def test_v_hat_near_zero_without_noise():
    spec = ScenarioSpec("NULL", 100, noise_sd=1e-3, seed=1)
    res = estimate_theta_representative(spec, 500, M=10, fit_cfg=FitConfig(restarts=4))
    assert res.v_hat < 1e-4
