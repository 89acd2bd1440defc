import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matdeform import kernels
from matdeform.registration import (
    GmmConfig,
    RegistrationError,
    e_step,
    eval_gmm_density,
    gaussian_kernel,
    init_sigma2,
    m_step_solve_V,
    objective,
    point_set_diameter,
    register,
    update_sigma2,
)
from tests import oracles


def instance(rng, m, N, D, scale=1.0):
    y = rng.normal(size=(m, D))
    X = rng.normal(size=(N, D))
    V = rng.normal(scale=0.1 * scale, size=(m, D))
    wt = rng.uniform(0.3, 3.0, m)
    return X, y, V, wt / wt.mean()


# --- kernel / init ---------------------------------------------------------


def test_kernel_examples():
    G = gaussian_kernel([[0.0, 0.0], [3.0, 4.0]], 5.0)
    np.testing.assert_allclose(np.diag(G), 1.0)
    assert G[0, 1] == pytest.approx(math.exp(-0.5), rel=1e-15)
    big = gaussian_kernel(np.random.default_rng(0).normal(size=(5, 3)), 1e6)
    np.testing.assert_allclose(big, 1.0, atol=1e-10)
    with pytest.raises(ValueError):
        gaussian_kernel([[0.0]], 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.sampled_from([2, 3]), st.floats(0.1, 10.0), st.integers(0, 10_000))
def test_kernel_symmetric_psd(m, D, beta, seed):
    y = np.random.default_rng(seed).uniform(-5, 5, size=(m, D))
    G = gaussian_kernel(y, beta)
    np.testing.assert_array_equal(G, G.T)
    assert np.all((G >= 0) & (G <= 1))  # far pairs underflow to 0
    assert np.linalg.eigvalsh(G).min() > -1e-10


def test_init_sigma2_examples():
    assert init_sigma2([[0.0]], [[1.0]]) == 1.0
    assert init_sigma2([[0.0], [2.0]], [[0.0], [2.0]]) == 2.0
    assert init_sigma2([[3.0, 1.0]], [[3.0, 1.0]]) == 0.0


def test_init_sigma2_matches_double_loop():
    rng = np.random.default_rng(1)
    for _ in range(10):
        X, y, _, _ = instance(rng, 7, 9, 3)
        assert init_sigma2(X, y) == pytest.approx(oracles.init_sigma2(X.tolist(), y.tolist()), rel=1e-12)


# --- E-step ----------------------------------------------------------------


def test_estep_single_centroid():
    P, Pt = e_step([[1.0, 2.0]], [[0.0, 0.0]], np.zeros((1, 2)), np.eye(1), 1.0, np.ones(1), 0.0)
    assert P[0, 0] == 1.0


def test_estep_symmetric_pair():
    y = np.array([[-1.0, 0.0], [1.0, 0.0]])
    P, _ = e_step([[0.0, 0.0]], y, np.zeros_like(y), np.eye(2), 1.0, np.ones(2), 0.0)
    np.testing.assert_allclose(P[:, 0], [0.5, 0.5])


def test_estep_weighted_example():
    y = np.zeros((2, 2))
    wt = np.array([1.5, 0.5])
    P, Pt = e_step([[1.0, 0.0]], y, np.zeros_like(y), np.eye(2), 1.0, wt, 0.0)
    expect = math.exp(-1 / 3) / (math.exp(-1 / 3) + math.exp(-1))
    assert P[0, 0] == pytest.approx(expect, rel=1e-14)
    assert expect == pytest.approx(0.6608, abs=5e-5)
    np.testing.assert_allclose(Pt, P / wt[:, None])


@pytest.mark.parametrize("D", [2, 3])
@pytest.mark.parametrize("w", [0.0, 0.2])
def test_estep_matches_loop_oracle(D, w):
    rng = np.random.default_rng(10 + D)
    for _ in range(5):
        X, y, V, wt = instance(rng, 6, 8, D)
        G = gaussian_kernel(y, 1.3)
        P, _ = e_step(X, y, V, G, 0.7, wt, w)
        T = oracles.transform(y.tolist(), G.tolist(), V.tolist())
        ref = np.array(oracles.responsibilities(X.tolist(), T, 0.7, w, wt.tolist()))
        np.testing.assert_allclose(P, ref, rtol=1e-12, atol=1e-300)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 15), st.integers(1, 15), st.sampled_from([2, 3]), st.floats(0.0, 0.9), st.floats(1e-3, 10.0), st.integers(0, 99999))
def test_responsibility_columns_sum_with_outlier_mass(m, N, D, w, sigma2, seed):
    X, y, V, wt = instance(np.random.default_rng(seed), m, N, D)
    P, _ = e_step(X, y, V, gaussian_kernel(y, 1.0), sigma2, wt, w)
    assert np.all((P >= 0) & (P <= 1))
    col = P.sum(axis=0)
    if w == 0:
        np.testing.assert_allclose(col, 1.0, rtol=1e-12)
    else:
        assert np.all(col <= 1 + 1e-12)


def test_estep_stable_at_tiny_sigma2():
    X, y, V, wt = instance(np.random.default_rng(3), 5, 6, 3)
    P, _ = e_step(X, y, V, np.eye(5), 1e-8, wt, 0.1)
    assert np.all(np.isfinite(P))


def test_estep_rejects_nonpositive_sigma2():
    with pytest.raises(ValueError):
        e_step([[0.0, 0.0]], [[0.0, 0.0]], np.zeros((1, 2)), np.eye(1), 0.0, np.ones(1), 0.0)


# --- M-step ----------------------------------------------------------------


def test_mstep_hand_solve():
    V = m_step_solve_V(np.array([[1.0]]), np.array([[1.0]]), [[2.0]], [[0.0]], 1.0, 1.0)
    assert V[0, 0] == pytest.approx(1.0, rel=1e-15)


def test_mstep_ridge_limit():
    rng = np.random.default_rng(4)
    X, y, _, _ = instance(rng, 6, 8, 3)
    Pt = rng.uniform(size=(6, 8))
    V = m_step_solve_V(Pt, gaussian_kernel(y, 1.0), X, y, 1.0, 1e12)
    assert np.abs(V).max() < 1e-9


def test_mstep_residual_and_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        X, y, _, wt = instance(rng, 8, 10, 3)
        G = gaussian_kernel(y, 1.5)
        P = rng.uniform(size=(8, 10))
        Pt = P / wt[:, None]
        V = m_step_solve_V(Pt, G, X, y, 0.4, 2.0)
        row = Pt.sum(axis=1)
        A = row[:, None] * G + 0.8 * np.eye(8)
        rhs = Pt @ X - row[:, None] * y
        assert np.linalg.norm(A @ V - rhs) <= 1e-10 * np.linalg.norm(rhs)
        ref = np.array(oracles.m_step(P.tolist(), G.tolist(), X.tolist(), y.tolist(), 0.4, 2.0, wt.tolist()))
        np.testing.assert_allclose(V, ref, rtol=1e-9, atol=1e-12)


def test_mstep_singular_reports_condition():
    y = np.zeros((2, 1))
    with pytest.raises(RegistrationError, match="condition"):
        m_step_solve_V(np.full((2, 1), np.nan), np.ones((2, 2)), [[1.0]], y, 1.0, 1.0)


# --- sigma2 ----------------------------------------------------------------


def test_sigma2_examples():
    assert update_sigma2(np.array([[1.0]]), [[1.0, 2.0]], [[1.0, 2.0]], sigma2_floor=1e-9) == 1e-9
    assert update_sigma2(np.array([[1.0]]), [[0.0, 0.0]], [[0.3, 0.0]]) == pytest.approx(0.09 / 2)


def test_sigma2_brute_force():
    rng = np.random.default_rng(6)
    for _ in range(10):
        X, T, _, wt = instance(rng, 7, 9, 3)
        P = rng.uniform(size=(7, 9))
        Pt = P / wt[:, None]
        got = update_sigma2(Pt, X, T)
        ref = oracles.sigma2_update(P.tolist(), X.tolist(), T.tolist(), float(Pt.sum()), wt.tolist())
        assert got == pytest.approx(ref, rel=1e-11)
        got = update_sigma2(Pt, X, T, Np=float(P.sum()))
        assert got == pytest.approx(oracles.sigma2_update(P.tolist(), X.tolist(), T.tolist(), float(P.sum()), wt.tolist()), rel=1e-11)


def test_sigma2_zero_mass():
    with pytest.raises(RegistrationError):
        update_sigma2(np.zeros((2, 3)), np.zeros((3, 2)), np.zeros((2, 2)))


# --- objective / density ---------------------------------------------------


def test_objective_single_pair():
    val = objective([[0.0, 0.0]], [[0.0, 0.0]], np.zeros((1, 2)), np.eye(1), 0.5, np.ones(1), 0.0, 2.0)
    assert val == pytest.approx(-math.log((2 * math.pi * 0.5) ** -1), rel=1e-14)


@pytest.mark.parametrize("w", [0.0, 0.3])
def test_objective_matches_density_sum(w):
    rng = np.random.default_rng(7)
    for D in (2, 3):
        X, y, V, wt = instance(rng, 6, 7, D)
        G = gaussian_kernel(y, 1.1)
        got = objective(X, y, V, G, 0.9, wt, w, 2.0)
        ref = oracles.neg_log_likelihood(X.tolist(), y.tolist(), V.tolist(), G.tolist(), 0.9, w, 2.0, wt.tolist())
        assert got == pytest.approx(ref, rel=1e-12)


def test_density_examples():
    assert eval_gmm_density([[0.0, 0.0]], None, 1.0, 0.0, [[0.0, 0.0]])[0] == pytest.approx(1 / (2 * math.pi))
    q = np.random.default_rng(8).normal(size=(20, 2))
    # mixture linearity: a duplicated centroid doubles its share
    c, d = [[0.1, 0.2]], [[1.0, 1.0]]
    dup = eval_gmm_density(c + c + d, None, 0.3, 0.0, q)
    mix = (2 * eval_gmm_density(c, None, 0.3, 0.0, q) + eval_gmm_density(d, None, 0.3, 0.0, q)) / 3
    np.testing.assert_allclose(dup, mix, rtol=1e-13)


@pytest.mark.parametrize("D", [2, 3])
def test_density_integrates_to_one(D):
    rng = np.random.default_rng(9)
    y = rng.uniform(-1, 1, size=(5, D))
    wt = rng.uniform(0.5, 1.5, 5)
    wt /= wt.mean()
    n = 90 if D == 2 else 40
    t = np.linspace(-6, 6, n)
    grid = np.stack(np.meshgrid(*[t] * D), -1).reshape(-1, D)
    dens = eval_gmm_density(y, wt, 0.4, 0.0, grid)
    assert dens.sum() * (t[1] - t[0]) ** D == pytest.approx(1.0, abs=2e-3)


# --- backends --------------------------------------------------------------


@pytest.mark.parametrize("name", ["gaussian_kernel", "estep", "mixture_density"])
def test_backends_agree(name):
    if "cython" not in kernels.BACKENDS:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(11)
    X, T = rng.normal(size=(40, 3)), rng.normal(size=(30, 3))
    lc, iv = rng.normal(size=30), rng.uniform(0.2, 2.0, 30)
    args = {
        "gaussian_kernel": (T, 1.2),
        "estep": (X, T, lc, iv, math.log(0.3)),
        "mixture_density": (X, T, lc, iv),
    }[name]
    a = getattr(kernels.BACKENDS["python"], name)(*args)
    b = getattr(kernels.BACKENDS["cython"], name)(*args)
    for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-300)


def test_estep_without_outlier_term_both_backends():
    rng = np.random.default_rng(12)
    X, T = rng.normal(size=(10, 2)), rng.normal(size=(8, 2))
    for mod in kernels.BACKENDS.values():
        P, _ = mod.estep(X, T, np.zeros(8), np.full(8, 0.5), -math.inf)
        np.testing.assert_allclose(P.sum(axis=0), 1.0)


# --- driver ----------------------------------------------------------------


def test_config_validation():
    for bad in [dict(w=1.0), dict(beta=0), dict(lam=-1), dict(tol=0), dict(max_iters=0), dict(sigma2_floor=0.0), dict(weight_mode="x")]:
        with pytest.raises(ValueError):
            GmmConfig(**bad)


def test_area_mode_requires_weights():
    with pytest.raises(ValueError):
        register(np.zeros((3, 2)), np.ones((3, 2)), None, GmmConfig(weight_mode="area"))


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        register(np.zeros((3, 2)), np.ones((3, 3)), config=GmmConfig(weight_mode="equal"))


def test_self_registration():
    rng = np.random.default_rng(13)
    X = rng.uniform(0, 1, size=(40, 2))
    res = register(X, X, config=GmmConfig(weight_mode="equal"))
    assert res.converged
    assert np.abs(res.displacements).max() <= 1e-3 * point_set_diameter(X)


def test_translation_recovery():
    rng = np.random.default_rng(14)
    X = rng.uniform(0, 1, size=(50, 3))
    c = np.array([0.05, -0.03, 0.02])
    res = register(X, X + c, config=GmmConfig(weight_mode="equal"))
    assert np.abs(res.displacements + c).max() <= 1e-3 * np.linalg.norm(c)


def test_area_mode_with_unit_weights_reduces_to_equal():
    rng = np.random.default_rng(15)
    X, y = rng.uniform(size=(30, 2)), rng.uniform(size=(25, 2))
    a = register(X, y, np.ones(25), GmmConfig(w=0.1, weight_mode="area", max_iters=30))
    b = register(X, y, None, GmmConfig(w=0.1, weight_mode="equal", max_iters=30))
    np.testing.assert_allclose(a.V, b.V, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(a.objective_trace, b.objective_trace, rtol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3]), st.floats(-50, 50))
def test_translation_equivariance(seed, D, shift):
    rng = np.random.default_rng(seed)
    X, y = rng.uniform(size=(15, D)), rng.uniform(size=(12, D))
    wt = rng.uniform(0.5, 2.0, 12)
    cfg = GmmConfig(w=0.1, max_iters=20)
    a = register(X, y, wt, cfg)
    b = register(X + shift, y + shift, wt, cfg)
    assert np.abs(a.V - b.V).max() <= 1e-10 * max(1.0, np.abs(a.V).max()) * max(1.0, abs(shift))


def test_sigma2_floor_and_finiteness():
    rng = np.random.default_rng(16)
    X = rng.uniform(size=(20, 2))
    floor = 1e-3
    seen = []
    res = register(X, X + 0.01, config=GmmConfig(weight_mode="equal", sigma2_floor=floor), callback=lambda s: seen.append(s))
    assert min(res.sigma2_trace) >= floor
    assert all(np.all(np.isfinite(s.T)) and np.isfinite(s.objective) for s in seen)
    assert [s.iter for s in seen] == list(range(1, res.iterations + 1))


def test_callback_state_invariants():
    rng = np.random.default_rng(17)
    X, y = rng.uniform(size=(20, 2)), rng.uniform(size=(18, 2))
    wt = rng.uniform(0.5, 2, 18)

    def check(s):
        np.testing.assert_array_equal(s.G, s.G.T)
        np.testing.assert_allclose(s.T, y + s.G @ s.V, rtol=0, atol=0)

    register(X, y, wt, GmmConfig(w=0.1, max_iters=10), callback=check)


def test_baseline_iteration_matches_cpd_oracle():
    rng = np.random.default_rng(18)
    X, y, _, _ = instance(rng, 10, 12, 2)
    res = register(X, y, config=GmmConfig(w=0.2, beta=1.5, lam=2.0, weight_mode="equal", max_iters=1, tol=1e-300))
    G = oracles.kernel(y.tolist(), 1.5)
    s2 = oracles.init_sigma2(X.tolist(), y.tolist())
    V0 = [[0.0, 0.0] for _ in range(10)]
    _, V, s2n = oracles.cpd_iteration(X.tolist(), y.tolist(), V0, G, s2, 0.2, 2.0)
    np.testing.assert_allclose(res.V, V, rtol=1e-10, atol=1e-13)
    assert res.sigma2 == pytest.approx(s2n, rel=1e-10)


def test_write_trace(tmp_path):
    res = register(np.eye(3), np.eye(3) + 0.01, config=GmmConfig(weight_mode="equal", max_iters=5))
    p = tmp_path / "t.csv"
    res.write_trace(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "iter,sigma2,objective"
    assert len(lines) == len(res.objective_trace) + 1
