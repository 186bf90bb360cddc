import math

import numpy as np
import pytest

from ebmkit.imageio import read_csv
from ebmkit.optimize import (
    Adam,
    AdamConfig,
    ApgdConfig,
    adam_step,
    apgd,
    conjugate_gradient,
    prox_zero,
    soft_threshold,
)


def quad(x):
    return 0.5 * float(np.vdot(x, x)), x.copy()


def lasso_problem(seed):
    r = np.random.default_rng(seed)
    A = r.standard_normal((30, 20))
    b = r.standard_normal(30)
    lam = 0.3

    def f(x):
        res = A @ x - b
        return 0.5 * float(res @ res), A.T @ res

    return A, b, lam, f


def test_apgd_quadratic_to_zero():
    x0 = np.random.default_rng(0).standard_normal((6, 6)) * 10
    res = apgd(quad, prox_zero, x0, ApgdConfig(max_iters=200, rtol=0.0))
    assert np.linalg.norm(res.x) <= 1e-8
    assert not res.backtrack_failed


@pytest.mark.parametrize("y,lam", [(3.0, 1.0), (-0.4, 1.0), (0.7, 0.2), (-2.5, 0.5)])
def test_apgd_soft_threshold_limit(y, lam):
    f = lambda x: (0.5 * float((x[0] - y) ** 2), x - y)
    res = apgd(f, lambda v, t: soft_threshold(v, lam * t), np.zeros(1), ApgdConfig(max_iters=500, rtol=0.0))
    expected = math.copysign(max(abs(y) - lam, 0.0), y)
    assert abs(res.x[0] - expected) <= 1e-8


def test_apgd_first_test_passes_above_lipschitz():
    A, b, _, f = lasso_problem(1)
    lstar = np.linalg.norm(A, 2) ** 2
    calls = []

    def counted(x):
        calls.append(1)
        return f(x)

    res = apgd(counted, prox_zero, np.zeros(20), ApgdConfig(max_iters=1, lipschitz0=1.5 * lstar))
    assert res.lipschitz == pytest.approx(0.5 * 1.5 * lstar, rel=1e-15)
    assert len(calls) == 2  # one gradient at xbar, one trial


def test_apgd_backtracking_grows_from_small_l0():
    A, b, _, f = lasso_problem(2)
    lstar = np.linalg.norm(A, 2) ** 2
    res = apgd(f, prox_zero, np.zeros(20), ApgdConfig(max_iters=1, lipschitz0=1e-3))
    assert res.iters == 1
    # accepted at L = 1e-3 * 2**j, and any L >= L* passes, so L_acc < 2 L*
    accepted = 2 * res.lipschitz
    j = math.log2(accepted / 1e-3)
    assert j == pytest.approx(round(j), abs=1e-9) and j >= 1
    assert accepted < 2 * lstar


def test_apgd_nonincrease_along_accepted_steps():
    # F(x_{k+1}) <= F(xbar_k) for every accepted step on convex problems
    for seed in range(20):
        A, b, lam, f = lasso_problem(seed)
        F = lambda x: f(x)[0] + lam * np.abs(x).sum()
        its = [np.zeros(20)]
        res = apgd(f, lambda v, t: soft_threshold(v, lam * t), its[0], ApgdConfig(max_iters=150, rtol=0.0),
                   callback=lambda k, x: its.append(x.copy()))
        assert not res.backtrack_failed
        prev = its[0]
        for k in range(1, len(its)):
            xb = its[k - 1] + (its[k - 1] - prev) / math.sqrt(2)
            assert F(its[k]) <= F(xb) + 1e-12 * max(1.0, abs(F(xb)))
            prev = its[k - 1]


def test_apgd_exhausted_backtracking_warns():
    # reported value and gradient are inconsistent, so the bound never holds
    bad = lambda x: (1.0 + float(np.sum(x**2)), -np.ones_like(x))
    with pytest.warns(RuntimeWarning):
        res = apgd(bad, prox_zero, np.zeros(3), ApgdConfig(max_iters=5, backtrack=3))
    assert res.backtrack_failed
    assert res.iters == 0
    np.testing.assert_array_equal(res.x, np.zeros(3))


def test_apgd_relative_tolerance_stops_early():
    res = apgd(quad, prox_zero, np.ones(4), ApgdConfig(max_iters=1000, rtol=1e-3))
    assert res.iters < 1000
    assert res.trace[-1][3] <= 1e-3 * max(1.0, 1.0)


def test_apgd_deterministic_and_trace_csv(tmp_path):
    A, b, lam, f = lasso_problem(3)
    cfg = ApgdConfig(max_iters=40, rtol=0.0)
    prox = lambda v, t: soft_threshold(v, lam * t)
    r1 = apgd(f, prox, np.zeros(20), cfg, trace_path=tmp_path / "t.csv", g_value=lambda x: lam * np.abs(x).sum())
    r2 = apgd(f, prox, np.zeros(20), cfg)
    assert r1.x.tobytes() == r2.x.tobytes()
    header, rows = read_csv(tmp_path / "t.csv")
    assert header == ["iter", "objective", "L", "step_norm"]
    assert rows.shape == (40, 4)
    np.testing.assert_array_equal(rows[:, 0], np.arange(1, 41))


def test_apgd_config_validation():
    for kw in ({"lipschitz0": 0.0}, {"shrink": 1.0}, {"grow": 1.0}, {"rtol": -1.0}, {"backtrack": 0}):
        with pytest.raises(ValueError):
            ApgdConfig(**kw)


def test_cg_identity_one_iteration():
    b = np.random.default_rng(0).standard_normal(7)
    res = conjugate_gradient(lambda v: v, b, 50, 1e-12)
    assert res.iters == 1
    np.testing.assert_allclose(res.x, b, rtol=1e-15)


def test_cg_diagonal():
    H = np.diag([2.0, 1.0])
    res = conjugate_gradient(lambda v: H @ v, np.array([2.0, 1.0]), 10, 1e-14)
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-12)


def test_cg_random_spd_matches_dense_solve():
    for seed in range(10):
        r = np.random.default_rng(seed)
        M = r.standard_normal((5, 5))
        H = M @ M.T + 0.5 * np.eye(5)
        b = r.standard_normal(5)
        res = conjugate_gradient(lambda v: H @ v, b, 5, 0.0)
        assert res.iters <= 5
        np.testing.assert_allclose(res.x, np.linalg.solve(H, b), atol=1e-8)


def test_cg_error_energy_norm_nonincreasing():
    r = np.random.default_rng(4)
    M = r.standard_normal((60, 60))
    H = M @ M.T / 60 + 0.1 * np.eye(60)
    b = r.standard_normal(60)
    xstar = np.linalg.solve(H, b)
    errs = []
    for k in range(1, 80):
        x = conjugate_gradient(lambda v: H @ v, b, k, 0.0).x
        e = x - xstar
        errs.append(math.sqrt(e @ H @ e))
    assert np.all(np.diff(errs) <= 1e-12 * errs[0])
    res = conjugate_gradient(lambda v: H @ v, b, 200, 1e-10)
    assert res.converged
    assert np.linalg.norm(H @ res.x - b) <= 1e-9 * np.linalg.norm(b)
    assert res.residuals[-1] <= 1e-10 * np.linalg.norm(b)


def test_cg_residual_nonincreasing_on_two_eigenvalue_system():
    # with a spectrum in two clusters the Euclidean residual decreases too
    H = np.diag(np.r_[np.full(10, 1.0), np.full(10, 3.0)])
    b = np.random.default_rng(7).standard_normal(20)
    res = conjugate_gradient(lambda v: H @ v, b, 10, 1e-14)
    assert res.iters == 2
    assert np.all(np.diff(res.residuals) <= 0)


def test_cg_errors_and_zero_rhs():
    res = conjugate_gradient(lambda v: v, np.zeros(3))
    assert res.iters == 0 and res.converged
    with pytest.raises(FloatingPointError):
        conjugate_gradient(lambda v: -v, np.ones(3))
    with pytest.raises(FloatingPointError):
        conjugate_gradient(lambda v: v * np.nan, np.ones(3))


def test_cg_deterministic():
    r = np.random.default_rng(5)
    M = r.standard_normal((20, 20))
    H = M @ M.T + np.eye(20)
    b = r.standard_normal(20)
    a = conjugate_gradient(lambda v: H @ v, b, 30, 1e-12)
    c = conjugate_gradient(lambda v: H @ v, b, 30, 1e-12)
    assert a.x.tobytes() == c.x.tobytes()


def test_adam_zero_gradient_fixed_point():
    p = np.array([1.0, -2.0])
    state = {}
    np.testing.assert_array_equal(adam_step(AdamConfig(0.1), state, p, np.zeros(2)), p)


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-3])
def test_adam_first_step_sign(g):
    lr = 0.01
    new = adam_step(AdamConfig(lr), {}, np.zeros(1), np.array([g]))
    # bias correction makes the first step lr * g / (|g| + eps)
    assert new[0] == pytest.approx(-lr * g / (abs(g) + 1e-8), rel=1e-12)
    assert abs(new[0] + lr * math.copysign(1.0, g)) <= lr * 1e-8 / abs(g) * 1.01


def test_adam_groups_and_matches_reference():
    lrs = {"weights": 1e-5, "betas": 2e-4}
    opt = Adam(lrs)
    r = np.random.default_rng(6)
    params = {"weights": r.random((2, 3)), "betas": r.standard_normal((2, 25))}
    ref = {k: v.copy() for k, v in params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    for t in range(1, 6):
        grads = {k: r.standard_normal(v.shape) for k, v in params.items()}
        params = opt.step(params, grads)
        for k in ref:
            m[k] = 0.9 * m[k] + 0.1 * grads[k]
            v2[k] = 0.999 * v2[k] + 0.001 * grads[k] ** 2
            ref[k] = ref[k] - lrs[k] * (m[k] / (1 - 0.9**t)) / (np.sqrt(v2[k] / (1 - 0.999**t)) + 1e-8)
    for k in ref:
        np.testing.assert_allclose(params[k], ref[k], rtol=1e-14, atol=1e-16)
    # first step moves each group by its own learning rate
    opt = Adam(lrs)
    out = opt.step({"weights": np.zeros(1), "betas": np.zeros(1)}, {"weights": np.ones(1), "betas": np.ones(1)})
    assert out["weights"][0] == pytest.approx(-1e-5, rel=1e-7)
    assert out["betas"][0] == pytest.approx(-2e-4, rel=1e-7)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamConfig(), {}, np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        AdamConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        AdamConfig(beta1=1.0)
