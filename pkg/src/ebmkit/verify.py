"""Finite-grid oracles for the Bayesian side of the library.

Everything here works with explicit probability vectors on small grids, so
posteriors, distances and Markov kernels are exact up to rounding.  The
functions double as a self-check suite (:func:`run_suite`) driven by the
``verify`` command.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.sparse.csgraph import connected_components

from .imageio import write_csv

__all__ = [
    "DiscreteDist",
    "grid_posterior",
    "hellinger",
    "tv",
    "check_tv_hellinger",
    "mh_kernel_matrix",
    "gibbs_kernel_matrix",
    "GibbsReport",
    "posterior_stability_curve",
    "gaussian_grid_family",
    "ula_bias_table",
    "SUITE_CASES",
    "run_suite",
]


@dataclass
class DiscreteDist:
    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.support.shape != self.probs.shape or self.probs.ndim != 1:
            raise ValueError("support and probs must be vectors of equal length")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1) > 1e-12:
            raise ValueError("probs must be non-negative and sum to 1")

    def mean(self) -> float:
        return float(self.probs @ self.support)

    def var(self) -> float:
        m = self.mean()
        return float(self.probs @ (self.support - m) ** 2)


def _normalize(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return w / w.sum()


def grid_posterior(prior: DiscreteDist, likelihood: Callable, y: float):
    """Bayes' rule on a grid.

    ``likelihood(y, x)`` is evaluated on the whole support at once.

    Returns:
        ``(posterior, evidence)`` with ``evidence = sum_x L(y|x) prior(x)``.

    Raises:
        ValueError: when the evidence is zero.
    """
    lik = np.asarray(likelihood(y, prior.support), dtype=np.float64)
    joint = lik * prior.probs
    evidence = float(joint.sum())
    if not evidence > 0:
        raise ValueError(f"zero evidence at y = {y}")
    return DiscreteDist(prior.support, joint / evidence), evidence


def _same_support(p: DiscreteDist, q: DiscreteDist) -> None:
    if p.support.shape != q.support.shape or not np.array_equal(p.support, q.support):
        raise ValueError("distributions live on different supports")


def hellinger(p: DiscreteDist, q: DiscreteDist) -> float:
    _same_support(p, q)
    return math.sqrt(0.5 * float(np.sum((np.sqrt(p.probs) - np.sqrt(q.probs)) ** 2)))


def tv(p: DiscreteDist, q: DiscreteDist) -> float:
    _same_support(p, q)
    return 0.5 * float(np.sum(np.abs(p.probs - q.probs)))


def check_tv_hellinger(p: DiscreteDist, q: DiscreteDist):
    """Return ``(holds, d_tv, d_hel, slack)`` for ``d_tv <= sqrt(2) d_hel``."""
    d_tv = tv(p, q)
    d_hel = hellinger(p, q)
    slack = math.sqrt(2) * d_hel - d_tv
    return slack >= -1e-12, d_tv, d_hel, slack


def _check_stochastic(P, n: int, name: str) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.shape != (n, n):
        raise ValueError(f"{name} must be {n}x{n}")
    if np.any(P < 0) or np.max(np.abs(P.sum(axis=1) - 1)) > 1e-12:
        raise ValueError(f"{name} is not row-stochastic")
    return P


def mh_kernel_matrix(target: DiscreteDist, proposal) -> np.ndarray:
    """Metropolis-Hastings transition matrix for ``target`` and proposal matrix ``q``.

    ``R[x, y] = q(x, y) min(1, pi(y) q(y, x) / (pi(x) q(x, y)))`` off the
    diagonal; the diagonal keeps the rejected mass.  States with zero target
    mass keep the plain proposal acceptance rule (ratio 0 into them).
    """
    pi = target.probs
    n = pi.size
    Q = _check_stochastic(proposal, n, "proposal")
    num = pi[None, :] * Q.T
    den = pi[:, None] * Q
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(den > 0, np.minimum(1.0, num / den), 1.0)
    R = Q * rho
    np.fill_diagonal(R, 0.0)
    R[np.diag_indices(n)] = 1.0 - R.sum(axis=1)
    return R


@dataclass
class GibbsReport:
    positivity_ok: bool
    violations: list
    n_classes: int
    blocked: list


def gibbs_kernel_matrix(joint):
    """One Gibbs sweep (``z | x`` then ``x | z``) on the flattened state ``(x, z)``.

    Args:
        joint: ``(nx, nz)`` probability matrix.

    Returns:
        ``(R, report)``.  ``R`` is ``(nx*nz, nx*nz)`` with state index ``x*nz + z``.
        Rows for states outside the marginal supports are left as self-loops.
        The report lists positivity violations (``p(x) > 0``, ``p(z) > 0`` but
        ``p(x, z) = 0``) and the communicating classes of the support, which
        is where irreducibility fails when positivity does.
    """
    P = np.asarray(joint, dtype=np.float64)
    if P.ndim != 2 or np.any(P < 0) or abs(P.sum() - 1) > 1e-12:
        raise ValueError("joint must be a non-negative matrix summing to 1")
    nx, nz = P.shape
    px = P.sum(axis=1)
    pz = P.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z_given_x = np.where(px[:, None] > 0, P / px[:, None], 0.0)
        x_given_z = np.where(pz[None, :] > 0, P / pz[None, :], 0.0)
    # R[(x,z), (x',z')] = p(z'|x) p(x'|z')
    step = z_given_x[:, None, :] * x_given_z[None, :, :]  # (x, x', z')
    R = np.repeat(step[:, None, :, :], nz, axis=1).reshape(nx * nz, nx * nz)
    dead = np.flatnonzero(px == 0)
    for x in dead:
        for z in range(nz):
            s = x * nz + z
            R[s] = 0.0
            R[s, s] = 1.0
    violations = [(int(x), int(z)) for x in range(nx) for z in range(nz)
                  if px[x] > 0 and pz[z] > 0 and P[x, z] == 0]
    live = np.flatnonzero(P.ravel() > 0)
    sub = R[np.ix_(live, live)] > 0
    n_classes, labels = connected_components(sub, directed=True, connection="strong")
    blocked = []
    if n_classes > 1:
        for c in range(n_classes):
            blocked.append([divmod(int(s), nz) for s in live[labels == c]])
    return R, GibbsReport(not violations, violations, int(n_classes), blocked)


def posterior_stability_curve(prior: DiscreteDist, likelihood: Callable, y_hat: float, deltas):
    """``[(|delta|, d_hel, d_tv)]`` between the posteriors at ``y_hat + delta`` and ``y_hat``."""
    base, _ = grid_posterior(prior, likelihood, y_hat)
    out = []
    for d in deltas:
        post, _ = grid_posterior(prior, likelihood, y_hat + d)
        out.append((abs(float(d)), hellinger(post, base), tv(post, base)))
    return out


def gaussian_grid_family(prior_var: float = 1.0, noise_var: float = 0.5, n: int = 2001, half_width: float = 10.0):
    """Discretized Gaussian prior and Gaussian likelihood ``y = x + noise``."""
    xs = np.linspace(-half_width, half_width, n)
    prior = DiscreteDist(xs, _normalize(np.exp(-xs**2 / (2 * prior_var))))

    def likelihood(y, x):
        return np.exp(-((y - x) ** 2) / (2 * noise_var)) / math.sqrt(2 * math.pi * noise_var)

    return prior, likelihood


def ula_bias_table(pairs, rng: np.random.Generator, n_chains: int = 10**4, n_keep: int = 100):
    """Empirical vs predicted ULA stationary variance on ``E(x) = x^2 / (2 s^2)``.

    ``pairs`` holds ``(s, tau)`` with ``s`` a standard deviation.  Returns rows
    ``(s, tau, predicted, empirical, rel_err)``.
    """
    from .samplers import gaussian_target, ula_run

    rows = []
    for s, tau in pairs:
        s2 = s * s
        target = gaussian_target(1, var=s2)
        # contraction per step is 1 - tau/s2
        burn = int(math.ceil(20 * s2 / tau))
        thin = max(1, int(math.ceil(s2 / tau)))
        out = ula_run(target, tau, np.zeros((n_chains, 1)), burn + n_keep * thin, rng, burn_in=burn, thin=thin)
        pred = s2 / (1 - tau / (2 * s2))
        emp = float(out.var())
        rows.append((s, tau, pred, emp, abs(emp / pred - 1)))
    return rows


def _case_tv_hellinger(rng):
    worst = math.inf
    for _ in range(1000):
        p = DiscreteDist(np.arange(50.0), _normalize(rng.random(50) ** 3))
        q = DiscreteDist(np.arange(50.0), _normalize(rng.random(50) ** 3))
        ok, _, d_hel, slack = check_tv_hellinger(p, q)
        if not ok or d_hel > 1 + 1e-12:
            return False, [("pair", slack)]
        worst = min(worst, slack)
    return True, [("min_slack", worst)]


def _case_mh_kernel(rng):
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 11))
        pi = _normalize(rng.random(n) + 1e-3)
        Q = rng.random((n, n))
        Q = Q / Q.sum(axis=1, keepdims=True)
        R = mh_kernel_matrix(DiscreteDist(np.arange(n, dtype=float), pi), Q)
        flow = pi[:, None] * R
        worst = max(worst, np.abs(pi @ R - pi).max(), np.abs(flow - flow.T).max(),
                    np.abs(R.sum(axis=1) - 1).max())
    return worst <= 1e-14, [("max_err", worst)]


def _case_gibbs_kernel(rng):
    worst = 0.0
    for _ in range(100):
        nx, nz = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        P = rng.random((nx, nz))
        P /= P.sum()
        R, rep = gibbs_kernel_matrix(P)
        p = P.ravel()
        worst = max(worst, np.abs(p @ R - p).max())
        if not rep.positivity_ok:
            return False, [("positivity", rep.violations)]
    return worst <= 1e-14, [("max_err", worst)]


def _case_conjugate(rng):
    prior_var, noise_var, y = 1.0, 0.5, 0.7
    prior, lik = gaussian_grid_family(prior_var, noise_var)
    post, _ = grid_posterior(prior, lik, y)
    v = 1 / (1 / prior_var + 1 / noise_var)
    m = v * y / noise_var
    err = max(abs(post.mean() - m), abs(post.var() - v))
    return err <= 1e-4, [("mean", post.mean()), ("var", post.var()), ("max_err", err)]


def _case_stability(rng, out_dir=None):
    prior, lik = gaussian_grid_family()
    curve = posterior_stability_curve(prior, lik, 0.3, [0.4, 0.2, 0.1, 0.05, 0.0])
    if out_dir is not None:
        write_csv(os.path.join(out_dir, "stability.csv"), ["delta", "hellinger", "tv"], curve)
    d = [c[1] for c in curve]
    ok = all(a > b for a, b in zip(d, d[1:])) and d[-1] == 0.0 and max(d) <= 1
    return ok, [("hellinger", d)]


def _case_ula_bias(rng, out_dir=None):
    rows = ula_bias_table([(1.0, 0.05), (1.0, 0.1), (2.0, 0.2)], rng)
    if out_dir is not None:
        write_csv(os.path.join(out_dir, "ula_bias.csv"), ["s", "tau", "predicted", "empirical", "rel_err"], rows)
    return all(r[4] <= 0.01 for r in rows), rows


SUITE_CASES = {
    "tv-hellinger": _case_tv_hellinger,
    "mh-kernel": _case_mh_kernel,
    "gibbs-kernel": _case_gibbs_kernel,
    "conjugate": _case_conjugate,
    "stability": _case_stability,
    "ula-bias": _case_ula_bias,
}


def run_suite(cases=None, seed: int = 0, out_dir=None):
    """Run the named oracle cases (all by default).

    Returns a list of ``(name, passed, details)``.  With ``out_dir`` the
    stability curve, the ULA bias table and a ``verify.csv`` summary are written.
    """
    names = list(SUITE_CASES) if not cases else list(cases)
    unknown = [n for n in names if n not in SUITE_CASES]
    if unknown:
        raise ValueError(f"unknown verification cases: {', '.join(unknown)}")
    rng = np.random.default_rng(seed)
    results = []
    for name in names:
        fn = SUITE_CASES[name]
        sub = rng.spawn(1)[0]
        if name in ("stability", "ula-bias"):
            ok, details = fn(sub, out_dir)
        else:
            ok, details = fn(sub)
        results.append((name, bool(ok), details))
    if out_dir is not None:
        write_csv(os.path.join(out_dir, "verify.csv"), ["case", "passed"], [(n, int(ok)) for n, ok, _ in results])
    return results
