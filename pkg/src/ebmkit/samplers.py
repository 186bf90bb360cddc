"""MCMC kernels over a differentiable negative log-density.

States are numpy arrays.  A state of shape ``(dim,)`` is one chain; a state of
shape ``(n_chains, dim)`` runs independent chains side by side, in which case
the target callables must accept the leading chain axis and
``neg_log_density`` must return one value per chain.  Every sampler draws all
of its randomness from the ``rng`` it is given, so a fixed seed fixes the
trajectory.

Samples are returned with the kept-sample axis first: ``(n_kept, dim)`` or
``(n_kept, n_chains, dim)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "Target",
    "RandomWalk",
    "Mala",
    "mh_run",
    "ula_run",
    "UnderdampedParams",
    "underdamped_moments",
    "underdamped_step",
    "underdamped_run",
    "leapfrog",
    "hmc_run",
    "gibbs_latent_probs",
    "gibbs_gmm_run",
    "ChainStats",
    "gaussian_target",
]


@dataclass
class Target:
    dim: int
    neg_log_density: Callable
    grad: Callable


def gaussian_target(dim: int, var=1.0, mean=0.0) -> Target:
    """Diagonal Gaussian, vectorized over a leading chain axis."""
    var = np.broadcast_to(np.asarray(var, dtype=np.float64), (dim,))
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (dim,))
    return Target(
        dim,
        lambda x: 0.5 * np.sum((x - mean) ** 2 / var, axis=-1),
        lambda x: (x - mean) / var,
    )


def _check_state(target: Target, x0) -> np.ndarray:
    x = np.array(x0, dtype=np.float64)
    if x.shape[-1:] != (target.dim,) or x.ndim > 2:
        raise ValueError(f"state must have shape ({target.dim},) or (n_chains, {target.dim}), got {x.shape}")
    return x


def _kept(n_steps: int, burn_in: int, thin: int) -> int:
    if n_steps < 0 or burn_in < 0 or thin < 1:
        raise ValueError("need n_steps >= 0, burn_in >= 0, thin >= 1")
    return max(0, (n_steps - burn_in) // thin)


def _store(k: int, burn_in: int, thin: int) -> int:
    """Slot for the state after step ``k`` (1-based), or -1 when it is discarded."""
    j = k - burn_in
    if j > 0 and j % thin == 0:
        return j // thin - 1
    return -1


def _step_size_check(tau: float, m: float | None, L: float | None, name: str) -> None:
    if m is not None and L is not None and tau >= 2 * m / L**2:
        warnings.warn(f"{name}: step {tau} >= 2m/L^2 = {2 * m / L**2}; no ergodicity guarantee", RuntimeWarning,
                      stacklevel=3)


class RandomWalk:
    """Symmetric Gaussian proposal ``y = x + step * z``."""

    symmetric = True
    needs_grad = False

    def __init__(self, step: float):
        if step < 0:
            raise ValueError("step must be non-negative")
        self.step = float(step)

    def propose(self, x, gx, rng):
        if self.step == 0:
            return x.copy()
        return x + self.step * rng.standard_normal(x.shape)


class Mala:
    """Langevin proposal ``y = x - tau grad E(x) + sqrt(2 tau) z``."""

    symmetric = False
    needs_grad = True

    def __init__(self, tau: float):
        if not tau > 0:
            raise ValueError("tau must be positive")
        self.tau = float(tau)

    def propose(self, x, gx, rng):
        return x - self.tau * gx + math.sqrt(2 * self.tau) * rng.standard_normal(x.shape)

    def log_q(self, x, gx, y):
        """``log q(x, y)`` up to a constant that cancels in the ratio."""
        d = y - x + self.tau * gx
        return -np.sum(d * d, axis=-1) / (4 * self.tau)


def mh_run(target: Target, proposal, x0, n_steps: int, rng: np.random.Generator, burn_in: int = 0,
           thin: int = 1, strong_convexity: float | None = None, lipschitz: float | None = None):
    """Metropolis-Hastings with a random-walk or MALA proposal.

    The log acceptance ratio is ``E(x) - E(y)`` for symmetric proposals and
    adds ``log q(y, x) - log q(x, y)`` otherwise.

    Returns:
        ``(samples, accept_rate)``; ``accept_rate`` is per chain when batched.
    """
    x = _check_state(target, x0)
    if isinstance(proposal, Mala):
        _step_size_check(proposal.tau, strong_convexity, lipschitz, "mala")
    ex = np.asarray(target.neg_log_density(x), dtype=np.float64)
    if not np.all(np.isfinite(ex)):
        raise ValueError("target is not finite at the initial state")
    gx = target.grad(x) if proposal.needs_grad else None
    out = np.empty((_kept(n_steps, burn_in, thin),) + x.shape)
    accepted = np.zeros(ex.shape)
    for k in range(1, n_steps + 1):
        y = proposal.propose(x, gx, rng)
        ey = np.asarray(target.neg_log_density(y), dtype=np.float64)
        log_rho = ex - ey
        if not proposal.symmetric:
            gy = target.grad(y)
            log_rho = log_rho + proposal.log_q(y, gy, x) - proposal.log_q(x, gx, y)
        u = rng.random(ex.shape)
        # log u < log rho accepts with probability min(1, rho); nan never accepts
        acc = np.log(u) < np.minimum(log_rho, 0.0)
        if x.ndim == 1:
            if acc:
                x, ex = y, ey
                if proposal.needs_grad:
                    gx = gy
        else:
            x = np.where(acc[:, None], y, x)
            ex = np.where(acc, ey, ex)
            if proposal.needs_grad:
                gx = np.where(acc[:, None], gy, gx)
        accepted += acc
        slot = _store(k, burn_in, thin)
        if slot >= 0:
            out[slot] = x
    rate = accepted / max(n_steps, 1)
    return out, (float(rate) if np.ndim(rate) == 0 else rate)


def ula_run(target: Target, tau: float, x0, n_steps: int, rng: np.random.Generator, burn_in: int = 0,
            thin: int = 1, noise_scale: float = 1.0, strong_convexity: float | None = None,
            lipschitz: float | None = None, callback: Callable | None = None, block: int = 256,
            store: bool = True):
    """Unadjusted Langevin ``x <- x - tau grad E(x) + sqrt(2 tau) z``.

    Args:
        noise_scale: multiplies the injected noise; 0 gives plain gradient descent.
        callback: called as ``callback(k, x)`` after every step past burn-in
            (useful for streaming statistics without storing samples).
        block: noise is drawn this many steps at a time.
        store: when False nothing is kept and an empty array is returned;
            pair with ``callback`` for long runs on large states.

    Raises:
        FloatingPointError: when an iterate becomes non-finite.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    _step_size_check(tau, strong_convexity, lipschitz, "ula")
    x = _check_state(target, x0)
    out = np.empty(((_kept(n_steps, burn_in, thin) if store else 0),) + x.shape)
    s = math.sqrt(2 * tau) * noise_scale
    noise = None
    for k in range(1, n_steps + 1):
        j = (k - 1) % block
        if j == 0 and s != 0:
            noise = rng.standard_normal((min(block, n_steps - k + 1),) + x.shape)
        x = x - tau * target.grad(x)
        if s != 0:
            x = x + s * noise[j]
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"ula: non-finite iterate at step {k}")
        slot = _store(k, burn_in, thin) if store else -1
        if slot >= 0:
            out[slot] = x
        if callback is not None and k > burn_in:
            callback(k, x)
    return out


@dataclass(frozen=True)
class UnderdampedParams:
    alpha: float = 2.0
    beta: float = 1.0
    tau: float = 0.1

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.tau > 0):
            raise ValueError("alpha, beta and tau must be positive")


def _xx_bracket(alpha: float, h: float) -> float:
    """``h - 2(1 - e^{-ah})/a + (1 - e^{-2ah})/(2a)``, cancellation-free for small ``ah``."""
    a = alpha * h
    if a < 0.1:
        # sum_{n>=3} (-1)^{n+1} (2^{n-1} - 2) a^n / n!, divided by alpha
        total, term = 0.0, a * a / 2.0
        for n in range(3, 30):
            term *= a / n
            total += (-1) ** (n + 1) * (2 ** (n - 1) - 2) * term
        return total / alpha
    return h + 2 * math.expm1(-a) / alpha - math.expm1(-2 * a) / (2 * alpha)


def underdamped_moments(p: UnderdampedParams, h: float | None = None):
    """Per-coordinate coefficients of the exact frozen-gradient transition.

    Returns ``(cx, cv, gx, gv, sxx, sxv, svv)`` with mean
    ``x + cx v - gx grad``, ``cv v - gv grad`` and 2x2 covariance
    ``[[sxx, sxv], [sxv, svv]]``.
    """
    h = p.tau if h is None else h
    a, b = p.alpha, p.beta
    one_minus = -math.expm1(-a * h)  # 1 - e^{-ah}
    cx = one_minus / a
    cv = math.exp(-a * h)
    gv = b / a * one_minus
    # h - (1 - e^{-ah})/a, again cancellation-free
    if a * h < 0.1:
        # sum_{n>=2} (-1)^n (ah)^n / n!, divided by alpha
        total, term = 0.0, a * h
        for n in range(2, 30):
            term *= a * h / n
            total += (-1) ** n * term
        lin = total / a
    else:
        lin = h - one_minus / a
    gx = b / a * lin
    sxx = 2 * b / a * _xx_bracket(a, h)
    sxv = b / a * one_minus**2
    svv = -b * math.expm1(-2 * a * h)
    return cx, cv, gx, gv, sxx, sxv, svv


def underdamped_step(target: Target, p: UnderdampedParams, x, v, rng: np.random.Generator, grad=None):
    """One draw from the Gaussian transition with the gradient frozen at ``x``."""
    cx, cv, gx, gv, sxx, sxv, svv = underdamped_moments(p)
    g = target.grad(x) if grad is None else grad
    mx = x + cx * v - gx * g
    mv = cv * v - gv * g
    l11 = math.sqrt(sxx) if sxx > 0 else 0.0
    l21 = sxv / l11 if l11 > 0 else 0.0
    rest = svv - l21 * l21
    if l11 == 0 or rest < 0:
        warnings.warn("underdamped covariance not positive definite at this step; taking the mean step",
                      RuntimeWarning, stacklevel=2)
        return mx, mv
    l22 = math.sqrt(rest)
    z1 = rng.standard_normal(np.shape(x))
    z2 = rng.standard_normal(np.shape(x))
    return mx + l11 * z1, mv + l21 * z1 + l22 * z2


def underdamped_run(target: Target, p: UnderdampedParams, x0, v0, n_steps: int, rng: np.random.Generator,
                    burn_in: int = 0, thin: int = 1):
    """Iterate :func:`underdamped_step`.

    Returns ``(xs, vs)``.  With ``n_steps = 0`` only the initial state is
    returned (one row each); otherwise the kept states after each step.
    """
    x = _check_state(target, x0)
    v = np.array(v0, dtype=np.float64)
    if v.shape != x.shape:
        raise ValueError("x0 and v0 shapes differ")
    if n_steps == 0:
        return x[None].copy(), v[None].copy()
    n = _kept(n_steps, burn_in, thin)
    xs = np.empty((n,) + x.shape)
    vs = np.empty((n,) + x.shape)
    for k in range(1, n_steps + 1):
        x, v = underdamped_step(target, p, x, v, rng)
        slot = _store(k, burn_in, thin)
        if slot >= 0:
            xs[slot] = x
            vs[slot] = v
    return xs, vs


def leapfrog(target: Target, mass_diag, x, v, h: float, n_leaps: int):
    """Stoermer-Verlet integration of ``H = E(x) + v^T M^{-1} v / 2``."""
    if not h > 0:
        raise ValueError("h must be positive")
    minv = 1.0 / np.asarray(mass_diag, dtype=np.float64)
    if np.any(minv <= 0) or not np.all(np.isfinite(minv)):
        raise ValueError("mass diagonal must be positive")
    x = np.array(x, dtype=np.float64)
    v = np.array(v, dtype=np.float64)
    g = target.grad(x)
    for _ in range(n_leaps):
        v = v - 0.5 * h * g
        x = x + h * minv * v
        g = target.grad(x)
        v = v - 0.5 * h * g
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise FloatingPointError("leapfrog: non-finite state")
    return x, v


def hamiltonian(target: Target, mass_diag, x, v):
    minv = 1.0 / np.asarray(mass_diag, dtype=np.float64)
    return np.asarray(target.neg_log_density(x)) + 0.5 * np.sum(minv * v * v, axis=-1)


def hmc_run(target: Target, mass_diag, h: float, n_leaps: int, x0, n_steps: int, rng: np.random.Generator,
            burn_in: int = 0, thin: int = 1):
    """Hamiltonian Monte Carlo with Gaussian momenta ``v ~ N(0, M)``.

    Returns ``(samples, accept_rate)``.
    """
    x = _check_state(target, x0)
    mass = np.broadcast_to(np.asarray(mass_diag, dtype=np.float64), (target.dim,))
    sd = np.sqrt(mass)
    out = np.empty((_kept(n_steps, burn_in, thin),) + x.shape)
    accepted = np.zeros(x.shape[:-1])
    for k in range(1, n_steps + 1):
        v = sd * rng.standard_normal(x.shape)
        h0 = hamiltonian(target, mass, x, v)
        xn, vn = leapfrog(target, mass, x, v, h, n_leaps)
        vn = -vn
        h1 = hamiltonian(target, mass, xn, vn)
        acc = np.log(rng.random(accepted.shape)) < np.minimum(h0 - h1, 0.0)
        if x.ndim == 1:
            if acc:
                x = xn
        else:
            x = np.where(acc[:, None], xn, x)
        accepted += acc
        slot = _store(k, burn_in, thin)
        if slot >= 0:
            out[slot] = x
    rate = accepted / max(n_steps, 1)
    return out, (float(rate) if np.ndim(rate) == 0 else rate)


def _gmm_arrays(weights, means, variances):
    w = np.asarray(weights, dtype=np.float64)
    mu = np.asarray(means, dtype=np.float64)
    if mu.ndim == 1:
        mu = mu[:, None]
    var = np.asarray(variances, dtype=np.float64)
    if w.ndim != 1 or mu.shape[0] != w.size or var.shape != w.shape:
        raise ValueError("weights, means and variances must describe the same components")
    if np.any(w < 0) or abs(w.sum() - 1) > 1e-10:
        raise ValueError("weights must lie on the simplex")
    if np.any(var <= 0):
        raise ValueError("variances must be positive")
    return w, mu, var


def gibbs_latent_probs(weights, means, variances, x) -> np.ndarray:
    """``P(z = i | x)`` for isotropic components, shape ``(..., K)``."""
    w, mu, var = _gmm_arrays(weights, means, variances)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x[None]
    d = mu.shape[1]
    sq = np.sum((x[..., None, :] - mu) ** 2, axis=-1)
    with np.errstate(divide="ignore", over="ignore"):
        logp = np.log(w) - 0.5 * d * np.log(2 * np.pi * var) - sq / (2 * var)
    top = logp.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise FloatingPointError("gibbs: no component has mass at the current state")
    p = np.exp(logp - top)
    return p / p.sum(axis=-1, keepdims=True)


def gibbs_gmm_run(weights, means, variances, x0, n_steps: int, rng: np.random.Generator, burn_in: int = 0,
                  thin: int = 1, return_latent: bool = False):
    """Two-block Gibbs sampler for a Gaussian mixture with latent labels.

    Alternates ``z | x ~ Categorical(P(z | x))`` and ``x | z ~ N(mu_z, var_z I)``.
    ``x0`` has shape ``(d,)`` or ``(n_chains, d)``; 1-D mixtures may pass
    scalar means.
    """
    w, mu, var = _gmm_arrays(weights, means, variances)
    d = mu.shape[1]
    x = np.array(x0, dtype=np.float64)
    if x.ndim == 0:
        x = x[None]
    if x.shape[-1] != d or x.ndim > 2:
        raise ValueError(f"state must have trailing dimension {d}")
    n = _kept(n_steps, burn_in, thin)
    out = np.empty((n,) + x.shape)
    zs = np.empty((n,) + x.shape[:-1], dtype=np.int64)
    for k in range(1, n_steps + 1):
        p = gibbs_latent_probs(w, mu, var, x)
        u = rng.random(p.shape[:-1] + (1,))
        z = np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), w.size - 1)
        x = mu[z] + np.sqrt(var[z])[..., None] * rng.standard_normal(x.shape)
        slot = _store(k, burn_in, thin)
        if slot >= 0:
            out[slot] = x
            zs[slot] = z
    return (out, zs) if return_latent else out


@dataclass
class ChainStats:
    """Streaming per-coordinate mean and variance (Welford), optional lag autocovariances.

    ``update`` takes one state; ``update_batch`` folds in a block of states
    with Chan's pairwise merge.  Autocovariances are tracked only through
    ``update`` since they need the sample order.
    """

    dim: int
    max_lag: int = 0
    count: int = 0
    mean: np.ndarray = field(default=None)
    m2: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros(self.dim)
        self._recent = []
        self._lag_sum = np.zeros((self.max_lag, self.dim))
        self._lag_n = np.zeros(self.max_lag, dtype=np.int64)
        self._sum = np.zeros(self.dim)

    def update(self, x) -> "ChainStats":
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size != self.dim:
            raise ValueError(f"expected {self.dim} values, got {x.size}")
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)
        if self.max_lag:
            self._sum += x
            for lag, prev in enumerate(reversed(self._recent), start=1):
                self._lag_sum[lag - 1] += x * prev
                self._lag_n[lag - 1] += 1
            self._recent.append(x.copy())
            if len(self._recent) > self.max_lag:
                self._recent.pop(0)
        return self

    def update_batch(self, xs) -> "ChainStats":
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, self.dim)
        n = xs.shape[0]
        if n == 0:
            return self
        bm = xs.mean(axis=0)
        bm2 = ((xs - bm) ** 2).sum(axis=0)
        tot = self.count + n
        delta = bm - self.mean
        self.mean = self.mean + delta * n / tot
        self.m2 = self.m2 + bm2 + delta**2 * self.count * n / tot
        self.count = tot
        return self

    @property
    def variance(self) -> np.ndarray:
        """Unbiased variance; zeros until two samples have arrived."""
        if self.count < 2:
            return np.zeros(self.dim)
        return np.maximum(self.m2 / (self.count - 1), 0.0)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def autocovariance(self) -> np.ndarray:
        """Lag-``1..max_lag`` autocovariances around the overall mean, ``(max_lag, dim)``."""
        out = np.zeros((self.max_lag, self.dim))
        for i in range(self.max_lag):
            if self._lag_n[i]:
                out[i] = self._lag_sum[i] / self._lag_n[i] - self.mean**2
        return out
