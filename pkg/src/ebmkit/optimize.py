"""Deterministic solvers: accelerated proximal gradient, conjugate gradient, Adam."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .imageio import write_csv

__all__ = [
    "ApgdConfig",
    "ApgdResult",
    "apgd",
    "prox_zero",
    "soft_threshold",
    "CGResult",
    "conjugate_gradient",
    "AdamConfig",
    "Adam",
    "adam_step",
]

log = logging.getLogger(__name__)

_EXTRAPOLATION = 1.0 / math.sqrt(2.0)
# Once (L/2)||d||^2 drops to this multiple of the rounding error of
# f(x+) - f(xb) - <g, d>, the value difference no longer resolves the bound and
# the excess is taken from gradients instead: (1/2)<grad f(x+) - grad f(xb), d>,
# exact for quadratics.
_RESOLVE = 1e4 * 64 * np.finfo(np.float64).eps


@dataclass
class ApgdConfig:
    max_iters: int = 1000
    lipschitz0: float = 1.0
    backtrack: int = 20
    shrink: float = 0.5
    grow: float = 2.0
    rtol: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 0 or self.backtrack < 1:
            raise ValueError("max_iters must be >= 0 and backtrack >= 1")
        if not self.lipschitz0 > 0:
            raise ValueError("lipschitz0 must be positive")
        if not 0 < self.shrink < 1 or not self.grow > 1:
            raise ValueError("need 0 < shrink < 1 < grow")
        if self.rtol < 0:
            raise ValueError("rtol must be non-negative")


class ApgdResult(NamedTuple):
    x: np.ndarray
    iters: int
    lipschitz: float
    backtrack_failed: bool
    trace: list


def prox_zero(v, tau):
    return v


def soft_threshold(v, tau):
    """Proximal map of ``tau * |.|_1``."""
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def apgd(f_value_grad: Callable, prox_g: Callable, x0, cfg: ApgdConfig | None = None,
         g_value: Callable | None = None, trace_path=None, callback: Callable | None = None) -> ApgdResult:
    """Accelerated proximal gradient descent with Lipschitz backtracking.

    Each iteration extrapolates ``xb = x_k + (x_k - x_{k-1}) / sqrt(2)`` and tries
    ``x+ = prox_g(xb - grad f(xb) / L, 1 / L)``.  A candidate is accepted when
    the quadratic upper bound at ``xb`` holds, after which ``L`` shrinks by
    ``cfg.shrink``; otherwise ``L`` grows by ``cfg.grow`` and the candidate is
    recomputed, up to ``cfg.backtrack`` times.  Iteration stops after
    ``cfg.max_iters`` steps or once ``||x+ - x_k|| <= rtol * max(1, ||x_k||)``.

    Args:
        f_value_grad: ``x -> (f(x), grad f(x))`` for the smooth part.
        prox_g: ``(v, tau) -> argmin_u g(u) + ||u - v||**2 / (2 tau)``.
        x0: starting point.
        cfg: solver settings.
        g_value: optional ``g``; trace objectives are ``f + g`` when given, else ``f``.
        trace_path: if given, the trace is written there as CSV.
        callback: called as ``callback(k, x)`` after every accepted step.

    Returns:
        ApgdResult.  When backtracking is exhausted the last accepted iterate is
        returned with ``backtrack_failed`` set and a warning is emitted.
    """
    cfg = cfg or ApgdConfig()
    x = np.array(x0, dtype=np.float64)
    x_prev = x.copy()
    L = float(cfg.lipschitz0)
    trace = []
    failed = False
    iters = 0
    while iters < cfg.max_iters:
        xb = x + _EXTRAPOLATION * (x - x_prev)
        fb, gb = f_value_grad(xb)
        accepted = None
        for _ in range(cfg.backtrack):
            cand = prox_g(xb - gb / L, 1.0 / L)
            fc, gc = f_value_grad(cand)
            d = cand - xb
            lin = float(np.vdot(gb, d))
            quad = 0.5 * L * float(np.vdot(d, d))
            excess = fc - fb - lin
            if quad <= _RESOLVE * (abs(fb) + abs(fc) + abs(lin)):
                excess = 0.5 * float(np.vdot(gc - gb, d))
            if excess <= quad:
                accepted = cand
                L *= cfg.shrink
                break
            L *= cfg.grow
        if accepted is None:
            failed = True
            warnings.warn(f"apgd: backtracking exhausted at iteration {iters}", RuntimeWarning, stacklevel=2)
            break
        iters += 1
        step = float(np.linalg.norm(accepted - x))
        x_prev, x = x, accepted
        obj = fc + (g_value(x) if g_value is not None else 0.0)
        trace.append((iters, float(obj), L, step))
        if callback is not None:
            callback(iters, x)
        if step <= cfg.rtol * max(1.0, float(np.linalg.norm(x_prev))):
            break
    if trace_path is not None:
        write_csv(trace_path, ["iter", "objective", "L", "step_norm"], trace)
    log.debug("apgd stopped after %d iterations, L=%g", iters, L)
    return ApgdResult(x, iters, L, failed, trace)


class CGResult(NamedTuple):
    x: np.ndarray
    iters: int
    residual: float
    converged: bool
    residuals: list


def conjugate_gradient(Hv: Callable, b, max_iters: int = 200, tol: float = 1e-10, x0=None) -> CGResult:
    """Solve ``H x = b`` for symmetric positive definite ``H`` given as a product.

    Stops once ``||H x - b|| <= tol * ||b||``.  ``residuals`` holds the residual
    norm after every iteration (index 0 is the initial residual).

    Raises:
        FloatingPointError: on non-finite iterates or a non-positive curvature.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - Hv(x) if x0 is not None else b.copy()
    p = r.copy()
    rs = float(np.vdot(r, r))
    bnorm = float(np.linalg.norm(b))
    target = tol * bnorm
    residuals = [math.sqrt(rs)]
    if math.sqrt(rs) <= target:
        return CGResult(x, 0, math.sqrt(rs), True, residuals)
    it = 0
    for it in range(1, max_iters + 1):
        hp = Hv(p)
        curv = float(np.vdot(p, hp))
        if not math.isfinite(curv) or curv <= 0:
            raise FloatingPointError(f"conjugate gradient: curvature {curv} at iteration {it}")
        alpha = rs / curv
        x = x + alpha * p
        r = r - alpha * hp
        rs_new = float(np.vdot(r, r))
        if not math.isfinite(rs_new):
            raise FloatingPointError("conjugate gradient produced non-finite iterates")
        residuals.append(math.sqrt(rs_new))
        if math.sqrt(rs_new) <= target:
            return CGResult(x, it, math.sqrt(rs_new), True, residuals)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return CGResult(x, it, residuals[-1], False, residuals)


@dataclass
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


@dataclass
class Adam:
    """Adam over named parameter groups, each with its own learning rate.

    ``lrs`` maps a group name to its learning rate; the other settings are
    shared.  Moments are created lazily on the first step.
    """

    lrs: dict
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> dict:
        self.step_count += 1
        t = self.step_count
        out = {}
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            p = np.asarray(p, dtype=np.float64)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            out[name] = p - self.lrs[name] * mhat / (np.sqrt(vhat) + self.epsilon)
        return out

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


def adam_step(cfg: AdamConfig, state: dict, params, grads):
    """Single-group functional form.  ``state`` holds ``m``, ``v`` and ``step`` and is updated in place."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: {params.shape} vs {grads.shape}")
    opt = Adam({"p": cfg.learning_rate}, cfg.beta1, cfg.beta2, cfg.epsilon, state.get("step", 0))
    if "m" in state:
        opt.m["p"], opt.v["p"] = state["m"], state["v"]
    new = opt.step({"p": params}, {"p": grads})["p"]
    state.update(step=opt.step_count, m=opt.m["p"], v=opt.v["p"])
    return new
