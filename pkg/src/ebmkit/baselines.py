"""Reference reconstructions: adjoint backprojection and smoothed anisotropic TV."""

from __future__ import annotations

import numpy as np

from .inverse import MaskedFourier, Radon, gaussian_negloglik
from .optimize import ApgdConfig, ApgdResult, apgd, prox_zero
from .tensors import psnr

__all__ = ["backprojection", "tv_value_grad", "baseline_tv", "tune_tv_weight"]

TV_EPS = 1e-3


def backprojection(op, y) -> np.ndarray:
    """Naive reconstruction ``A^T y``.

    For the masked Fourier operator the adjoint is divided by ``h * w`` so it
    equals zero-filled inversion, i.e. the adjoint of the unitary transform.
    """
    x = op.adjoint(y)
    if isinstance(op, MaskedFourier):
        x = x / x.size
    return x


def _data_lipschitz(op, noise_var):
    from .recon import op_norm_sq

    return max(op_norm_sq(op, op.shape), 1e-12) / noise_var


def tv_value_grad(x, eps: float = TV_EPS):
    """``sum sqrt((D1 x)^2 + eps^2) + sqrt((D2 x)^2 + eps^2)`` with forward differences.

    Differences across the image border are not taken (Neumann boundary).
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    d1 = np.diff(x, axis=0)
    d2 = np.diff(x, axis=1)
    s1 = np.sqrt(d1 * d1 + eps * eps)
    s2 = np.sqrt(d2 * d2 + eps * eps)
    value = float(s1.sum() + s2.sum())
    q1 = d1 / s1
    q2 = d2 / s2
    g = np.zeros_like(x)
    g[:-1] -= q1
    g[1:] += q1
    g[:, :-1] -= q2
    g[:, 1:] += q2
    return value, g


def baseline_tv(op, y, noise_var: float, tv_weight: float, eps: float = TV_EPS,
                cfg: ApgdConfig | None = None, x0=None) -> ApgdResult:
    """Minimize ``NLL(y | x) + tv_weight * TV_eps(x)`` with APGD.

    ``tv_weight = 0`` gives the (noiseless-identity) data back.  The start
    defaults to the backprojection, or zero for the Radon transform whose
    adjoint is far off the image scale.
    """
    if tv_weight < 0:
        raise ValueError("tv_weight must be non-negative")

    def f(x):
        v, g = gaussian_negloglik(y, x, op, noise_var)
        if tv_weight > 0:
            tv, gt = tv_value_grad(x, eps)
            v += tv_weight * tv
            g = g + tv_weight * gt
        return v, g

    if cfg is None:
        cfg = ApgdConfig(max_iters=3000, lipschitz0=_data_lipschitz(op, noise_var), rtol=1e-6)
    if x0 is None:
        start = np.zeros(op.shape) if isinstance(op, Radon) else backprojection(op, y)
    else:
        start = np.asarray(x0, dtype=np.float64)
    return apgd(f, prox_zero, start, cfg)


def tune_tv_weight(op, pairs, noise_var: float, grid, eps: float = TV_EPS, cfg: ApgdConfig | None = None):
    """Pick the weight in ``grid`` with the best mean PSNR over ``(y, x_clean)`` pairs.

    Returns ``(best_weight, [(weight, mean_psnr), ...])``.  This uses the
    clean images, so it gives the baseline its best case.
    """
    scores = []
    for w in grid:
        vals = [psnr(baseline_tv(op, y, noise_var, w, eps, cfg).x, x) for y, x in pairs]
        scores.append((float(w), float(np.mean(vals))))
    best = max(scores, key=lambda t: t[1])[0]
    return best, scores
