"""MAP and MMSE reconstruction under a FoE prior, plus the standard problem setups."""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from .foe import FoeModel, prior_precision_spectrum
from .inverse import Identity, MaskedFourier, PosteriorSpec, Radon, inner, make_fourier_mask, posterior_energy_grad
from .optimize import ApgdConfig, ApgdResult, apgd, prox_zero
from .samplers import ChainStats, Target, ula_run
from .tensors import make_rng

__all__ = [
    "OPERATORS",
    "DENOISE_NOISE_VAR",
    "SNR_DB",
    "FOURIER_KEEP",
    "DEFAULT_TEMPERATURE",
    "make_operator",
    "matched_noise_var",
    "op_norm_sq",
    "posterior_lipschitz",
    "default_tau",
    "map_estimate",
    "MmseResult",
    "mmse_estimate",
]

log = logging.getLogger(__name__)

OPERATORS = ("identity", "fourier", "radon")
DENOISE_NOISE_VAR = 0.01
SNR_DB = 30.0
FOURIER_KEEP = (0.10, 0.25)
DEFAULT_TEMPERATURE = {"identity": 0.1, "fourier": 0.05, "radon": 0.05}


def make_operator(kind: str, shape, rng=None):
    """Forward operator for ``kind`` in ``OPERATORS`` on images of ``shape``.

    The Fourier mask is drawn from ``rng`` (seed 0 when omitted).
    """
    shape = tuple(int(s) for s in shape)
    if kind == "identity":
        return Identity(shape)
    if kind == "fourier":
        mask = make_fourier_mask(shape[0], shape[1], *FOURIER_KEEP, make_rng(0 if rng is None else rng))
        return MaskedFourier(mask, shape)
    if kind == "radon":
        return Radon(shape)
    raise ValueError(f"unknown operator {kind!r}; expected one of {OPERATORS}")


def matched_noise_var(kind: str, op, images, snr_db: float = SNR_DB) -> float:
    """Noise variance for a task.

    Denoising uses the fixed variance 0.01.  Otherwise the variance is chosen
    so the set-averaged signal power ``mean_i ||A x_i||^2 / d`` sits ``snr_db``
    above it.
    """
    if kind == "identity":
        return DENOISE_NOISE_VAR
    powers = []
    for x in images:
        ax = op.apply(x)
        powers.append(inner(op, ax, ax) / np.sum(op.weights))
    return float(np.mean(powers) / 10 ** (snr_db / 10))


def op_norm_sq(op, shape, iters: int = 60) -> float:
    """``||A||^2`` by power iteration on ``A^T A`` from a fixed start."""
    v = np.ones(shape) / np.sqrt(np.prod(shape))
    lam = 0.0
    for _ in range(iters):
        w = op.adjoint(op.apply(v))
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


def posterior_lipschitz(spec: PosteriorSpec, model: FoeModel | None, shape) -> float:
    """Upper bound on the gradient Lipschitz constant of the posterior energy.

    Uses ``phi'' <= 1 / sigma2`` for every GMM potential, so the prior part is
    bounded by the top of the prior precision spectrum.
    """
    L = op_norm_sq(spec.op, shape) / spec.noise_var
    if spec.lam > 0 and model is not None:
        L += spec.lam * float(prior_precision_spectrum(model, *shape)[-1])
    if spec.anchor is not None:
        L += spec.anchor[1]
    return L / spec.temperature


def default_tau(spec: PosteriorSpec, model: FoeModel | None, shape, factor: float = 0.5) -> float:
    return factor / posterior_lipschitz(spec, model, shape)


def _objective(spec, model, y):
    return lambda x: posterior_energy_grad(spec, model, y, x)


def map_estimate(spec: PosteriorSpec, model: FoeModel | None, y, x0, cfg: ApgdConfig | None = None,
                 trace_path=None) -> ApgdResult:
    """Maximizer of the posterior by APGD (the temperature only rescales the objective)."""
    x0 = np.asarray(x0, dtype=np.float64)
    if cfg is None:
        cfg = ApgdConfig(max_iters=2000, lipschitz0=1.0 / (spec.noise_var * spec.temperature), rtol=1e-7)
    return apgd(_objective(spec, model, y), prox_zero, x0, cfg, trace_path=trace_path)


class MmseResult(NamedTuple):
    mean: np.ndarray
    std: np.ndarray
    tau: float
    n_samples: int


def mmse_estimate(spec: PosteriorSpec, model: FoeModel | None, y, x0, n_samples: int = 20000,
                  burn_in: int = 2000, tau: float | None = None, rng=None, callback=None) -> MmseResult:
    """Posterior mean and marginal standard deviation from one ULA chain.

    Statistics are accumulated on the fly, so memory does not grow with
    ``n_samples``.  ``tau`` defaults to half the inverse of
    :func:`posterior_lipschitz`.
    """
    if n_samples < 1 or burn_in < 0:
        raise ValueError("need n_samples >= 1 and burn_in >= 0")
    x0 = np.asarray(x0, dtype=np.float64)
    shape = x0.shape
    if tau is None:
        tau = default_tau(spec, model, shape)
    obj = _objective(spec, model, y)
    dim = x0.size
    target = Target(dim, lambda v: obj(v.reshape(shape))[0], lambda v: obj(v.reshape(shape))[1].ravel())
    stats = ChainStats(dim)

    def collect(k, v):
        stats.update(v)
        if callback is not None:
            callback(k, v.reshape(shape))

    ula_run(target, tau, x0.ravel(), burn_in + n_samples, make_rng(rng), burn_in=burn_in, callback=collect,
            store=False)
    log.debug("mmse: %d samples at tau=%g", stats.count, tau)
    return MmseResult(stats.mean.reshape(shape).copy(), stats.std.reshape(shape), tau, stats.count)
