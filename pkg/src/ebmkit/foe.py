"""Fields-of-Experts energy with negative-log Gaussian-mixture potentials.

The energy of an image ``x`` is

    E(x) = sum_j sum_p phi_j((k_j * x)_p),
    phi_j(t) = -log sum_i w_ji exp(-(t - mu_i)**2 / (2 sigma2)),

with circular convolutions ``k_j * x`` and filters ``k_j = sum_m betas[j, m] b_m``
spanned by the 5x5 DCT basis ``b``.  The means are shared across filters and
sit on the uniform grid ``[-nu, nu]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _gmm
from .tensors import as_image, dct_basis, kernel_offsets, shift_stack, unshift_sum

__all__ = [
    "WEIGHT_FLOOR",
    "GmmPotential",
    "FoeModel",
    "potential_eval",
    "build_filters",
    "energy",
    "energy_grad",
    "energy_value_grad",
    "energy_hvp",
    "param_grad",
    "prior_precision_spectrum",
    "one_step_denoise",
    "save_model",
    "load_model",
    "model_to_dict",
    "model_from_dict",
]

WEIGHT_FLOOR = 1e-12
KERNEL_SIZE = 5
SCHEMA_VERSION = 1

_BASIS = dct_basis(KERNEL_SIZE)
_BASIS_FLAT = _BASIS.reshape(KERNEL_SIZE**2, -1)


def grid_means(nu: float, n_components: int) -> np.ndarray:
    return -nu + 2.0 * nu * np.arange(n_components) / (n_components - 1)


@dataclass
class GmmPotential:
    """One negative-log GMM potential on the equidistant mean grid ``[-nu, nu]``."""

    weights: np.ndarray
    nu: float
    sigma2: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or self.weights.size < 2:
            raise ValueError("a potential needs at least two components")
        if np.any(self.weights < WEIGHT_FLOOR) or not np.all(np.isfinite(self.weights)):
            raise ValueError(f"weights must be finite and >= {WEIGHT_FLOOR}")
        if self.nu <= 0 or self.sigma2 <= 0:
            raise ValueError("nu and sigma2 must be positive")

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def means(self) -> np.ndarray:
        return grid_means(self.nu, self.n_components)


_MAX_LOG_RATIO = 500.0


def _kernel_params(weights: np.ndarray, nu: float, sigma2: float):
    k = weights.size
    mu = grid_means(nu, k)
    delta = 2.0 * nu / (k - 1)
    b = np.log(weights) - mu**2 / (2.0 * sigma2)
    log_ratio = np.diff(b)
    if np.max(np.abs(log_ratio)) > _MAX_LOG_RATIO:
        return None
    return b, np.exp(log_ratio), float(mu[0]), delta


def _eval_flat(t: np.ndarray, weights: np.ndarray, nu: float, sigma2: float):
    t = np.ascontiguousarray(t, dtype=np.float64).ravel()
    params = _kernel_params(weights, nu, sigma2)
    if params is None:
        return _gmm.gmm_eval_dense(t, np.log(weights), grid_means(nu, weights.size), sigma2)
    return _gmm.gmm_eval(t, *params, sigma2)


def _weight_adjoint(t, c_phi, c_d1, weights, nu, sigma2):
    t, c_phi, c_d1 = (np.ascontiguousarray(a, dtype=np.float64).ravel() for a in (t, c_phi, c_d1))
    params = _kernel_params(weights, nu, sigma2)
    if params is None:
        acc = _gmm.gmm_weight_adjoint_dense(t, c_phi, c_d1, np.log(weights), grid_means(nu, weights.size), sigma2)
    else:
        acc = _gmm.gmm_weight_adjoint(t, c_phi, c_d1, *params, sigma2)
    return acc / weights


def potential_eval(p: GmmPotential, t):
    """Value, first and second derivative of the potential at ``t`` (scalar or array)."""
    arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("potential argument must be finite")
    phi, d1, d2, _ = _eval_flat(arr, p.weights, p.nu, p.sigma2)
    if arr.ndim == 0:
        return float(phi[0]), float(d1[0]), float(d2[0])
    return phi.reshape(arr.shape), d1.reshape(arr.shape), d2.reshape(arr.shape)


@dataclass
class FoeModel:
    """Filter coefficients over the DCT basis plus per-filter potential weights.

    ``betas`` has shape ``(o, 25)`` and ``weights`` shape ``(o, n_components)``.
    ``lam`` and ``anchor_mean`` are optional extras carried in the model file
    (the learned regularization weight of bilevel training, and the target
    mean of the constant-mode anchor).
    """

    betas: np.ndarray
    weights: np.ndarray
    nu: float
    sigma2: float
    dc_free: bool = True
    lam: float | None = None
    anchor_mean: float | None = None
    schema_version: int = field(default=SCHEMA_VERSION)

    def __post_init__(self):
        self.betas = np.array(self.betas, dtype=np.float64)
        self.weights = np.array(self.weights, dtype=np.float64)
        if self.betas.ndim != 2 or self.betas.shape[1] != KERNEL_SIZE**2 or self.betas.shape[0] < 1:
            raise ValueError(f"betas must have shape (o, 25), got {self.betas.shape}")
        if self.weights.ndim != 2 or self.weights.shape[0] != self.betas.shape[0]:
            raise ValueError("need one weight vector per filter")
        if self.weights.shape[1] < 2:
            raise ValueError("potentials need at least two components")
        if np.any(self.weights < WEIGHT_FLOOR) or not np.all(np.isfinite(self.weights)):
            raise ValueError(f"weights must be finite and >= {WEIGHT_FLOOR}")
        if not np.all(np.isfinite(self.betas)):
            raise ValueError("betas must be finite")
        if self.nu <= 0 or self.sigma2 <= 0:
            raise ValueError("nu and sigma2 must be positive")
        if self.dc_free and np.any(self.betas[:, 0] != 0.0):
            raise ValueError("dc_free model has a nonzero constant-filter coefficient")

    @property
    def n_filters(self) -> int:
        return self.betas.shape[0]

    @property
    def n_components(self) -> int:
        return self.weights.shape[1]

    @property
    def means(self) -> np.ndarray:
        return grid_means(self.nu, self.n_components)

    @property
    def potentials(self) -> list[GmmPotential]:
        return [GmmPotential(w, self.nu, self.sigma2) for w in self.weights]

    def filters(self) -> np.ndarray:
        return build_filters(self.betas)

    def copy(self) -> "FoeModel":
        return FoeModel(self.betas.copy(), self.weights.copy(), self.nu, self.sigma2,
                        self.dc_free, self.lam, self.anchor_mean, self.schema_version)


def build_filters(betas) -> np.ndarray:
    """Filters ``k_i = sum_j betas[i, j] b_j`` as an ``(o, 5, 5)`` array."""
    betas = np.asarray(betas, dtype=np.float64)
    return (betas @ _BASIS_FLAT).reshape(-1, KERNEL_SIZE, KERNEL_SIZE)


def _check_image(x) -> np.ndarray:
    return as_image(x)


def _responses(model: FoeModel, stack: np.ndarray) -> np.ndarray:
    """Filter responses with the filter axis first: ``(o, *batch, H, W)``."""
    taps = model.betas @ _BASIS_FLAT
    return np.tensordot(taps, stack, axes=([1], [-3]))


def _adjoint_responses(model: FoeModel, g: np.ndarray) -> np.ndarray:
    """``sum_j K_j^T g_j`` for ``g`` laid out like :func:`_responses`."""
    taps = model.betas @ _BASIS_FLAT
    stack = np.moveaxis(np.tensordot(taps, g, axes=([0], [0])), 0, -3)
    return unshift_sum(stack, KERNEL_SIZE)


def _potentials_on(model: FoeModel, t: np.ndarray):
    o = model.n_filters
    phi = np.empty_like(t)
    d1 = np.empty_like(t)
    d2 = np.empty_like(t)
    for j in range(o):
        a, b, c, _ = _eval_flat(t[j], model.weights[j], model.nu, model.sigma2)
        phi[j] = a.reshape(t.shape[1:])
        d1[j] = b.reshape(t.shape[1:])
        d2[j] = c.reshape(t.shape[1:])
    return phi, d1, d2


def energy(model: FoeModel, x):
    """Energy of an image; a batch ``(..., H, W)`` gives one value per image."""
    x = _check_image(x)
    t = _responses(model, shift_stack(x, KERNEL_SIZE))
    phi, _, _ = _potentials_on(model, t)
    e = phi.sum(axis=(0, -2, -1))
    return float(e) if np.ndim(e) == 0 else e


def energy_value_grad(model: FoeModel, x):
    x = _check_image(x)
    t = _responses(model, shift_stack(x, KERNEL_SIZE))
    phi, d1, _ = _potentials_on(model, t)
    e = phi.sum(axis=(0, -2, -1))
    return (float(e) if np.ndim(e) == 0 else e), _adjoint_responses(model, d1)


def energy_grad(model: FoeModel, x) -> np.ndarray:
    """Spatial gradient ``sum_j K_j^T phi_j'(K_j x)``."""
    return energy_value_grad(model, x)[1]


def energy_hvp(model: FoeModel, x, v) -> np.ndarray:
    """Hessian-vector product ``sum_j K_j^T (phi_j''(K_j x) * K_j v)``."""
    x = _check_image(x)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != x.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {v.shape}")
    t = _responses(model, shift_stack(x, KERNEL_SIZE))
    _, _, d2 = _potentials_on(model, t)
    s = _responses(model, shift_stack(v, KERNEL_SIZE))
    return _adjoint_responses(model, d2 * s)


def param_grad(model: FoeModel, x, upstream_scalar: float = 1.0, upstream_image=None) -> dict:
    """Parameter gradient of ``upstream_scalar * E(x) + <upstream_image, grad_x E(x)>``.

    Batched inputs are summed over the batch.  Returns a dict with ``betas``
    ``(o, 25)`` and ``weights`` ``(o, n_components)``; the constant-filter
    column is included even for DC-free models (callers mask it).
    """
    x = _check_image(x)
    o, K = model.weights.shape
    out = {"betas": np.zeros_like(model.betas), "weights": np.zeros_like(model.weights)}
    if upstream_scalar == 0.0 and upstream_image is None:
        return out
    sx = shift_stack(x, KERNEL_SIZE)  # (*batch, 25, H, W)
    t = _responses(model, sx)
    phi, d1, d2 = _potentials_on(model, t)

    def tap_corr(a, stack):
        # sum over pixels (and batch) of a_j(p) * stack_q(p) -> (o, 25)
        a_flat = a.reshape(o, -1)
        st = np.moveaxis(stack, -3, 0).reshape(KERNEL_SIZE**2, -1)
        return a_flat @ st.T

    grad_k = np.zeros((o, KERNEL_SIZE**2))
    c_phi = np.zeros_like(t)
    c_d1 = np.zeros_like(t)
    if upstream_scalar != 0.0:
        grad_k += upstream_scalar * tap_corr(d1, sx)
        c_phi[:] = upstream_scalar
    if upstream_image is not None:
        u = np.asarray(upstream_image, dtype=np.float64)
        if u.shape != x.shape:
            raise ValueError(f"shape mismatch: {x.shape} vs {u.shape}")
        su = shift_stack(u, KERNEL_SIZE)
        s = _responses(model, su)
        grad_k += tap_corr(d1, su) + tap_corr(s * d2, sx)
        c_d1 = s
    for j in range(o):
        out["weights"][j] = _weight_adjoint(t[j], c_phi[j], c_d1[j], model.weights[j], model.nu, model.sigma2)
    out["betas"] = grad_k @ _BASIS_FLAT.T
    return out


def prior_precision_spectrum(model: FoeModel, h: int, w: int) -> np.ndarray:
    """Eigenvalues of ``(1/sigma2) sum_i K_i^T K_i`` on the ``h x w`` torus, ascending."""
    if h < KERNEL_SIZE or w < KERNEL_SIZE:
        raise ValueError("torus must be at least 5x5")
    filters = build_filters(model.betas)
    power = np.zeros((h, w))
    for k in filters:
        emb = np.zeros((h, w))
        for (da, db), tap in zip(kernel_offsets(KERNEL_SIZE), k.ravel()):
            emb[da % h, db % w] += tap
        power += np.abs(np.fft.fft2(emb)) ** 2
    return np.sort((power / model.sigma2).ravel())


def one_step_denoise(model: FoeModel, y, sigma: float) -> np.ndarray:
    """Empirical-Bayes one-step denoiser ``y - sigma**2 * grad E(y)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    y = _check_image(y)
    if sigma == 0:
        return y.copy()
    return y - sigma**2 * energy_grad(model, y)


def model_to_dict(model: FoeModel) -> dict:
    d = {
        "schema_version": model.schema_version,
        "nu": float(model.nu),
        "sigma2": float(model.sigma2),
        "n_components": int(model.n_components),
        "n_filters": int(model.n_filters),
        "basis": "dct5",
        "dc_free": bool(model.dc_free),
        "betas": [float(v) for v in model.betas.ravel()],
        "weights": [float(v) for v in model.weights.ravel()],
    }
    if model.lam is not None:
        d["lambda"] = float(model.lam)
    if model.anchor_mean is not None:
        d["anchor_mean"] = float(model.anchor_mean)
    return d


def model_from_dict(d: dict) -> FoeModel:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema_version {d.get('schema_version')!r}")
    if d.get("basis", "dct5") != "dct5":
        raise ValueError(f"unsupported basis {d['basis']!r}")
    o = int(d["n_filters"])
    k = int(d["n_components"])
    return FoeModel(
        betas=np.array(d["betas"], dtype=np.float64).reshape(o, KERNEL_SIZE**2),
        weights=np.array(d["weights"], dtype=np.float64).reshape(o, k),
        nu=float(d["nu"]),
        sigma2=float(d["sigma2"]),
        dc_free=bool(d["dc_free"]),
        lam=d.get("lambda"),
        anchor_mean=d.get("anchor_mean"),
    )


def save_model(model: FoeModel, path) -> None:
    # repr() of a float is the shortest string that round-trips bit-exactly
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path) -> FoeModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
