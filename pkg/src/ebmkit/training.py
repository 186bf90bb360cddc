"""Parameter estimation for FoE priors: denoising score matching and bilevel learning.

Both trainers run Adam with separate learning rates for the filter
coefficients and the potential weights.  Weights are only clipped to the
positivity floor after each step; they are not renormalized.
"""

from __future__ import annotations

import configparser
import math
import warnings
from dataclasses import dataclass, fields
from typing import Callable, NamedTuple

import numpy as np

from .foe import WEIGHT_FLOOR, FoeModel, energy_grad, energy_hvp, energy_value_grad, grid_means, param_grad
from .imageio import write_csv
from .optimize import Adam, ApgdConfig, apgd, conjugate_gradient, prox_zero
from .tensors import extract_patches, make_rng, psnr

__all__ = [
    "DsmConfig",
    "BilevelConfig",
    "BilevelResult",
    "project_simplex",
    "init_model",
    "dsm_loss_grad",
    "train_dsm",
    "implicit_gradient",
    "lower_solve",
    "bilevel_loss_grad",
    "train_bilevel",
    "read_config",
]

NU = 0.8
N_COMPONENTS = 123
N_FILTERS = 24


def _check_positive(obj, names):
    for n in names:
        v = getattr(obj, n)
        if not v > 0:
            raise ValueError(f"{n} must be positive, got {v}")


@dataclass
class DsmConfig:
    noise_sigma: float = 2e-2
    batch_size: int = 16
    n_steps: int = 1000
    lr_weights: float = 1e-5
    lr_betas: float = 2e-4
    patch_size: int = 96
    seed: int = 0
    n_filters: int = N_FILTERS
    n_components: int = N_COMPONENTS

    def __post_init__(self):
        _check_positive(self, ["noise_sigma", "batch_size", "lr_weights", "lr_betas", "patch_size",
                               "n_filters", "n_components"])
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")


@dataclass
class BilevelConfig:
    # variance of the lower-level denoising problem (noise std 0.1)
    lower_noise_var: float = 0.01
    batch_size: int = 4
    n_steps: int = 500
    lr_weights: float = 1e-5
    lr_betas: float = 5e-4
    lr_lambda: float = 1e-4
    lambda_init: float = 1.0 / 25.0
    apgd_rtol: float = 1e-10
    apgd_max_iters: int = 2000
    cg_iters: int = 200
    cg_tol: float = 1e-8
    patch_size: int = 96
    seed: int = 0
    n_filters: int = N_FILTERS
    n_components: int = N_COMPONENTS

    def __post_init__(self):
        _check_positive(self, ["lower_noise_var", "batch_size", "lr_weights", "lr_betas", "lr_lambda",
                               "lambda_init", "apgd_rtol", "apgd_max_iters", "cg_iters", "cg_tol",
                               "patch_size", "n_filters", "n_components"])
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")

    def apgd_config(self) -> ApgdConfig:
        return ApgdConfig(max_iters=self.apgd_max_iters, lipschitz0=1.0 / self.lower_noise_var, rtol=self.apgd_rtol)


def read_config(path, cls):
    """Build ``cls`` from a flat ``key = value`` file.

    Unknown keys raise ``ValueError``; values are converted to the type of
    the dataclass default.
    """
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string("[_]\n" + text)
    known = {f.name: f for f in fields(cls)}
    kw = {}
    for key, raw in cp["_"].items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        default = known[key].default
        try:
            kw[key] = int(raw) if isinstance(default, int) else float(raw)
        except ValueError:
            raise ValueError(f"bad value for {key}: {raw!r}") from None
    return cls(**kw)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{u >= 0, sum(u) = 1}`` (sorted-threshold algorithm)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0 or not np.all(np.isfinite(v)):
        raise ValueError("need a finite non-empty vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def init_model(kind: str, rng, n_filters: int = N_FILTERS, n_components: int = N_COMPONENTS,
               nu: float = NU) -> FoeModel:
    """Initial DC-free model for ``kind`` in ``{"score_matching", "bilevel"}``."""
    if kind not in ("score_matching", "bilevel"):
        raise ValueError(f"unknown model kind {kind!r}")
    rng = make_rng(rng)
    sigma2 = 2 * nu / (n_components - 1)
    gamma = 2.5
    if kind == "bilevel":
        sigma2 *= 1.5
        gamma = 1.5
    mu = grid_means(nu, n_components)
    w = project_simplex(-np.log(np.abs(mu) + 0.001) / 10000)
    weights = np.tile(np.maximum(w, WEIGHT_FLOOR), (n_filters, 1))
    betas = gamma / n_filters * rng.standard_normal((n_filters, 25))
    betas[:, 0] = 0.0
    return FoeModel(betas, weights, nu, sigma2, dc_free=True, lam=(1.0 / 25.0 if kind == "bilevel" else None))


def _stack(batch) -> np.ndarray:
    if len(batch) == 0:
        raise ValueError("empty batch")
    arrs = [np.asarray(b, dtype=np.float64) for b in batch]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ValueError("batch images must share one shape")
    return np.stack(arrs)


def _mask_dc(model: FoeModel, grads: dict) -> dict:
    if model.dc_free:
        grads["betas"][:, 0] = 0.0
    return grads


def dsm_loss_grad(model: FoeModel, batch, sigma: float, rng=None, noise=None):
    """Denoising score-matching loss ``mean_b ||sigma grad E(x_b + sigma n_b) - n_b||^2`` and its gradient.

    One noise image per patch is drawn from ``rng`` unless ``noise`` is given.
    Returns ``(loss, {"betas", "weights"})``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    x = _stack(batch)
    if noise is None:
        noise = make_rng(rng).standard_normal(x.shape)
    else:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != x.shape:
            raise ValueError(f"noise shape {noise.shape} does not match batch {x.shape}")
    B = x.shape[0]
    xt = x + sigma * noise
    r = sigma * energy_grad(model, xt) - noise
    loss = float(np.sum(r * r)) / B
    grads = param_grad(model, xt, upstream_scalar=0.0, upstream_image=2 * sigma * r / B)
    return loss, _mask_dc(model, grads)


def _clip_weights(model: FoeModel, weights: np.ndarray) -> np.ndarray:
    w = np.maximum(weights, WEIGHT_FLOOR)
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("non-finite potential weights")
    return w


def _sample_batch(images, size: int, count: int, rng) -> list[np.ndarray]:
    size = min(size, *(min(im.shape) for im in images))
    return extract_patches(images, size, 1, rng, count)


def _paired_patches(clean, noisy, size: int, count: int, rng) -> np.ndarray:
    """``(count, 2, size, size)`` windows cut at the same place from clean and noisy images."""
    out = np.empty((count, 2, size, size))
    for b in range(count):
        i = int(rng.integers(len(clean)))
        h, w = clean[i].shape
        r, c = int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1))
        out[b, 0] = clean[i][r:r + size, c:c + size]
        out[b, 1] = noisy[i][r:r + size, c:c + size]
    return out


def train_dsm(dataset, cfg: DsmConfig | None = None, model: FoeModel | None = None,
              trace_path=None, callback: Callable | None = None) -> FoeModel:
    """Score-matching training; deterministic given ``cfg.seed``.

    Patches are redrawn every step (clipped to the smallest image) with fresh
    noise.  ``callback(step, model, loss)`` runs after each update.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    cfg = cfg or DsmConfig()
    rng_init, rng_patch, rng_noise = (make_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3))
    if model is None:
        model = init_model("score_matching", rng_init, cfg.n_filters, cfg.n_components)
    model = model.copy()
    opt = Adam({"weights": cfg.lr_weights, "betas": cfg.lr_betas})
    rows = []
    for step in range(1, cfg.n_steps + 1):
        batch = _sample_batch(dataset, cfg.patch_size, cfg.batch_size, rng_patch)
        loss, g = dsm_loss_grad(model, batch, cfg.noise_sigma, rng_noise)
        new = opt.step({"weights": model.weights, "betas": model.betas}, g)
        model.weights = _clip_weights(model, new["weights"])
        model.betas = new["betas"]
        if not np.all(np.isfinite(model.betas)):
            raise FloatingPointError(f"non-finite filter coefficients at step {step}")
        rows.append((step, loss, np.linalg.norm(g["weights"]), np.linalg.norm(g["betas"])))
        if callback is not None:
            callback(step, model, loss)
    if trace_path is not None:
        write_csv(trace_path, ["step", "loss", "grad_norm_weights", "grad_norm_betas"], rows)
    return model


class BilevelResult(NamedTuple):
    loss: float
    grads: dict  # "betas", "weights", "lam" (derivative in lambda, not log lambda)
    x_star: np.ndarray
    cg_converged: bool
    lower_iters: int


def implicit_gradient(hvp: Callable, grad_x_loss, mixed_adjoint: Callable, cg_iters: int = 200,
                      cg_tol: float = 1e-8):
    """``-(d_theta d_x J)^T H^{-1} grad_x L`` for a lower problem ``min_x J(x, theta)``.

    ``hvp`` applies the lower Hessian ``H``, ``mixed_adjoint(u)`` returns
    ``(d_theta d_x J)^T u``.  Returns ``(gradient, CGResult)``.
    """
    b = np.asarray(grad_x_loss, dtype=np.float64)
    cg = conjugate_gradient(hvp, b, cg_iters, cg_tol * max(1.0, float(np.linalg.norm(b))))
    g = mixed_adjoint(cg.x)
    if isinstance(g, dict):
        g = {k: -v for k, v in g.items()}
    else:
        g = -g
    return g, cg


def lower_solve(model: FoeModel, lam: float, y, noise_var: float, cfg: ApgdConfig | None = None, x0=None):
    """Minimizer of ``||x - y||^2 / (2 noise_var) + lam E(x)`` by APGD, warm-started at ``y``."""
    y = np.asarray(y, dtype=np.float64)

    def f(x):
        e, g = energy_value_grad(model, x)
        d = x - y
        return float(np.sum(d * d)) / (2 * noise_var) + lam * float(np.sum(e)), d / noise_var + lam * g

    cfg = cfg or ApgdConfig(max_iters=2000, lipschitz0=1.0 / noise_var, rtol=1e-10)
    return apgd(f, prox_zero, y.copy() if x0 is None else x0, cfg)


def bilevel_loss_grad(model: FoeModel, lam: float, pair, cfg: BilevelConfig | None = None) -> BilevelResult:
    """Upper loss ``||x* - x_clean||^2 / 2`` and its implicit gradient.

    ``pair`` is ``(y, x_clean)``; either entry may carry a leading batch axis,
    in which case the loss and gradients are summed over the batch.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    cfg = cfg or BilevelConfig()
    y, x_clean = (np.asarray(a, dtype=np.float64) for a in pair)
    if y.shape != x_clean.shape:
        raise ValueError("noisy and clean images differ in shape")
    nv = cfg.lower_noise_var
    res = lower_solve(model, lam, y, nv, cfg.apgd_config())
    x_star = res.x
    d = x_star - x_clean
    loss = 0.5 * float(np.sum(d * d))

    def hvp(v):
        return v / nv + lam * energy_hvp(model, x_star, v)

    def mixed(u):
        g = param_grad(model, x_star, upstream_scalar=0.0, upstream_image=u)
        g = {k: lam * v for k, v in g.items()}
        g["lam"] = float(np.sum(energy_grad(model, x_star) * u))
        return g

    grads, cg = implicit_gradient(hvp, d, mixed, cfg.cg_iters, cfg.cg_tol)
    _mask_dc(model, grads)
    if not cg.converged:
        warnings.warn(f"CG stopped at residual {cg.residual:.3g} after {cg.iters} iterations", RuntimeWarning,
                      stacklevel=2)
    return BilevelResult(loss, grads, x_star, cg.converged, res.iters)


def train_bilevel(dataset, cfg: BilevelConfig | None = None, model: FoeModel | None = None,
                  trace_path=None, callback: Callable | None = None) -> FoeModel:
    """Bilevel training over clean images; the learned lambda is stored on the model.

    Noisy inputs are built once per image from ``cfg.seed`` (noise std
    ``sqrt(lower_noise_var)``) and patches are cut at the same location from
    both.  Adam runs on ``(weights, betas, log lambda)``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    cfg = cfg or BilevelConfig()
    rng_init, rng_patch, rng_noise = (make_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3))
    if model is None:
        model = init_model("bilevel", rng_init, cfg.n_filters, cfg.n_components)
    model = model.copy()
    log_lam = math.log(model.lam if model.lam is not None else cfg.lambda_init)
    clean = [np.asarray(im, dtype=np.float64) for im in dataset]
    noisy = [im + math.sqrt(cfg.lower_noise_var) * rng_noise.standard_normal(im.shape) for im in clean]
    size = min(cfg.patch_size, *(min(im.shape) for im in clean))
    opt = Adam({"weights": cfg.lr_weights, "betas": cfg.lr_betas, "log_lam": cfg.lr_lambda})
    rows = []
    for step in range(1, cfg.n_steps + 1):
        patches = _paired_patches(clean, noisy, size, cfg.batch_size, rng_patch)
        lam = math.exp(log_lam)
        r = bilevel_loss_grad(model, lam, (patches[:, 1], patches[:, 0]), cfg)
        B = patches.shape[0]
        g = {"weights": r.grads["weights"] / B, "betas": r.grads["betas"] / B,
             "log_lam": np.array(r.grads["lam"] * lam / B)}
        new = opt.step({"weights": model.weights, "betas": model.betas, "log_lam": np.array(log_lam)}, g)
        model.weights = _clip_weights(model, new["weights"])
        model.betas = new["betas"]
        log_lam = float(new["log_lam"])
        if not (np.all(np.isfinite(model.betas)) and math.isfinite(log_lam)):
            raise FloatingPointError(f"non-finite parameters at step {step}")
        model.lam = math.exp(log_lam)
        rows.append((step, r.loss / B, np.linalg.norm(g["weights"]), np.linalg.norm(g["betas"]), model.lam))
        if callback is not None:
            callback(step, model, r.loss / B)
    model.lam = math.exp(log_lam)
    if trace_path is not None:
        write_csv(trace_path, ["step", "loss", "grad_norm_weights", "grad_norm_betas", "lambda"], rows)
    return model


def denoise_psnr(model: FoeModel, pairs, noise_var: float, lam: float | None = None) -> float:
    """Mean PSNR of lower-level reconstructions over ``(y, x_clean)`` pairs."""
    lam = model.lam if lam is None else lam
    vals = [psnr(lower_solve(model, lam, y, noise_var).x, x) for y, x in pairs]
    return float(np.mean(vals))
