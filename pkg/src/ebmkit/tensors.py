"""Dense image arithmetic shared by every other module.

Images are plain ``float64`` numpy arrays of shape ``(height, width)``; any
leading axes are treated as a batch.  Kernels are odd-sized square arrays
whose centre tap sits at ``(size // 2, size // 2)``.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "make_rng",
    "split_rng",
    "as_image",
    "conv2d_circular",
    "corr2d_circular",
    "kernel_offsets",
    "shift_stack",
    "unshift_sum",
    "dct_basis",
    "extract_patches",
    "psnr",
    "add_gaussian_noise",
]


def make_rng(seed: int | np.random.Generator | None = None) -> np.random.Generator:
    """Return a PCG64 generator; generators pass through untouched."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams, e.g. one per chain."""
    return rng.spawn(n)


def as_image(x) -> np.ndarray:
    img = np.asarray(x, dtype=np.float64)
    if img.ndim < 2:
        raise ValueError(f"expected an image with at least 2 dimensions, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite entries")
    return img


def _check_kernel(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got shape {k.shape}")
    if k.shape[0] > min(img.shape[-2:]):
        raise ValueError(f"kernel of size {k.shape[0]} is larger than image {img.shape[-2:]}")
    return k


def kernel_offsets(size: int) -> list[tuple[int, int]]:
    """Row-major list of tap offsets ``(a - c, b - c)`` for a ``size x size`` kernel."""
    c = size // 2
    return [(a - c, b - c) for a in range(size) for b in range(size)]


def shift_stack(img: np.ndarray, size: int = 5) -> np.ndarray:
    """Stack of circularly shifted copies, one per kernel tap.

    ``shift_stack(x)[..., q, :, :]`` holds ``x[(p - offset_q) mod shape]`` so that
    convolution with taps ``k`` is ``tensordot(k.ravel(), stack)``.  Works for any
    torus size, including images smaller than the kernel.
    """
    offsets = kernel_offsets(size)
    out = np.empty(img.shape[:-2] + (len(offsets),) + img.shape[-2:])
    for q, (da, db) in enumerate(offsets):
        out[..., q, :, :] = np.roll(img, (da, db), axis=(-2, -1))
    return out


def unshift_sum(stack: np.ndarray, size: int = 5) -> np.ndarray:
    """Adjoint of :func:`shift_stack`: roll every slice back and sum over taps."""
    offsets = kernel_offsets(size)
    out = np.zeros(stack.shape[:-3] + stack.shape[-2:])
    for q, (da, db) in enumerate(offsets):
        out += np.roll(stack[..., q, :, :], (-da, -db), axis=(-2, -1))
    return out


def conv2d_circular(img, k) -> np.ndarray:
    """Circular convolution with a centred kernel.

    ``out[p] = sum_q k[q] * img[(p - q) mod shape]`` where ``q`` runs over tap
    offsets relative to the kernel centre.
    """
    img = as_image(img)
    k = _check_kernel(img, k)
    out = np.zeros_like(img)
    for (da, db), tap in zip(kernel_offsets(k.shape[0]), k.ravel()):
        if tap != 0.0:
            out += tap * np.roll(img, (da, db), axis=(-2, -1))
    return out


def corr2d_circular(img, k) -> np.ndarray:
    """Circular correlation, the exact adjoint of :func:`conv2d_circular`."""
    img = as_image(img)
    k = _check_kernel(img, k)
    out = np.zeros_like(img)
    for (da, db), tap in zip(kernel_offsets(k.shape[0]), k.ravel()):
        if tap != 0.0:
            out += tap * np.roll(img, (-da, -db), axis=(-2, -1))
    return out


def dct_basis(size: int = 5) -> np.ndarray:
    """Orthonormal 2-D DCT-II basis kernels, shape ``(size**2, size, size)``.

    Index 0 is the constant kernel; kernels are ordered row-major over the
    (vertical, horizontal) frequency pair.
    """
    n = np.arange(size)
    c = np.cos(np.pi * (n[None, :] + 0.5) * n[:, None] / size)  # (freq, position)
    c *= np.sqrt(2.0 / size)
    c[0] /= np.sqrt(2.0)
    basis = np.einsum("ua,vb->uvab", c, c).reshape(size * size, size, size)
    return basis


def extract_patches(images, size: int, stride: int, rng: np.random.Generator, count: int) -> list[np.ndarray]:
    """Draw ``count`` windows uniformly, with replacement, from all stride-aligned positions."""
    images = [as_image(im) for im in images]
    if not images:
        raise ValueError("image list is empty")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    windows = []
    for idx, im in enumerate(images):
        h, w = im.shape
        if size > h or size > w:
            raise ValueError(f"patch size {size} exceeds image {idx} of shape {im.shape}")
        nr = (h - size) // stride + 1
        nc = (w - size) // stride + 1
        windows.append((idx, nr, nc))
    totals = np.array([nr * nc for _, nr, nc in windows])
    cum = np.concatenate([[0], np.cumsum(totals)])
    picks = rng.integers(0, cum[-1], size=count)
    out = []
    for pick in picks:
        idx = int(np.searchsorted(cum, pick, side="right") - 1)
        local = int(pick - cum[idx])
        _, nr, nc = windows[idx]
        r, c = divmod(local, nc)
        r *= stride
        c *= stride
        out.append(images[idx][r:r + size, c:c + size].copy())
    return out


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def add_gaussian_noise(img, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    return img + sigma * rng.standard_normal(img.shape)
