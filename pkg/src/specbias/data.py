"""Dataset generators and per-cell random streams."""
from __future__ import annotations

import hashlib

import numpy as np

from .errors import InputError
from .kernels import Dataset, circle_angles


def cell_rng(seed: int, *key) -> np.random.Generator:
    """Independent generator for ``(seed, key...)``, stable across processes and platforms."""
    text = ":".join([str(int(seed))] + [str(k) for k in key])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    words = np.frombuffer(digest, dtype="<u4")
    return np.random.default_rng(np.random.SeedSequence([int(w) for w in words]))


def sample_sphere(d: int, n: int, seed=0, rng: np.random.Generator | None = None) -> Dataset:
    """``n`` i.i.d. uniform points on the unit sphere in R^d (normalised Gaussians)."""
    if d < 2:
        raise InputError(f"sphere dimension d must be >= 2, got {d}")
    if n < 1:
        raise InputError(f"need n >= 1 points, got {n}")
    if rng is None:
        rng = cell_rng(seed, "sphere", d, n)
    Z = rng.standard_normal((n, d))
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    # a zero draw has probability 0; redraw to be safe
    while np.any(norms == 0):
        bad = (norms[:, 0] == 0)
        Z[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(Z, axis=1, keepdims=True)
    return Dataset(Z / norms, None, generator=f"sphere(d={d})", seed=seed)


def circle_grid(n: int, offset: float = 0.0) -> Dataset:
    theta = offset + 2 * np.pi * np.arange(n) / n
    return Dataset(np.column_stack([np.cos(theta), np.sin(theta)]), None, generator="circle_grid")


def fourier_labels(X, k: int) -> np.ndarray:
    """``sin(k * theta)`` for points ``(cos theta, sin theta)`` on the circle."""
    P = X.points if isinstance(X, Dataset) else np.atleast_2d(np.asarray(X, dtype=np.float64))
    if P.shape[1] != 2:
        raise InputError(f"Fourier labels need points on S^1 (d=2), got d={P.shape[1]}")
    norms = np.linalg.norm(P, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise InputError("Fourier labels need unit-norm points")
    return np.sin(k * circle_angles(P))
