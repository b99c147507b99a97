"""Base kernels and kernel-matrix assembly.

Four kernels are provided:

* :class:`Laplace` and :class:`Gaussian` on arbitrary Euclidean inputs;
* :class:`NtkRelu`, the infinite-width neural tangent kernel of the ReLU
  network in :mod:`specbias.network` (arc-cosine closed form);
* :class:`MercerCircle`, a finite Fourier series on the unit circle whose
  Mercer eigenpairs are known exactly.

The pairwise loops have numba and numpy implementations (see
:mod:`specbias._accel`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import _accel
from .errors import InputError
from .linalg import sym

__all__ = [
    "Laplace",
    "Gaussian",
    "NtkRelu",
    "MercerCircle",
    "KernelSpec",
    "Dataset",
    "kernel_eval",
    "kernel_matrix",
    "kernel_cross",
    "mercer_feature_matrix",
    "circle_angles",
]

SPHERE_TOL = 1e-6


# --------------------------------------------------------------------------
# kernel specifications
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class Laplace:
    """``exp(-||x - z|| / bandwidth)``."""

    bandwidth: float = 1.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise InputError(f"bandwidth must be positive, got {self.bandwidth}")


@dataclass(frozen=True)
class Gaussian:
    """``exp(-||x - z||^2 / (2 bandwidth^2))``."""

    bandwidth: float = 1.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise InputError(f"bandwidth must be positive, got {self.bandwidth}")


@dataclass(frozen=True)
class NtkRelu:
    """Analytic NTK of a depth-``depth`` ReLU MLP on the unit sphere.

    ``bias_scale`` is the hidden-layer bias multiplier beta and
    ``readout_scale`` the output-layer initial variance nu of the matching
    network.  With ``bias_scale=0`` and ``readout_scale=2`` this is the usual
    depth recursion ``Theta = Sigma^L + sum_l Sigma^{l-1} prod_{l'>=l} dSigma^{l'}``.
    """

    depth: int = 2
    bias_scale: float = 0.0
    readout_scale: float = 2.0

    def __post_init__(self):
        if self.depth < 1:
            raise InputError(f"depth must be >= 1, got {self.depth}")
        if self.bias_scale < 0:
            raise InputError(f"bias_scale must be nonnegative, got {self.bias_scale}")
        if not self.readout_scale > 0:
            raise InputError(f"readout_scale must be positive, got {self.readout_scale}")


@dataclass(frozen=True)
class MercerCircle:
    """``k(x, z) = sum_j lambda_j Phi_j(x) Phi_j(z)`` on the unit circle.

    The basis is ``1, sqrt2 cos(theta), sqrt2 sin(theta), sqrt2 cos(2 theta), ...``
    (orthonormal under the uniform probability measure) and ``eigenvalues``
    follows that order, so it has length ``2R + 1``.
    """

    eigenvalues: tuple = field(default=None)

    def __post_init__(self):
        lam = self.eigenvalues
        if lam is None:
            lam = MercerCircle.paired_spectrum(32)
        lam = tuple(float(v) for v in lam)
        if len(lam) % 2 != 1:
            raise InputError(f"need 2R+1 eigenvalues, got {len(lam)}")
        if not all(v > 0 and math.isfinite(v) for v in lam):
            raise InputError("MercerCircle eigenvalues must be positive and finite")
        object.__setattr__(self, "eigenvalues", lam)

    @property
    def truncation(self) -> int:
        return (len(self.eigenvalues) - 1) // 2

    @staticmethod
    def paired_spectrum(R: int, decay: float = 4.0, constant: float = 1.0) -> tuple:
        """``constant`` for frequency 0 and ``k^-decay`` for both cos and sin at frequency k."""
        lam = [constant]
        for k in range(1, R + 1):
            lam += [k ** -decay, k ** -decay]
        return tuple(lam)

    @classmethod
    def default(cls, R: int = 32, decay: float = 4.0) -> "MercerCircle":
        return cls(cls.paired_spectrum(R, decay))

    def g_spectrum(self, g) -> np.ndarray:
        """Exact operator eigenvalues of the modified-spectrum kernel ``k_g``."""
        return np.asarray(g.apply(np.asarray(self.eigenvalues)), dtype=np.float64)


KernelSpec = Union[Laplace, Gaussian, NtkRelu, MercerCircle]


@dataclass
class Dataset:
    points: np.ndarray
    labels: np.ndarray | None = None
    generator: str = "manual"
    seed: int | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if not np.all(np.isfinite(self.points)):
            raise InputError("dataset points must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
            if self.labels.shape[0] != self.points.shape[0]:
                raise InputError(
                    f"{self.labels.shape[0]} labels for {self.points.shape[0]} points"
                )

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


# --------------------------------------------------------------------------
# pairwise kernels: numba loops and numpy twins
# --------------------------------------------------------------------------
@_accel.njit
def _sqdist_nb(A, B):
    n, m, d = A.shape[0], B.shape[0], A.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                t = A[i, k] - B[j, k]
                s += t * t
            out[i, j] = s
    return out


def _sqdist_np(A, B):
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


@_accel.njit
def _laplace_nb(A, B, bandwidth):
    D = _sqdist_nb(A, B)
    n, m = D.shape
    for i in range(n):
        for j in range(m):
            D[i, j] = math.exp(-math.sqrt(D[i, j]) / bandwidth)
    return D


def _laplace_np(A, B, bandwidth):
    return np.exp(-np.sqrt(_sqdist_np(A, B)) / bandwidth)


@_accel.njit
def _gaussian_nb(A, B, bandwidth):
    D = _sqdist_nb(A, B)
    n, m = D.shape
    s = 2.0 * bandwidth * bandwidth
    for i in range(n):
        for j in range(m):
            D[i, j] = math.exp(-D[i, j] / s)
    return D


def _gaussian_np(A, B, bandwidth):
    return np.exp(-_sqdist_np(A, B) / (2.0 * bandwidth * bandwidth))


@_accel.njit
def _dot_nb(A, B):
    n, m, d = A.shape[0], B.shape[0], A.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                s += A[i, k] * B[j, k]
            out[i, j] = s
    return out


@_accel.njit
def _ntk_relu_nb(A, B, depth, beta2, in_scale, readout_ratio):
    G = _dot_nb(A, B)
    na = np.empty(A.shape[0])
    nb = np.empty(B.shape[0])
    for i in range(A.shape[0]):
        s = 0.0
        for k in range(A.shape[1]):
            s += A[i, k] * A[i, k]
        na[i] = s
    for j in range(B.shape[0]):
        s = 0.0
        for k in range(B.shape[1]):
            s += B[j, k] * B[j, k]
        nb[j] = s
    out = np.empty(G.shape)
    for i in range(G.shape[0]):
        for j in range(G.shape[1]):
            a = in_scale * na[i] + beta2
            b = in_scale * nb[j] + beta2
            c = in_scale * G[i, j] + beta2
            hidden = 0.0
            for _ in range(depth):
                ab = math.sqrt(a * b)
                cos_t = c / ab if ab > 0.0 else 1.0
                if cos_t > 1.0:
                    cos_t = 1.0
                elif cos_t < -1.0:
                    cos_t = -1.0
                phi = math.acos(cos_t)
                dot = (math.pi - phi) / math.pi
                hidden = (hidden + c) * dot
                c = ab * (math.sin(phi) + (math.pi - phi) * cos_t) / math.pi + beta2
                # diagonal entries have phi = 0; repeat the off-diagonal float ops
                # so that c == a stays exact when x == z
                a = a * math.pi / math.pi + beta2
                b = b * math.pi / math.pi + beta2
            out[i, j] = (c - beta2) + readout_ratio * hidden
    return out


def _ntk_relu_np(A, B, depth, beta2, in_scale, readout_ratio):
    # same reduction for G and the norms, so G[i, i] == |a_i|^2 bit for bit
    G = (A[:, None, :] * B[None, :, :]).sum(axis=-1)
    a = in_scale * (A * A).sum(axis=1)[:, None] + beta2
    b = in_scale * (B * B).sum(axis=1)[None, :] + beta2
    c = in_scale * G + beta2
    hidden = np.zeros_like(c)
    for _ in range(depth):
        ab = np.sqrt(a * b)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos_t = np.where(ab > 0, c / ab, 1.0)
        cos_t = np.clip(cos_t, -1.0, 1.0)
        phi = np.arccos(cos_t)
        dot = (np.pi - phi) / np.pi
        hidden = (hidden + c) * dot
        c = ab * (np.sin(phi) + (np.pi - phi) * cos_t) / np.pi + beta2
        a = a * np.pi / np.pi + beta2
        b = b * np.pi / np.pi + beta2
    return (c - beta2) + readout_ratio * hidden


def circle_angles(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return np.arctan2(points[:, 1], points[:, 0])


def _circle_features(points, R) -> np.ndarray:
    """Unscaled basis evaluations, shape (n, 2R+1)."""
    theta = circle_angles(points)
    F = np.empty((theta.shape[0], 2 * R + 1))
    F[:, 0] = 1.0
    if R:
        k = np.arange(1, R + 1)
        kt = np.outer(theta, k)
        F[:, 1::2] = math.sqrt(2.0) * np.cos(kt)
        F[:, 2::2] = math.sqrt(2.0) * np.sin(kt)
    return F


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------
def _as_points(X) -> np.ndarray:
    if isinstance(X, Dataset):
        return X.points
    P = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if not np.all(np.isfinite(P)):
        raise InputError("points must be finite")
    return P


def _check_sphere(P, what):
    norms = np.linalg.norm(P, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > SPHERE_TOL)
    if bad.size:
        i = int(bad[0])
        raise InputError(
            f"{what}: point {i} has norm {norms[i]:.8f}; this kernel needs unit-sphere inputs"
        )


def _cross(spec, A, B, what=("rows", "cols")):
    if A.shape[1] != B.shape[1]:
        raise InputError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    A = np.ascontiguousarray(A)
    B = np.ascontiguousarray(B)
    if isinstance(spec, Laplace):
        return _accel.dispatch(_laplace_nb, _laplace_np)(A, B, float(spec.bandwidth))
    if isinstance(spec, Gaussian):
        return _accel.dispatch(_gaussian_nb, _gaussian_np)(A, B, float(spec.bandwidth))
    if isinstance(spec, NtkRelu):
        _check_sphere(A, what[0])
        _check_sphere(B, what[1])
        d = A.shape[1]
        return _accel.dispatch(_ntk_relu_nb, _ntk_relu_np)(
            A, B, int(spec.depth), float(spec.bias_scale) ** 2, 2.0 / d, spec.readout_scale / 2.0
        )
    if isinstance(spec, MercerCircle):
        if A.shape[1] != 2:
            raise InputError("MercerCircle needs points in R^2")
        _check_sphere(A, what[0])
        _check_sphere(B, what[1])
        R = spec.truncation
        lam = np.asarray(spec.eigenvalues)
        FA = _circle_features(A, R)
        FB = FA if B is A else _circle_features(B, R)
        return (FA * lam) @ FB.T
    raise InputError(f"unknown kernel spec {spec!r}")


def kernel_eval(spec: KernelSpec, x, z) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    return float(_cross(spec, x, z, what=("x", "z"))[0, 0])


def kernel_matrix(spec: KernelSpec, X, normalization: str = "none") -> np.ndarray:
    """Symmetric Gram matrix ``K_ij = k(x_i, x_j)`` (divided by n for ``"by_n"``)."""
    P = _as_points(X)
    if P.shape[0] < 1:
        raise InputError("need at least one point")
    if normalization not in ("none", "by_n"):
        raise InputError(f"normalization must be 'none' or 'by_n', got {normalization!r}")
    K = _cross(spec, P, P, what=("X", "X"))
    K = sym(K)
    if normalization == "by_n":
        K /= P.shape[0]
    return K


def kernel_cross(spec: KernelSpec, A, B, scale: float = 1.0) -> np.ndarray:
    """Rectangular kernel block ``scale * k(a_i, b_j)``."""
    return scale * _cross(spec, _as_points(A), _as_points(B), what=("A", "B"))


def mercer_feature_matrix(spec: MercerCircle, X) -> np.ndarray:
    """Basis functions on the data, each column scaled by ``1/sqrt(n)``.

    With ``F = mercer_feature_matrix(spec, X)`` the raw Gram matrix of a
    modified spectrum ``g`` is exactly ``n * F diag(g(lambda)) F^T``.
    """
    if not isinstance(spec, MercerCircle):
        raise InputError("mercer_feature_matrix needs a MercerCircle spec")
    P = _as_points(X)
    if P.shape[1] != 2:
        raise InputError("MercerCircle needs points in R^2")
    _check_sphere(P, "X")
    return _circle_features(P, spec.truncation) / math.sqrt(P.shape[0])
