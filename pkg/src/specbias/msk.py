"""Modified spectrum kernels (MSKs).

A spectrum map ``g`` acts on the eigenvalues of a kernel matrix while keeping
its eigenvectors.  ``build_msk_matrix`` does this for a single matrix,
``msk_predict`` turns it into a kernel-regression predictor for test points
and ``msk_consistency_sweep`` measures how close the construction gets to the
exact modified kernel as the sample grows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import cell_rng, sample_sphere
from .errors import IllConditionedError, InputError, InvalidSpectrumMapError
from .kernels import Dataset, MercerCircle, kernel_cross, kernel_matrix, mercer_feature_matrix
from .linalg import SpectralDecomposition, eigh, frobenius_distance, sym

__all__ = [
    "SpectrumMap",
    "Identity",
    "FlattenTopK",
    "Shift",
    "Power",
    "Custom",
    "compose",
    "parse_spectrum_map",
    "modified_eigenvalues",
    "build_msk_matrix",
    "msk_predict",
    "msk_predict_many",
    "SweepRow",
    "msk_consistency_sweep",
]


# --------------------------------------------------------------------------
# spectrum maps
# --------------------------------------------------------------------------
class SpectrumMap:
    """Map from a descending eigenvalue array to modified eigenvalues."""

    name = "map"
    lipschitz_hint = 1.0
    monotone = True

    def apply(self, eigenvalues) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, eigenvalues):
        return self.apply(eigenvalues)

    def __repr__(self):
        return self.name


class Identity(SpectrumMap):
    name = "identity"

    def apply(self, eigenvalues):
        return np.array(eigenvalues, dtype=np.float64, copy=True)


@dataclass(frozen=True, repr=False)
class FlattenTopK(SpectrumMap):
    """Replace the top ``k`` eigenvalues by the ``(k+1)``-th one."""

    k: int
    lipschitz_hint: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise InputError(f"FlattenTopK needs k >= 1, got {self.k}")

    @property
    def name(self):
        return f"flatten{self.k}"

    def apply(self, eigenvalues):
        lam = np.array(eigenvalues, dtype=np.float64, copy=True)
        if self.k >= lam.shape[0]:
            raise InputError(f"FlattenTopK(k={self.k}) needs more than k eigenvalues, got {lam.shape[0]}")
        lam[: self.k] = lam[self.k]
        return lam


@dataclass(frozen=True, repr=False)
class Shift(SpectrumMap):
    """``lambda + gamma``."""

    gamma: float
    lipschitz_hint: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise InputError(f"Shift needs a positive offset, got {self.gamma}")

    @property
    def name(self):
        return f"shift{self.gamma:g}"

    def apply(self, eigenvalues):
        return np.asarray(eigenvalues, dtype=np.float64) + self.gamma


@dataclass(frozen=True, repr=False)
class Power(SpectrumMap):
    """``lambda ** alpha`` with ``alpha`` in (0, 1]."""

    alpha: float

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise InputError(f"Power exponent must lie in (0, 1], got {self.alpha}")

    @property
    def name(self):
        return f"power{self.alpha:g}"

    @property
    def lipschitz_hint(self):
        # Lipschitz only away from 0; callers apply it above an eigenvalue floor
        return float("inf") if self.alpha < 1 else 1.0

    def apply(self, eigenvalues):
        lam = np.asarray(eigenvalues, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            return np.power(lam, self.alpha)


@dataclass(frozen=True, repr=False)
class Custom(SpectrumMap):
    """Elementwise map from a callable, or a monotone table interpolated linearly."""

    func: Callable | None = None
    table: tuple | None = None
    label: str = "custom"
    lipschitz_hint: float = 1.0
    monotone: bool = True

    def __post_init__(self):
        if (self.func is None) == (self.table is None):
            raise InputError("Custom needs exactly one of func or table")
        if self.table is not None:
            xs, ys = (np.asarray(t, dtype=np.float64) for t in self.table)
            if xs.shape != ys.shape or xs.ndim != 1 or np.any(np.diff(xs) <= 0):
                raise InputError("Custom table needs strictly increasing x values and matching y values")

    @property
    def name(self):
        return self.label

    def apply(self, eigenvalues):
        lam = np.asarray(eigenvalues, dtype=np.float64)
        if self.func is not None:
            return np.broadcast_to(np.asarray(self.func(lam), dtype=np.float64), lam.shape).copy()
        xs, ys = self.table
        return np.interp(lam, xs, ys)


def compose(first: SpectrumMap, second: SpectrumMap) -> Custom:
    """``second o first``."""
    return Custom(
        func=lambda lam: second.apply(first.apply(lam)),
        label=f"{second.name}o{first.name}",
        monotone=first.monotone and second.monotone,
    )


def parse_spectrum_map(text: str) -> SpectrumMap:
    """Parse ``identity``, ``flatten:K``, ``shift:G``, ``power:A``."""
    text = text.strip().lower()
    name, _, arg = text.partition(":")
    if name in ("identity", "id"):
        return Identity()
    if name in ("flatten", "flattentopk") and arg:
        return FlattenTopK(int(arg))
    if name == "shift" and arg:
        return Shift(float(arg))
    if name == "power" and arg:
        return Power(float(arg))
    raise InputError(f"cannot parse spectrum map {text!r}")


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------
def modified_eigenvalues(eigenvalues, g: SpectrumMap, floor_rel: float = 1e-12) -> np.ndarray:
    """Apply ``g`` to the eigenvalues at or above ``floor_rel * lambda_max``.

    Eigenvalues under the floor are numerical noise for a PSD kernel matrix
    and pass through unchanged.
    """
    lam = np.asarray(eigenvalues, dtype=np.float64)
    floor = floor_rel * max(float(lam[0]), 0.0)
    keep = lam >= floor
    mapped = g.apply(lam)
    bad = keep & ~(np.isfinite(mapped) & (mapped >= 0))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise InvalidSpectrumMapError(
            f"spectrum map {g.name} sent eigenvalue {lam[i]:.6g} to {mapped[i]:.6g}"
        )
    return np.where(keep, mapped, lam)


def build_msk_matrix(K, g: SpectrumMap, floor_rel: float = 1e-12, decomp: SpectralDecomposition | None = None):
    """``V diag(g(lambda)) V^T`` from the eigendecomposition of ``K``."""
    if decomp is None:
        decomp = eigh(K)
    return decomp.reconstruct(modified_eigenvalues(decomp.eigenvalues, g, floor_rel))


def _joint_predict(lam, Q, y, g, gamma, floor_rel):
    """Prediction at the last point of one joint matrix ``Q diag(lam) Q^T``."""
    n = y.shape[0]
    mu = modified_eigenvalues(lam, g, floor_rel)
    if gamma == 0 and mu[-1] > floor_rel * mu[0] and mu[-1] > 0:
        # with M = K_g on all n+1 points and f, h the last column of M^{-1},
        # k_x^T (K_g[:n,:n])^{-1} y = -f[:n]^T y / h
        b = Q[n] / mu
        return -float((Q[:n] @ b) @ y) / float(Q[n] @ b)
    # a singular joint matrix (test point on top of a train point) can still
    # have an invertible train block, so check the block itself
    Kg = sym((Q * mu) @ Q.T)
    block = Kg[:n, :n] + gamma * np.eye(n)
    L = None
    if gamma > 0 or np.linalg.eigvalsh(block)[0] > floor_rel * max(mu[0], 0.0):
        try:
            L = np.linalg.cholesky(block)
        except np.linalg.LinAlgError:
            pass
    if L is None:
        lmin = float(np.linalg.eigvalsh(block)[0])
        raise IllConditionedError(
            f"modified train block is singular (smallest eigenvalue {lmin:.3e}); "
            "use gamma > 0 or a larger eigenvalue floor",
            smallest_eigenvalue=lmin,
        )
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, y))
    return float(Kg[n, :n] @ alpha)


def _batched_joint_predict(Ktr, Kx, kxx, y, maps, gamma, floor_rel):
    """Predictions for a batch of test points, one eigendecomposition per joint matrix."""
    B, n = Kx.shape
    J = np.empty((B, n + 1, n + 1))
    J[:, :n, :n] = Ktr
    J[:, n, :n] = Kx
    J[:, :n, n] = Kx
    J[:, n, n] = kxx
    lam, Q = np.linalg.eigh(J)
    lam = lam[:, ::-1]
    Q = Q[:, :, ::-1]
    out = np.empty((len(maps), B))
    for b in range(B):
        for j, g in enumerate(maps):
            out[j, b] = _joint_predict(lam[b], Q[b], y, g, gamma, floor_rel)
    return out


def msk_predict(
    spec,
    train: Dataset,
    test_points,
    g: SpectrumMap,
    gamma: float = 0.0,
    method: str = "joint",
    floor_rel: float = 1e-12,
    batch: int = 32,
) -> np.ndarray:
    """Kernel regression with the modified kernel ``k_g`` at each test point.

    ``method="joint"`` builds the modified matrix on the ``n+1`` points
    ``x_1..x_n, x`` for every test point (one ``O(n^3)`` eigendecomposition
    per point).  ``method="nystrom"`` is a cheaper approximation: it
    decomposes the train block once and extends eigenvectors to test points
    by Nystrom.  Both use the ``1/n`` kernel normalisation, so
    ``g = Identity`` gives plain kernel ridge regression.
    """
    return msk_predict_many(spec, train, test_points, [g], gamma, method, floor_rel, batch)[0]


def msk_predict_many(
    spec,
    train: Dataset,
    test_points,
    maps,
    gamma: float = 0.0,
    method: str = "joint",
    floor_rel: float = 1e-12,
    batch: int = 32,
) -> np.ndarray:
    """:func:`msk_predict` for several maps at once; returns ``len(maps) x n_test``.

    The joint eigendecompositions are shared between maps.
    """
    if gamma < 0:
        raise InputError(f"gamma must be nonnegative, got {gamma}")
    if train.labels is None:
        raise InputError("training dataset has no labels")
    maps = list(maps)
    y = train.labels
    n = train.n
    T = np.atleast_2d(np.asarray(test_points, dtype=np.float64))
    Ktr = kernel_matrix(spec, train, normalization="by_n")
    Kx = kernel_cross(spec, T, train.points, scale=1.0 / n)

    if method == "nystrom":
        dec = eigh(Ktr)
        lam = dec.eigenvalues
        keep = lam > floor_rel * max(lam[0], 0.0)
        V = dec.eigenvectors[:, keep]
        KxV = Kx @ V
        proj = V.T @ y
        out = np.empty((len(maps), T.shape[0]))
        for j, g in enumerate(maps):
            mu = modified_eigenvalues(lam, g, floor_rel)[keep]
            denom = mu + gamma
            if np.any(denom <= 0):
                raise IllConditionedError("modified train block is singular; use gamma > 0")
            out[j] = KxV @ ((mu / lam[keep]) * proj / denom)
        return out
    if method != "joint":
        raise InputError(f"unknown method {method!r}")

    kxx = np.array([kernel_cross(spec, t[None, :], t[None, :], scale=1.0 / n)[0, 0] for t in T])
    out = np.empty((len(maps), T.shape[0]))
    for s in range(0, T.shape[0], batch):
        e = min(s + batch, T.shape[0])
        out[:, s:e] = _batched_joint_predict(Ktr, Kx[s:e], kxx[s:e], y, maps, gamma, floor_rel)
    return out


# --------------------------------------------------------------------------
# consistency sweep
# --------------------------------------------------------------------------
@dataclass
class SweepRow:
    n: int
    mean_frobenius: float
    std: float
    distances: list = field(default_factory=list)


def exact_modified_matrix(spec: MercerCircle, X, g: SpectrumMap) -> np.ndarray:
    """``sum_k g(lambda_k) Phi_k(X) Phi_k(X)^T`` with ``1/sqrt(n)``-scaled features."""
    F = mercer_feature_matrix(spec, X)
    return sym((F * spec.g_spectrum(g)) @ F.T)


def msk_consistency_sweep(spec: MercerCircle, g: SpectrumMap, sizes, seeds, floor_rel: float = 1e-12):
    """Mean ``||K~_g - K_g||_F`` over seeds for each sample size."""
    if not isinstance(spec, MercerCircle):
        raise InputError("the consistency sweep needs a MercerCircle kernel (exact eigenfunctions)")
    rows = []
    for n in sizes:
        dists = []
        for seed in seeds:
            X = sample_sphere(2, int(n), rng=cell_rng(seed, "msk-sweep", n))
            K = kernel_matrix(spec, X, normalization="by_n")
            Kt = build_msk_matrix(K, g, floor_rel)
            dists.append(frobenius_distance(Kt, exact_modified_matrix(spec, X, g)))
        d = np.asarray(dists)
        rows.append(SweepRow(int(n), float(d.mean()), float(d.std()), dists))
    return rows
