"""Kernel ridge regression and its preconditioned variant.

Plain KRR uses the ``1/n``-normalised kernel matrix: ``alpha = (K + gamma I)^{-1} y``
and ``f(x) = (1/n) sum_i k(x, x_i) alpha_i``.

With a preconditioner ``S`` the loss ``0.5 ||S^{1/2}(Phi w - y)||^2 + 0.5 gamma ||w||^2``
over a linear model ``h(x, w) = <w, phi(x)>`` has minimiser ``w = Phi^T alpha``
with ``alpha = (K + gamma S^{-1})^{-1} y`` and ``K = Phi Phi^T``.  As
``gamma -> 0`` the predictions stop depending on ``S``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, IllConditionedError, InputError
from .kernels import Dataset, kernel_cross, kernel_matrix
from .linalg import eigh, solve_spd, sym
from .network import MlpConfig, empirical_ntk, forward, init
from .precond import Preconditioner, pgd_train

__all__ = [
    "KrrModel",
    "krr_fit",
    "pkrr_closed_form",
    "pkrr_predict",
    "linear_model_pgd",
    "ConsistencyResult",
    "consistency_check",
    "consistency_width_sweep",
]


@dataclass(frozen=True)
class KrrModel:
    spec: object
    train: Dataset
    gamma: float
    alpha: np.ndarray

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return kernel_cross(self.spec, X, self.train.points, scale=1.0 / self.train.n) @ self.alpha


def krr_fit(spec, train: Dataset, gamma: float, floor_rel: float = 1e-12) -> KrrModel:
    """Fit ``alpha = (K + gamma I)^{-1} y`` on the ``1/n``-normalised kernel matrix.

    ``gamma = 0`` is solved through the eigendecomposition and refuses
    matrices with an eigenvalue at or below ``floor_rel * lambda_max``.
    """
    if gamma < 0:
        raise InputError(f"gamma must be nonnegative, got {gamma}")
    if train.labels is None:
        raise InputError("training dataset has no labels")
    K = kernel_matrix(spec, train, normalization="by_n")
    y = train.labels
    if gamma > 0:
        alpha = solve_spd(K, y, ridge=gamma)
    else:
        dec = eigh(K)
        lam = dec.eigenvalues
        floor = floor_rel * max(lam[0], 0.0)
        if lam[-1] <= floor:
            raise IllConditionedError(
                f"kernel matrix is singular at gamma=0 (smallest eigenvalue {lam[-1]:.3e}); use gamma > 0",
                smallest_eigenvalue=float(lam[-1]),
            )
        V = dec.eigenvectors
        alpha = V @ ((V.T @ y) / lam)
    return KrrModel(spec, train, float(gamma), alpha)


def pkrr_closed_form(K0, S: Preconditioner, gamma: float, y) -> np.ndarray:
    """``alpha* = (K0 + gamma S^{-1})^{-1} y``."""
    if not gamma > 0:
        raise InputError(f"gamma must be positive, got {gamma}")
    K0 = sym(K0)
    y = np.asarray(y, dtype=np.float64)
    if S.n != K0.shape[0] or y.shape != (K0.shape[0],):
        raise InputError("kernel, preconditioner and labels disagree on n")
    return solve_spd(K0 + gamma * S.dense_inverse(), y)


def pkrr_predict(K_cross, K0, S: Preconditioner, gamma: float, y) -> np.ndarray:
    """Predictions ``K_cross @ alpha*`` for rows of test-versus-train kernel values."""
    return np.asarray(K_cross, dtype=np.float64) @ pkrr_closed_form(K0, S, gamma, y)


def linear_model_pgd(features, y, S: Preconditioner, gamma: float, eta: float, T: int, divergence_factor: float = 1e3):
    """Preconditioned gradient descent on ``h(x, w) = <w, phi(x)>`` from ``w = 0``.

    Each step is ``w <- w - eta (Phi^T S (Phi w - y) + gamma w)``.
    """
    Phi = np.asarray(features, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if Phi.ndim != 2 or y.shape != (Phi.shape[0],):
        raise InputError("features must be n x p with n labels")
    w = np.zeros(Phi.shape[1])
    r0 = float(np.linalg.norm(y))
    for t in range(int(T)):
        r = Phi @ w - y
        rn = float(np.linalg.norm(r))
        if not np.isfinite(rn) or rn > divergence_factor * max(r0, np.finfo(float).tiny):
            raise DivergenceError(f"linear model diverged at iteration {t} (residual {rn:.3e})", iteration=t)
        w -= eta * (Phi.T @ S.apply(r) + gamma * w)
    return w


# --------------------------------------------------------------------------
# network versus linearised model
# --------------------------------------------------------------------------
@dataclass
class ConsistencyResult:
    width: int
    gaps: np.ndarray
    linear_predictions: np.ndarray
    network_predictions: np.ndarray

    @property
    def max_gap(self) -> float:
        return float(np.max(self.gaps))


def _linear_dual(K_tr, K_te, y, S: Preconditioner, eta0: float, m: int, gamma: float, T: int):
    """Linear-model PGD run in the span of the training features.

    With ``w'_t = Phi^T beta_t`` the feature Gram is ``m K0``, so only ``n``
    coefficients need iterating; this is the same iteration as
    :func:`linear_model_pgd` with ``eta = eta0 / m``.
    """
    eta = eta0 / m
    beta = np.zeros(y.shape[0])
    for _ in range(int(T)):
        u = m * (K_tr @ beta)
        beta = (1.0 - eta * gamma) * beta - eta * S.apply(u - y)
    return m * (K_te @ beta)


def consistency_check(
    net_config: MlpConfig,
    train: Dataset,
    test_points,
    S: Preconditioner | None,
    eta0: float,
    T: int,
) -> ConsistencyResult:
    """Gaps ``|h(x, w'_T) - f(x, w_T)|`` between the trained network and its linearisation.

    Both start from ``init(net_config)``: the network is trained with
    :func:`pgd_train` for ``T`` steps and the linear model on the features
    ``phi(x) = grad f(x, w_0)`` with the same preconditioner and step.
    """
    if train.labels is None:
        raise InputError("training dataset has no labels")
    Xte = np.atleast_2d(np.asarray(test_points, dtype=np.float64))
    y = train.labels
    n = train.n
    S = Preconditioner.identity(n) if S is None else S
    s0 = init(net_config)
    K_tr = empirical_ntk(s0, train.points)
    K_te = empirical_ntk(s0, Xte, train.points)
    h = _linear_dual(K_tr, K_te, y, S, eta0, net_config.width, 0.0, T)
    sT, _ = pgd_train(s0, train.points, y, S, eta0, epsilon=0.0, max_iter=T)
    f = forward(sT, Xte)
    return ConsistencyResult(net_config.width, np.abs(h - f), h, f)


def consistency_width_sweep(base: MlpConfig, widths, train, test_points, make_preconditioner, eta0_rule, T: int):
    """Run :func:`consistency_check` at several widths.

    ``make_preconditioner(K0)`` builds ``S`` from the initial empirical NTK and
    ``eta0_rule(K0, S)`` picks the step size.
    """
    out = []
    for m in widths:
        cfg = MlpConfig(**{**base.__dict__, "width": int(m)})
        K0 = empirical_ntk(init(cfg), train.points)
        S = make_preconditioner(K0)
        out.append(consistency_check(cfg, train, test_points, S, eta0_rule(K0, S), T))
    return out
