"""Spectral preconditioners and preconditioned gradient descent.

``S = I - sum_{i<=k} c_i v_i v_i^T`` with ``c_i = 1 - g(lambda_i)/lambda_i``
shares eigenvectors with ``K``, so ``K S`` has eigenvalues
``g(lambda_1..lambda_k), lambda_{k+1}..lambda_n``.  Training with ``S`` moves the
residual along ``v_i`` at rate ``g(lambda_i)`` instead of ``lambda_i``.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceError, InputError, InvalidSpectrumMapError
from .linalg import SpectralDecomposition, eigh
from .msk import SpectrumMap, modified_eigenvalues
from .network import MlpState, _forward_params, _grad_layers, empirical_ntk, forward, vjp

__all__ = [
    "Preconditioner",
    "build_preconditioner",
    "apply_precond",
    "ks_spectrum",
    "max_stable_lr",
    "TrainTrace",
    "pgd_train",
    "linear_dynamics",
    "preconditioned_loss",
    "preconditioned_loss_grad",
    "iterations_to_learn",
]


@dataclass(frozen=True)
class Preconditioner:
    n: int
    vectors: np.ndarray
    coefficients: np.ndarray
    source_spectrum: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def k(self) -> int:
        return self.coefficients.shape[0]

    @property
    def ratios(self) -> np.ndarray:
        """``g(lambda_i) / lambda_i``: the eigenvalues of ``S`` on the modified directions."""
        return 1.0 - self.coefficients

    @classmethod
    def identity(cls, n: int) -> "Preconditioner":
        return cls(int(n), np.zeros((int(n), 0)), np.zeros(0))

    def _low_rank(self, coef, r):
        r = np.asarray(r, dtype=np.float64)
        if r.shape[0] != self.n:
            raise InputError(f"vector has length {r.shape[0]}, preconditioner is {self.n}x{self.n}")
        if self.k == 0:
            return r.copy()
        V = self.vectors
        if r.ndim == 1:
            return r - V @ (coef * (V.T @ r))
        return r - V @ (coef[:, None] * (V.T @ r))

    def apply(self, r) -> np.ndarray:
        return self._low_rank(self.coefficients, r)

    def apply_sqrt(self, r) -> np.ndarray:
        return self._low_rank(1.0 - np.sqrt(self.ratios), r)

    def apply_inverse(self, r) -> np.ndarray:
        return self._low_rank(1.0 - 1.0 / self.ratios, r)

    def dense(self) -> np.ndarray:
        return self.apply(np.eye(self.n))

    def dense_inverse(self) -> np.ndarray:
        return self.apply_inverse(np.eye(self.n))

    def dense_sqrt(self) -> np.ndarray:
        return self.apply_sqrt(np.eye(self.n))

    def min_eigenvalue(self) -> float:
        return float(min(1.0, self.ratios.min())) if self.k else 1.0


def apply_precond(S: Preconditioner, r) -> np.ndarray:
    return S.apply(r)


def _mapped(decomp: SpectralDecomposition, g: SpectrumMap, k: int, full: bool):
    n = decomp.n
    if k < 0:
        raise InputError(f"k must be nonnegative, got {k}")
    if k >= n and not (full and k == n):
        raise InputError(f"k={k} must be smaller than n={n} (k=n needs full=True)")
    lam = decomp.eigenvalues
    if k == 0:
        return lam, lam.copy()
    if k < n and not lam[k] > 0:
        raise InputError(f"eigenvalue lambda_{k + 1} = {lam[k]:.3e} is not positive")
    if not lam[k - 1] > 0:
        raise InputError(f"eigenvalue lambda_{k} = {lam[k - 1]:.3e} is not positive")
    mu = modified_eigenvalues(lam, g, floor_rel=0.0)
    if np.any(mu[:k] <= 0):
        i = int(np.flatnonzero(mu[:k] <= 0)[0])
        raise InvalidSpectrumMapError(f"g(lambda_{i + 1}) = {mu[i]:.3e} is not positive")
    return lam, mu


def build_preconditioner(decomp: SpectralDecomposition, g: SpectrumMap, k: int, full: bool = False) -> Preconditioner:
    """Preconditioner replacing the top ``k`` eigenvalues of ``K`` by ``g`` of them.

    ``full=True`` allows ``k == n`` so every direction is modified.
    """
    lam, mu = _mapped(decomp, g, k, full)
    coef = 1.0 - mu[:k] / lam[:k]
    return Preconditioner(
        decomp.n,
        np.ascontiguousarray(decomp.eigenvectors[:, :k]),
        coef,
        lam[: min(k + 1, decomp.n)].copy(),
    )


def ks_spectrum(decomp: SpectralDecomposition, g: SpectrumMap, k: int, full: bool = False) -> np.ndarray:
    """Eigenvalues of ``K S`` in the order of ``decomp``: ``g`` on the top ``k``, unchanged after."""
    lam, mu = _mapped(decomp, g, k, full)
    return np.concatenate([mu[:k], lam[k:]])


def max_stable_lr(spectrum) -> float:
    s = np.asarray(spectrum, dtype=np.float64)
    if s.size == 0 or np.any(~(s > 0)):
        raise InputError("learning-rate bound needs a strictly positive spectrum")
    return float(2.0 / (s.min() + s.max()))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------
@dataclass
class TrainTrace:
    residual_norms: list = field(default_factory=list)
    projections: list = field(default_factory=list)
    epsilon: float = 0.0
    iterations_to_threshold: int | None = None
    diverged: bool = False
    timings: dict = field(default_factory=lambda: {"forward": 0.0, "backward": 0.0, "precond": 0.0, "total": 0.0})
    metadata: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.residual_norms) - 1

    def norms(self) -> np.ndarray:
        return np.asarray(self.residual_norms)

    def projection_array(self) -> np.ndarray:
        return np.asarray(self.projections)

    def to_csv(self, path) -> None:
        path = Path(path)
        P = self.projection_array()
        j = P.shape[1] if P.ndim == 2 else 0
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "residual_norm"] + [f"proj_{i + 1}" for i in range(j)])
            for t, r in enumerate(self.residual_norms):
                row = [t, f"{r:.17g}"]
                if j:
                    row += [f"{v:.17g}" for v in P[t]]
                w.writerow(row)
        meta = dict(self.metadata)
        meta.update(
            epsilon=self.epsilon,
            iterations_to_threshold=self.iterations_to_threshold,
            diverged=self.diverged,
        )
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return str(obj)


def pgd_train(
    net: MlpState,
    X,
    y,
    S: Preconditioner | None,
    eta0: float,
    epsilon: float = 1e-2,
    max_iter: int = 50_000,
    track=None,
    divergence_factor: float = 1e3,
    raise_on_divergence: bool = True,
    refresh_every: int = 0,
    refresh=None,
    batch_size: int | None = None,
    batch_seed: int = 0,
):
    """Preconditioned gradient descent ``w <- w - (eta0/m) J^T S r``.

    ``track`` is an ``n x j`` matrix whose columns are the directions to
    record projections ``v^T r_t`` for.  ``refresh`` (a callable taking the
    current empirical NTK and returning a new preconditioner) is invoked
    every ``refresh_every`` iterations.  ``batch_size`` switches to
    minibatches drawn from a fixed permutation schedule; the recorded
    residual is always the full-batch one.

    Returns ``(final_state, trace)``.  The loop stops once ``||r_t|| <=
    epsilon`` or after ``max_iter`` updates.
    """
    cfg = net.config
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if y.shape != (n,):
        raise InputError(f"labels have shape {y.shape}, expected ({n},)")
    if S is None:
        S = Preconditioner.identity(n)
    if S.n != n:
        raise InputError(f"preconditioner is {S.n}x{S.n} but there are {n} training points")
    if not eta0 > 0:
        raise InputError(f"eta0 must be positive, got {eta0}")
    D = None if track is None else np.asarray(track, dtype=np.float64).reshape(n, -1)
    eta = eta0 / cfg.width
    Ws, bs = net.copy_params()
    trace = TrainTrace(epsilon=float(epsilon))
    trace.metadata = {"eta0": float(eta0), "width": cfg.width, "depth": cfg.depth, "k": S.k, "max_iter": int(max_iter)}
    rng = np.random.default_rng(batch_seed) if batch_size else None
    order, pos = None, 0
    t_start = time.perf_counter()
    r0 = None
    t = 0
    while True:
        tic = time.perf_counter()
        cache = _forward_params(cfg, Ws, bs, X)
        trace.timings["forward"] += time.perf_counter() - tic
        r = cache.output - y
        rn = float(np.linalg.norm(r))
        if not math.isfinite(rn):
            rn = math.inf
        trace.residual_norms.append(rn)
        if D is not None:
            trace.projections.append(D.T @ r)
        if r0 is None:
            r0 = rn
        if rn <= epsilon:
            trace.iterations_to_threshold = t
            break
        if rn > divergence_factor * max(r0, np.finfo(float).tiny):
            trace.diverged = True
            if raise_on_divergence:
                raise DivergenceError(
                    f"residual norm {rn:.3e} exceeded {divergence_factor:g} x initial {r0:.3e} at iteration {t}",
                    iteration=t,
                )
            break
        if t >= max_iter:
            break
        if refresh is not None and refresh_every and t > 0 and t % refresh_every == 0:
            K_t = empirical_ntk(MlpState(cfg, tuple(Ws), tuple(bs)), X)
            S = refresh(K_t)
        tic = time.perf_counter()
        if batch_size:
            if order is None or pos + batch_size > n:
                order, pos = rng.permutation(n), 0
            idx = order[pos:pos + batch_size]
            pos += batch_size
            Sd = S.dense()
            coef = np.zeros(n)
            coef[idx] = Sd[np.ix_(idx, idx)] @ r[idx]
        else:
            coef = S.apply(r)
        trace.timings["precond"] += time.perf_counter() - tic
        tic = time.perf_counter()
        gW, gb = _grad_layers(cfg, Ws, cache, coef)
        for l in range(len(Ws)):
            Ws[l] -= eta * gW[l]
            bs[l] -= eta * gb[l]
        trace.timings["backward"] += time.perf_counter() - tic
        t += 1
    trace.timings["total"] = time.perf_counter() - t_start
    return MlpState(cfg, tuple(Ws), tuple(bs)), trace


def linear_dynamics(spectrum, projections, eta0: float, T: int) -> np.ndarray:
    """``sqrt(sum_i (1 - eta0 lambda_i)^(2t) p_i^2)`` for ``t = 0..T``."""
    lam = np.asarray(spectrum, dtype=np.float64)
    p = np.asarray(projections, dtype=np.float64)
    if lam.shape != p.shape:
        raise InputError("spectrum and projections must have the same length")
    t = np.arange(T + 1)[:, None]
    decay = np.abs(1.0 - eta0 * lam)[None, :] ** t
    return np.sqrt(((decay * p) ** 2).sum(axis=1))


def preconditioned_loss(net: MlpState, X, y, S: Preconditioner) -> float:
    """``0.5 * ||S^{1/2} (f(X) - y)||^2``."""
    r = forward(net, X) - np.asarray(y, dtype=np.float64)
    s = S.apply_sqrt(r)
    return 0.5 * float(s @ s)


def preconditioned_loss_grad(net: MlpState, X, y, S: Preconditioner) -> np.ndarray:
    """``J^T S r``: the gradient of :func:`preconditioned_loss` and the PGD direction."""
    cache = _forward_params(net.config, net.weights, net.biases, X)
    r = cache.output - np.asarray(y, dtype=np.float64)
    return vjp(net, X, S.apply(r), cache=cache)


def iterations_to_learn(trace: TrainTrace, direction_index: int, delta: float):
    """First ``t`` with ``|p_i(t)| <= delta |p_i(0)|``; ``None`` if never reached."""
    P = trace.projection_array()
    if P.ndim != 2 or not 0 <= direction_index < P.shape[1]:
        raise InputError(f"direction {direction_index} was not tracked")
    p = np.abs(P[:, direction_index])
    hit = np.flatnonzero(p <= delta * p[0])
    return int(hit[0]) if hit.size else None


def eigh_ntk(state: MlpState, X) -> SpectralDecomposition:
    return eigh(empirical_ntk(state, X))
