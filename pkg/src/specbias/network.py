"""Finite-width fully connected networks in NTK scaling.

Layer ``l`` computes ``f_l = a_l W_l g_{l-1} + beta sqrt(m) b_l`` with
``a_l = sqrt(c m / fan_in)``, where ``c = 1 / E[rho(z)^2]`` (2 for ReLU).
Stored weights and biases are drawn from ``N(0, 1/m)`` so the *effective*
weights ``a_l W_l`` have variance ``c / fan_in`` and the effective biases
``beta * N(0, 1)``.  The readout is ``a_out w g_L + b`` with effective
variance ``nu / m`` for the weights and ``nu`` for the bias.

With this scaling the empirical kernel ``(1/m) J J^T`` converges to the
analytic :class:`specbias.kernels.NtkRelu` as the width grows, and gradient
descent with step ``eta0 / m`` follows the kernel dynamics.

Parameters are flattened layer by layer: ``W_1, b_1, ..., W_L, b_L, w_out, b_out``
(row-major).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import InputError, NumericalError
from .kernels import NtkRelu
from .linalg import sym

__all__ = [
    "MlpConfig",
    "MlpState",
    "ForwardCache",
    "c_rho",
    "init",
    "forward",
    "per_sample_gradient",
    "jacobian",
    "vjp",
    "empirical_ntk",
    "apply_update",
    "analytic_ntk_spec",
    "save_checkpoint",
    "load_checkpoint",
]

_DEFAULT_BUDGET = 2 * 1024**3


@lru_cache(maxsize=None)
def c_rho(activation: str) -> float:
    """``1 / E_{z~N(0,1)}[rho(z)^2]``."""
    if activation == "relu":
        return 2.0
    if activation == "tanh":
        z, w = np.polynomial.hermite_e.hermegauss(200)
        return float(1.0 / (np.sum(w * np.tanh(z) ** 2) / np.sqrt(2 * np.pi)))
    raise InputError(f"unknown activation {activation!r}")


def _act(name, u):
    if name == "relu":
        return np.maximum(u, 0.0)
    return np.tanh(u)


def _act_grad(name, u, g):
    if name == "relu":
        # subgradient 0 at exactly 0
        return (u > 0).astype(np.float64)
    return 1.0 - g * g


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int = 2
    depth: int = 2
    width: int = 1024
    activation: str = "relu"
    bias_scale: float = 1.0
    last_layer_scale: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.depth < 1 or self.width < 1:
            raise InputError("input_dim, depth and width must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise InputError(f"unknown activation {self.activation!r}")
        if self.bias_scale < 0:
            raise InputError("bias_scale must be nonnegative")
        if not self.last_layer_scale > 0:
            raise InputError("last_layer_scale must be positive")

    @property
    def c(self) -> float:
        return c_rho(self.activation)

    def shapes(self) -> list[tuple[tuple, tuple]]:
        m, d = self.width, self.input_dim
        out = [((m, d), (m,))]
        out += [((m, m), (m,)) for _ in range(self.depth - 1)]
        out.append(((m,), (1,)))
        return out

    @property
    def param_count(self) -> int:
        m, d, L = self.width, self.input_dim, self.depth
        return m * d + m + (L - 1) * (m * m + m) + m + 1

    def weight_multipliers(self) -> list[float]:
        m, c = self.width, self.c
        fan_in = [self.input_dim] + [m] * self.depth
        return [float(np.sqrt(c * m / f)) for f in fan_in]

    def bias_multipliers(self) -> list[float]:
        return [self.bias_scale * float(np.sqrt(self.width))] * self.depth + [1.0]


@dataclass(frozen=True)
class MlpState:
    config: MlpConfig
    weights: tuple
    biases: tuple

    @property
    def param_count(self) -> int:
        return self.config.param_count

    def effective_weight(self, layer: int) -> np.ndarray:
        """Weight of layer ``layer`` (1-based) as it acts in the forward pass."""
        return self.config.weight_multipliers()[layer - 1] * self.weights[layer - 1]

    def flat(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.ravel(), b.ravel()]
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, config: MlpConfig, vec) -> "MlpState":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (config.param_count,):
            raise InputError(f"expected {config.param_count} parameters, got {vec.shape}")
        Ws, bs, pos = [], [], 0
        for wshape, bshape in config.shapes():
            nw, nb = int(np.prod(wshape)), int(np.prod(bshape))
            Ws.append(vec[pos:pos + nw].reshape(wshape).copy())
            pos += nw
            bs.append(vec[pos:pos + nb].reshape(bshape).copy())
            pos += nb
        return cls(config, tuple(Ws), tuple(bs))

    def copy_params(self) -> tuple[list, list]:
        return [W.copy() for W in self.weights], [b.copy() for b in self.biases]


def init(config: MlpConfig) -> MlpState:
    rng = np.random.default_rng(config.seed)
    m = config.width
    sd = 1.0 / np.sqrt(m)
    Ws, bs = [], []
    for wshape, bshape in config.shapes()[:-1]:
        Ws.append(rng.normal(0.0, sd, size=wshape))
        bs.append(rng.normal(0.0, sd, size=bshape))
    nu = config.last_layer_scale
    # effective readout weight a_out * w has variance nu / m
    Ws.append(rng.normal(0.0, np.sqrt(nu / (config.c * m)), size=(m,)))
    bs.append(rng.normal(0.0, np.sqrt(nu), size=(1,)))
    return MlpState(config, tuple(Ws), tuple(bs))


@dataclass
class ForwardCache:
    X: np.ndarray
    pre: list
    post: list
    output: np.ndarray


def _forward_params(config, Ws, bs, X) -> ForwardCache:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != config.input_dim:
        raise InputError(f"inputs have {X.shape[1]} columns, network expects {config.input_dim}")
    wm, bm = config.weight_multipliers(), config.bias_multipliers()
    pre, post = [], [X]
    g = X
    for l in range(config.depth):
        with np.errstate(over="ignore", invalid="ignore"):
            u = wm[l] * (g @ Ws[l].T) + bm[l] * bs[l]
            g = _act(config.activation, u)
        if not np.all(np.isfinite(u)):
            raise NumericalError(f"non-finite pre-activation in hidden layer {l + 1}")
        pre.append(u)
        post.append(g)
    out = wm[-1] * (g @ Ws[-1]) + bm[-1] * bs[-1][0]
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite network output (layer %d)" % (config.depth + 1))
    return ForwardCache(X, pre, post, out)


def forward(state: MlpState, X, return_cache: bool = False):
    cache = _forward_params(state.config, state.weights, state.biases, X)
    return (cache.output, cache) if return_cache else cache.output


def _deltas(config, Ws, cache: ForwardCache, coef=None) -> list:
    """Backpropagated ``d f / d f_l`` for each hidden layer, one row per sample.

    With ``coef`` the rows are pre-multiplied by it, which turns the same
    pass into a vector-Jacobian product.
    """
    wm = config.weight_multipliers()
    n = cache.X.shape[0]
    top = np.full(n, wm[-1]) if coef is None else wm[-1] * np.asarray(coef, dtype=np.float64)
    delta = top[:, None] * Ws[-1][None, :]
    out = [None] * config.depth
    for l in range(config.depth - 1, -1, -1):
        delta = delta * _act_grad(config.activation, cache.pre[l], cache.post[l + 1])
        out[l] = delta
        if l > 0:
            delta = wm[l] * (delta @ Ws[l])
    return out


def _grad_layers(config, Ws, cache, coef):
    """Per-layer ``sum_i coef_i grad f(x_i)`` as (weight grads, bias grads)."""
    wm, bm = config.weight_multipliers(), config.bias_multipliers()
    coef = np.asarray(coef, dtype=np.float64)
    D = _deltas(config, Ws, cache, coef)
    gW, gb = [], []
    for l in range(config.depth):
        gW.append(wm[l] * (D[l].T @ cache.post[l]))
        gb.append(bm[l] * D[l].sum(axis=0))
    gW.append(wm[-1] * (coef @ cache.post[-1]))
    gb.append(np.array([bm[-1] * coef.sum()]))
    return gW, gb


def vjp(state: MlpState, X, coef, cache: ForwardCache | None = None) -> np.ndarray:
    """``J(X)^T coef`` as a flat parameter vector."""
    if cache is None:
        cache = _forward_params(state.config, state.weights, state.biases, X)
    gW, gb = _grad_layers(state.config, state.weights, cache, coef)
    parts = []
    for W, b in zip(gW, gb):
        parts += [W.ravel(), b.ravel()]
    return np.concatenate(parts)


def jacobian(state: MlpState, X, cache: ForwardCache | None = None, memory_budget: int = _DEFAULT_BUDGET) -> np.ndarray:
    """Dense ``n x p`` Jacobian of the outputs; only for small networks."""
    cfg = state.config
    if cache is None:
        cache = _forward_params(cfg, state.weights, state.biases, X)
    n = cache.X.shape[0]
    if 8 * n * cfg.param_count > memory_budget:
        raise InputError(
            f"Jacobian would need {8 * n * cfg.param_count / 2**30:.2f} GiB, "
            f"over the {memory_budget / 2**30:.2f} GiB budget"
        )
    wm, bm = cfg.weight_multipliers(), cfg.bias_multipliers()
    D = _deltas(cfg, state.weights, cache)
    cols = []
    for l in range(cfg.depth):
        cols.append(wm[l] * (D[l][:, :, None] * cache.post[l][:, None, :]).reshape(n, -1))
        cols.append(bm[l] * D[l])
    cols.append(wm[-1] * cache.post[-1])
    cols.append(np.full((n, 1), bm[-1]))
    return np.concatenate(cols, axis=1)


def per_sample_gradient(state: MlpState, x) -> np.ndarray:
    """Gradient of the scalar output at one input w.r.t. all parameters (flat)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return vjp(state, x, np.ones(1))


def empirical_ntk(state: MlpState, X, Z=None) -> np.ndarray:
    """``(1/m) J(X) J(Z)^T`` without materialising the Jacobians.

    Each layer contributes ``(D_X D_Z^T) * (G_X G_Z^T)`` from its weights and
    ``D_X D_Z^T`` from its bias, where ``D`` are backpropagated deltas and
    ``G`` the layer inputs, so memory stays at ``O(n m)`` per layer.
    """
    cfg = state.config
    cx = _forward_params(cfg, state.weights, state.biases, X)
    cz = cx if Z is None else _forward_params(cfg, state.weights, state.biases, Z)
    wm, bm = cfg.weight_multipliers(), cfg.bias_multipliers()
    Dx = _deltas(cfg, state.weights, cx)
    Dz = Dx if Z is None else _deltas(cfg, state.weights, cz)
    K = wm[-1] ** 2 * (cx.post[-1] @ cz.post[-1].T) + bm[-1] ** 2
    for l in range(cfg.depth):
        DD = Dx[l] @ Dz[l].T
        K += (wm[l] ** 2 * (cx.post[l] @ cz.post[l].T) + bm[l] ** 2) * DD
    K /= cfg.width
    return sym(K) if Z is None else K


def apply_update(state: MlpState, delta) -> MlpState:
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (state.param_count,):
        raise InputError(f"update has shape {delta.shape}, expected ({state.param_count},)")
    return MlpState.from_flat(state.config, state.flat() + delta)


def analytic_ntk_spec(config: MlpConfig) -> NtkRelu:
    """The infinite-width kernel this network's ``(1/m) J J^T`` converges to."""
    if config.activation != "relu":
        raise InputError("the analytic NTK is only available for ReLU networks")
    return NtkRelu(config.depth, config.bias_scale, config.last_layer_scale)


# --------------------------------------------------------------------------
# checkpoints: magic, uint32 header length, JSON header, little-endian float64
# --------------------------------------------------------------------------
_MAGIC = b"SBCKPT01"


def save_checkpoint(state: MlpState, path) -> None:
    cfg = state.config
    header = {
        "config": asdict(cfg),
        "param_count": cfg.param_count,
        "layer_order": [f"{kind}{l + 1}" for l in range(cfg.depth + 1) for kind in ("W", "b")],
        "shapes": [[list(w), list(b)] for w, b in cfg.shapes()],
        "dtype": "<f8",
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(state.flat().astype("<f8").tobytes())


def load_checkpoint(path) -> MlpState:
    with open(Path(path), "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise InputError(f"{path} is not a checkpoint file")
        (size,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(size).decode("utf-8"))
        vec = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    cfg = MlpConfig(**header["config"])
    if vec.shape[0] != header["param_count"]:
        raise InputError("checkpoint is truncated")
    return MlpState.from_flat(cfg, vec)


def with_width(config: MlpConfig, width: int, **changes) -> MlpConfig:
    return replace(config, width=width, **changes)
