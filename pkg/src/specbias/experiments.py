"""Experiment drivers behind the command-line interface.

Every experiment is a pure function of an :class:`ExperimentConfig`: random
streams are derived per cell from ``(seed, cell key)``, rows are sorted
before writing and floats are printed with 17 significant digits, so two
runs of the same config give byte-identical CSV files.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import cell_rng, fourier_labels, sample_sphere
from .errors import ConfigError, IllConditionedError, InputError
from .kernels import Dataset, Laplace, MercerCircle, kernel_matrix
from .krr import krr_fit
from .linalg import eigh
from .msk import FlattenTopK, msk_consistency_sweep, msk_predict_many, parse_spectrum_map
from .network import MlpConfig, analytic_ntk_spec, empirical_ntk, init
from .precond import Preconditioner, build_preconditioner, ks_spectrum, max_stable_lr, pgd_train

__all__ = [
    "ExperimentConfig",
    "EXPERIMENTS",
    "freq_sweep",
    "variance_sweep",
    "msk_consistency_cmd",
    "ntk_check",
    "write_csv",
    "write_metadata",
]

EXPERIMENTS = ("freq-sweep", "variance-sweep", "msk-verify", "pgd-train", "krr", "ntk-check")
ARMS = ("identity", "ntk", "empirical")

# sizes mean sample sizes for the kernel experiments and widths for ntk-check
_DEFAULT_SIZES = {
    "variance-sweep": [64, 128, 256],
    "msk-verify": [64, 128, 256, 512],
    "ntk-check": [256, 1024, 4096],
}


@dataclass
class ExperimentConfig:
    experiment: str = "freq-sweep"
    seed: int = 0
    seeds: int = 3
    out: str = "out"
    # data and network
    input_dim: int = 2
    n: int = 64
    width: int = 2048
    depth: int = 2
    activation: str = "relu"
    bias_scale: float = 1.0
    last_layer_scale: float = 1e-2
    # training
    freqs: list = field(default_factory=lambda: list(range(1, 13)))
    arms: list = field(default_factory=lambda: list(ARMS))
    precond_k: int = 16
    precond_source: str = "initial"
    eta_scale: float = 0.9
    epsilon: float = 1e-2
    threshold: str = "norm"
    max_iter: int = 50_000
    refresh_every: int = 100
    batch_size: int = 0
    # kernel experiments
    sizes: list | None = None
    trials: int = 25
    test_points: int = 1000
    bandwidth: float = 1.0
    gamma: float = 0.0
    maps: list = field(default_factory=lambda: ["identity", "power:0.75", "power:0.5", "power:0.25"])
    spectrum_map: str = "power:0.5"
    mercer_truncation: int = 8
    floor_rel: float = 1e-12

    # ---------------------------------------------------------------- io
    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}", field=key)
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}", field="<file>") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object", field="<file>")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def resolved(self) -> "ExperimentConfig":
        """Copy with per-experiment defaults filled in."""
        cfg = dataclasses.replace(self)
        if cfg.sizes is None:
            cfg.sizes = list(_DEFAULT_SIZES.get(cfg.experiment, [cfg.n]))
        return cfg

    # ---------------------------------------------------------- checking
    def validate(self) -> None:
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg} (got {getattr(self, name)!r})", field=name)

        need(self.experiment in EXPERIMENTS, "experiment", f"must be one of {', '.join(EXPERIMENTS)}")
        for name in ("seed", "seeds", "input_dim", "n", "width", "depth", "precond_k", "max_iter",
                     "refresh_every", "batch_size", "trials", "test_points", "mercer_truncation"):
            v = getattr(self, name)
            need(isinstance(v, int) and not isinstance(v, bool), name, "must be an integer")
        need(self.seeds >= 1, "seeds", "must be at least 1")
        need(self.input_dim >= 2, "input_dim", "must be at least 2")
        need(self.n >= 1, "n", "must be positive")
        need(self.width >= 1, "width", "must be positive")
        need(self.depth >= 1, "depth", "must be positive")
        need(self.activation in ("relu", "tanh"), "activation", "must be relu or tanh")
        need(_num(self.bias_scale) and self.bias_scale >= 0, "bias_scale", "must be a nonnegative number")
        need(_num(self.last_layer_scale) and self.last_layer_scale > 0, "last_layer_scale", "must be positive")
        need(isinstance(self.freqs, list) and all(isinstance(k, int) and k >= 0 for k in self.freqs),
             "freqs", "must be a list of nonnegative integers")
        need(isinstance(self.arms, list) and all(a in ARMS for a in self.arms), "arms",
             f"entries must be among {', '.join(ARMS)}")
        need(self.precond_k >= 0, "precond_k", "must be nonnegative")
        need(self.precond_source in ("initial", "analytic"), "precond_source", "must be initial or analytic")
        need(_num(self.eta_scale) and self.eta_scale > 0, "eta_scale", "must be positive")
        need(_num(self.epsilon) and self.epsilon > 0, "epsilon", "must be positive")
        need(self.threshold in ("norm", "mse"), "threshold", "must be norm or mse")
        need(self.max_iter >= 0, "max_iter", "must be nonnegative")
        need(self.refresh_every >= 0, "refresh_every", "must be nonnegative")
        need(self.batch_size >= 0, "batch_size", "must be nonnegative")
        need(self.sizes is None or (isinstance(self.sizes, list) and self.sizes
                                    and all(isinstance(s, int) and s >= 1 for s in self.sizes)),
             "sizes", "must be a non-empty list of positive integers")
        need(self.trials >= 1, "trials", "must be positive")
        need(self.test_points >= 1, "test_points", "must be positive")
        need(_num(self.bandwidth) and self.bandwidth > 0, "bandwidth", "must be positive")
        need(_num(self.gamma) and self.gamma >= 0, "gamma", "must be nonnegative")
        need(_num(self.floor_rel) and self.floor_rel >= 0, "floor_rel", "must be nonnegative")
        need(self.mercer_truncation >= 1, "mercer_truncation", "must be positive")
        need(isinstance(self.maps, list) and self.maps, "maps", "must be a non-empty list")
        for name, texts in (("maps", self.maps), ("spectrum_map", [self.spectrum_map])):
            for text in texts:
                try:
                    parse_spectrum_map(text)
                except (InputError, ValueError):
                    raise ConfigError(f"{name}: cannot parse spectrum map {text!r}", field=name) from None

    def net_config(self, seed: int, width: int | None = None) -> MlpConfig:
        return MlpConfig(
            input_dim=self.input_dim,
            depth=self.depth,
            width=self.width if width is None else int(width),
            activation=self.activation,
            bias_scale=float(self.bias_scale),
            last_layer_scale=float(self.last_layer_scale),
            seed=int(seed),
        )


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def derived_seed(seed, *key) -> int:
    return int(cell_rng(seed, *key).integers(2**31 - 1))


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------
def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_metadata(path, config: ExperimentConfig, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"config": config.to_dict(), **extra}
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_plain) + "\n", encoding="utf-8")
    return path


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


# --------------------------------------------------------------------------
# frequency sweep
# --------------------------------------------------------------------------
FREQ_HEADER = ["frequency", "arm", "seed", "iterations", "converged", "diverged", "final_loss"]


def _arm_preconditioner(cfg: ExperimentConfig, arm: str, K0, K_analytic):
    n = K0.shape[0]
    if arm == "identity" or cfg.precond_k == 0:
        dec = eigh(K0)
        return Preconditioner.identity(n), cfg.eta_scale * max_stable_lr(dec.eigenvalues), None
    K = K_analytic if (arm == "ntk" and cfg.precond_source == "analytic") else K0
    dec = eigh(K)
    g = FlattenTopK(cfg.precond_k)
    S = build_preconditioner(dec, g, cfg.precond_k)
    eta0 = cfg.eta_scale * max_stable_lr(ks_spectrum(dec, g, cfg.precond_k))
    if arm != "empirical":
        return S, eta0, None

    def refresh(K_t):
        return build_preconditioner(eigh(K_t), g, cfg.precond_k)

    return S, eta0, refresh


def freq_cell(cfg: ExperimentConfig, seed_index: int, arm: str, k: int, X=None, state=None, cache=None):
    """Train one (seed, arm, frequency) cell and return its CSV row."""
    if X is None:
        X = sample_sphere(cfg.input_dim, cfg.n, rng=cell_rng(cfg.seed, "freq-points", seed_index)).points
    if state is None:
        state = init(cfg.net_config(derived_seed(cfg.seed, "freq-net", seed_index)))
    cache = {} if cache is None else cache
    if "K0" not in cache:
        cache["K0"] = empirical_ntk(state, X)
        cache["Ka"] = kernel_matrix(analytic_ntk_spec(state.config), X) if (
            cfg.precond_source == "analytic" and cfg.activation == "relu") else cache["K0"]
    S, eta0, refresh = _arm_preconditioner(cfg, arm, cache["K0"], cache["Ka"])
    y = fourier_labels(X, k)
    eps = cfg.epsilon if cfg.threshold == "norm" else math.sqrt(cfg.n * cfg.epsilon)
    _, trace = pgd_train(
        state, X, y, S, eta0,
        epsilon=eps,
        max_iter=cfg.max_iter,
        raise_on_divergence=False,
        refresh=refresh,
        refresh_every=cfg.refresh_every if refresh else 0,
        batch_size=cfg.batch_size or None,
        batch_seed=derived_seed(cfg.seed, "freq-batch", seed_index, arm, k),
    )
    norms = trace.norms()
    final = norms[-1] ** 2 / cfg.n if math.isfinite(norms[-1]) else math.inf
    its = trace.iterations_to_threshold
    converged = its is not None
    return [k, arm, seed_index, its if converged else trace.iterations, converged, trace.diverged, final]


def freq_sweep(cfg: ExperimentConfig, progress=None):
    """Rows of iterations needed to fit ``sin(k theta)`` per frequency, arm and seed."""
    cfg = cfg.resolved()
    if cfg.input_dim != 2:
        raise ConfigError("input_dim: the frequency sweep runs on the circle and needs input_dim=2", field="input_dim")
    rows = []
    for s in range(cfg.seeds):
        X = sample_sphere(2, cfg.n, rng=cell_rng(cfg.seed, "freq-points", s)).points
        state = init(cfg.net_config(derived_seed(cfg.seed, "freq-net", s)))
        cache = {}
        for arm in cfg.arms:
            for k in cfg.freqs:
                row = freq_cell(cfg, s, arm, k, X, state, cache)
                rows.append(row)
                if progress:
                    progress(row)
    order = {a: i for i, a in enumerate(ARMS)}
    rows.sort(key=lambda r: (order[r[1]], r[0], r[2]))
    return FREQ_HEADER, rows


# --------------------------------------------------------------------------
# variance sweep
# --------------------------------------------------------------------------
VARIANCE_HEADER = ["n", "g_name", "test_mse", "std", "trials"]


def variance_cell(cfg: ExperimentConfig, n: int, trial: int, maps):
    """Test MSE of each map for one noisy training set; ``None`` entries mark singular systems."""
    rng = cell_rng(cfg.seed, "variance", n, trial)
    X = sample_sphere(3, n, rng=rng).points
    y = rng.normal(size=n)
    T = sample_sphere(3, cfg.test_points, rng=cell_rng(cfg.seed, "variance-test", n, trial)).points
    spec = Laplace(cfg.bandwidth)
    out = []
    for g in maps:
        try:
            pred = msk_predict_many(spec, Dataset(X, y), T, [g], gamma=cfg.gamma, floor_rel=cfg.floor_rel)[0]
            out.append(float(np.mean(pred**2)))
        except IllConditionedError:
            out.append(None)
    return out


def variance_sweep(cfg: ExperimentConfig, progress=None):
    """Mean test MSE over trials of MSK regression on pure-noise labels (Laplace kernel on S^2)."""
    cfg = cfg.resolved()
    maps = [parse_spectrum_map(t) for t in cfg.maps]
    spec = Laplace(cfg.bandwidth)
    rows, singular = [], []
    for n in cfg.sizes:
        per_map = [[] for _ in maps]
        for trial in range(cfg.trials):
            rng = cell_rng(cfg.seed, "variance", n, trial)
            X = sample_sphere(3, n, rng=rng).points
            y = rng.normal(size=n)
            T = sample_sphere(3, cfg.test_points, rng=cell_rng(cfg.seed, "variance-test", n, trial)).points
            try:
                preds = msk_predict_many(spec, Dataset(X, y), T, maps, gamma=cfg.gamma, floor_rel=cfg.floor_rel)
                for j in range(len(maps)):
                    per_map[j].append(float(np.mean(preds[j] ** 2)))
            except IllConditionedError:
                # fall back to one map at a time so a single bad map does not drop the others
                for j, val in enumerate(variance_cell(cfg, n, trial, maps)):
                    if val is None:
                        singular.append({"n": n, "trial": trial, "g": cfg.maps[j]})
                    else:
                        per_map[j].append(val)
            if progress:
                progress((n, trial))
        for j, text in enumerate(cfg.maps):
            vals = np.asarray(per_map[j])
            mean = float(vals.mean()) if vals.size else math.nan
            std = float(vals.std()) if vals.size else math.nan
            rows.append([n, maps[j].name, mean, std, int(vals.size)])
    return VARIANCE_HEADER, rows, {"singular_cells": singular}


# --------------------------------------------------------------------------
# MSK consistency
# --------------------------------------------------------------------------
MSK_HEADER = ["n", "mean_frobenius", "std"]


def msk_consistency_cmd(cfg: ExperimentConfig):
    cfg = cfg.resolved()
    spec = MercerCircle.default(cfg.mercer_truncation)
    g = parse_spectrum_map(cfg.spectrum_map)
    seeds = [derived_seed(cfg.seed, "msk", i) for i in range(cfg.seeds)]
    sweep = msk_consistency_sweep(spec, g, cfg.sizes, seeds, floor_rel=cfg.floor_rel)
    return MSK_HEADER, [[r.n, r.mean_frobenius, r.std] for r in sweep]


# --------------------------------------------------------------------------
# NTK limit check
# --------------------------------------------------------------------------
NTK_HEADER = ["width", "mean_relative_gap", "std"]


def ntk_check(cfg: ExperimentConfig):
    """Relative Frobenius gap between the empirical NTK at init and the analytic NTK, per width."""
    cfg = cfg.resolved()
    X = sample_sphere(cfg.input_dim, cfg.n, rng=cell_rng(cfg.seed, "ntk-points")).points
    rows = []
    for m in cfg.sizes:
        gaps = []
        for s in range(cfg.seeds):
            net_cfg = cfg.net_config(derived_seed(cfg.seed, "ntk-net", s), width=m)
            Ka = kernel_matrix(analytic_ntk_spec(net_cfg), X)
            K0 = empirical_ntk(init(net_cfg), X)
            gaps.append(float(np.linalg.norm(K0 - Ka) / np.linalg.norm(Ka)))
        rows.append([int(m), float(np.mean(gaps)), float(np.std(gaps))])
    return NTK_HEADER, rows


# --------------------------------------------------------------------------
# single training run
# --------------------------------------------------------------------------
def pgd_train_cmd(cfg: ExperimentConfig, frequency: int, arm: str):
    """Train one network on ``sin(k theta)`` and return its trace plus metadata."""
    cfg = cfg.resolved()
    if cfg.input_dim != 2:
        raise ConfigError("input_dim: pgd-train fits Fourier labels on the circle and needs input_dim=2", field="input_dim")
    X = sample_sphere(2, cfg.n, rng=cell_rng(cfg.seed, "freq-points", 0)).points
    state = init(cfg.net_config(derived_seed(cfg.seed, "freq-net", 0)))
    K0 = empirical_ntk(state, X)
    Ka = kernel_matrix(analytic_ntk_spec(state.config), X) if cfg.precond_source == "analytic" else K0
    S, eta0, refresh = _arm_preconditioner(cfg, arm, K0, Ka)
    y = fourier_labels(X, frequency)
    eps = cfg.epsilon if cfg.threshold == "norm" else math.sqrt(cfg.n * cfg.epsilon)
    dec = eigh(K0)
    _, trace = pgd_train(
        state, X, y, S, eta0, epsilon=eps, max_iter=cfg.max_iter, track=dec.eigenvectors[:, : max(S.k + 1, 1)],
        raise_on_divergence=False, refresh=refresh, refresh_every=cfg.refresh_every if refresh else 0,
        batch_size=cfg.batch_size or None,
    )
    trace.metadata = {"eta0": eta0, "arm": arm, "frequency": frequency, "spectrum": dec.eigenvalues}
    return trace


def krr_cmd(cfg: ExperimentConfig):
    """Laplace KRR on noisy ``sin(3 atan2(x_2, x_1))`` labels; train and test MSE per size."""
    cfg = cfg.resolved()
    rows = []
    for n in cfg.sizes:
        rng = cell_rng(cfg.seed, "krr", n)
        X = sample_sphere(cfg.input_dim, n, rng=rng).points
        y = np.sin(3 * np.arctan2(X[:, 1], X[:, 0])) + 0.1 * rng.normal(size=n)
        T = sample_sphere(cfg.input_dim, cfg.test_points, rng=cell_rng(cfg.seed, "krr-test", n)).points
        model = krr_fit(Laplace(cfg.bandwidth), Dataset(X, y), cfg.gamma, floor_rel=cfg.floor_rel)
        train_mse = float(np.mean((model.predict(X) - y) ** 2))
        target = np.sin(3 * np.arctan2(T[:, 1], T[:, 0]))
        test_mse = float(np.mean((model.predict(T) - target) ** 2))
        rows.append([int(n), cfg.gamma, train_mse, test_mse])
    return ["n", "gamma", "train_mse", "test_mse"], rows
