"""Command-line entry point: ``specbias <command> [options]``.

Each command writes ``<command>.csv`` and ``<command>.json`` (the resolved
config plus run facts) under ``--out``.  Exit status is 0 on success, 2 for
configuration errors and 1 for runtime failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, SpecBiasError
from .experiments import (
    EXPERIMENTS,
    ExperimentConfig,
    freq_sweep,
    krr_cmd,
    msk_consistency_cmd,
    ntk_check,
    pgd_train_cmd,
    variance_sweep,
    write_csv,
    write_metadata,
)

log = logging.getLogger("specbias")


def _int_list(text: str) -> list[int]:
    """``"1..6"``, ``"1,2,5"`` or a mix such as ``"1..3,8"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError("empty list")
    return out


def _str_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


# flag name -> (config field, parser, help)
_COMMON = {
    "seeds": ("seeds", int, "number of seeds / trials per cell"),
    "n": ("n", int, "number of training points"),
    "width": ("width", int, "hidden-layer width"),
    "depth": ("depth", int, "number of hidden layers"),
    "activation": ("activation", str, "relu or tanh"),
    "bias-scale": ("bias_scale", float, "hidden bias scale beta"),
    "last-layer-scale": ("last_layer_scale", float, "readout variance scale nu"),
}
_FLAGS = {
    "freq-sweep": {
        **_COMMON,
        "freqs": ("freqs", _int_list, "frequencies, e.g. 1..12"),
        "arms": ("arms", _str_list, "comma list of identity,ntk,empirical"),
        "precond-k": ("precond_k", int, "number of flattened eigendirections"),
        "precond-source": ("precond_source", str, "initial (empirical NTK at init) or analytic"),
        "eta-scale": ("eta_scale", float, "step as a fraction of the stability bound"),
        "epsilon": ("epsilon", float, "stopping threshold"),
        "threshold": ("threshold", str, "norm (||r|| <= eps) or mse (mean r^2 <= eps)"),
        "max-iter": ("max_iter", int, "iteration cap"),
        "refresh-every": ("refresh_every", int, "preconditioner refresh period of the empirical arm"),
        "batch-size": ("batch_size", int, "minibatch size (0 = full batch)"),
    },
    "variance-sweep": {
        "sizes": ("sizes", _int_list, "training-set sizes"),
        "trials": ("trials", int, "trials per size"),
        "test-points": ("test_points", int, "held-out points per trial"),
        "bandwidth": ("bandwidth", float, "Laplace kernel bandwidth"),
        "maps": ("maps", _str_list, "spectrum maps, e.g. identity,power:0.5"),
        "gamma": ("gamma", float, "ridge"),
    },
    "msk-verify": {
        "sizes": ("sizes", _int_list, "sample sizes"),
        "seeds": ("seeds", int, "seeds per size"),
        "map": ("spectrum_map", str, "spectrum map, e.g. power:0.5"),
        "truncation": ("mercer_truncation", int, "highest frequency R of the circle kernel"),
    },
    "pgd-train": {
        **_COMMON,
        "precond-k": ("precond_k", int, "number of flattened eigendirections"),
        "precond-source": ("precond_source", str, "initial or analytic"),
        "eta-scale": ("eta_scale", float, "step as a fraction of the stability bound"),
        "epsilon": ("epsilon", float, "stopping threshold"),
        "threshold": ("threshold", str, "norm or mse"),
        "max-iter": ("max_iter", int, "iteration cap"),
    },
    "krr": {
        "sizes": ("sizes", _int_list, "training-set sizes"),
        "gamma": ("gamma", float, "ridge"),
        "bandwidth": ("bandwidth", float, "Laplace kernel bandwidth"),
        "test-points": ("test_points", int, "held-out points"),
        "input-dim": ("input_dim", int, "ambient dimension"),
    },
    "ntk-check": {
        **_COMMON,
        "sizes": ("sizes", _int_list, "widths to compare"),
        "input-dim": ("input_dim", int, "ambient dimension"),
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specbias", description="Spectral-bias experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="global seed")
        p.add_argument("--config", default=None, help="JSON config file")
        for flag, (dest, conv, helptext) in _FLAGS[name].items():
            p.add_argument(f"--{flag}", dest=f"opt_{dest}", type=conv, default=None, help=helptext)
        if name == "pgd-train":
            p.add_argument("--frequency", type=int, default=4, help="target frequency k of sin(k theta)")
            p.add_argument("--arm", default="ntk", choices=["identity", "ntk", "empirical"])
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg.experiment = args.command
    if args.out is not None:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    for key, value in vars(args).items():
        if key.startswith("opt_") and value is not None:
            setattr(cfg, key[4:], value)
    cfg.validate()
    return cfg.resolved()


def run(cfg: ExperimentConfig, args) -> Path:
    out = Path(cfg.out)
    cmd = cfg.experiment
    extra = {}
    if cmd == "freq-sweep":
        header, rows = freq_sweep(cfg, progress=lambda r: log.info("freq-sweep %s", r))
    elif cmd == "variance-sweep":
        header, rows, extra = variance_sweep(cfg, progress=lambda c: log.info("variance-sweep n=%s trial=%s", *c))
    elif cmd == "msk-verify":
        header, rows = msk_consistency_cmd(cfg)
    elif cmd == "ntk-check":
        header, rows = ntk_check(cfg)
    elif cmd == "krr":
        header, rows = krr_cmd(cfg)
    elif cmd == "pgd-train":
        trace = pgd_train_cmd(cfg, args.frequency, args.arm)
        out.mkdir(parents=True, exist_ok=True)
        trace.to_csv(out / "pgd-train.csv")
        write_metadata(out / "pgd-train-config.json", cfg, frequency=args.frequency, arm=args.arm,
                       iterations_to_threshold=trace.iterations_to_threshold, diverged=trace.diverged)
        return out / "pgd-train.csv"
    else:  # pragma: no cover - argparse restricts the choices
        raise ConfigError(f"unknown experiment {cmd!r}", field="experiment")
    path = write_csv(out / f"{cmd}.csv", header, rows)
    write_metadata(out / f"{cmd}.json", cfg, rows=len(rows), **extra)
    return path


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"specbias: config error in field '{exc.field}': {exc}", file=sys.stderr)
        return 2
    try:
        path = run(cfg, args)
    except ConfigError as exc:
        print(f"specbias: config error in field '{exc.field}': {exc}", file=sys.stderr)
        return 2
    except (SpecBiasError, OSError, ValueError, ArithmeticError) as exc:
        print(f"specbias: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


cli_main = main

if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
