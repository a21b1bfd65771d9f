"""Command-line entry point: simulate, estimate, forecast, validate, benchmark.

Exit codes: 0 success, 64 configuration error, 65 data error, 70 solver
failure.  Every run writes a JSON manifest next to its main output.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .consumer import BidModel, InfeasibleBidError, materialize_bid, simulate
from .data import DataError, demo_dataset, generate_synthetic, load_dataset, save_synthetic
from .estimation import EstimationConfig
from .estimator import fit_pipeline
from .evaluation import InsufficientHistoryError, benchmark, cross_validate
from .lp import LpError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 64, 65, 70

DEFAULTS = {
    "estimation": EstimationConfig().to_dict(),
    "refine": True,
    "forecast": {"train_days": 90, "test_days": 14, "issue_hour": 12, "simple_window": 168,
                 "horizon": 24},
    "arx": {"lags": 24, "calendar": True, "use_price": True, "drop_collinear": True},
    "validation": {"penalties": [0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0],
                   "forgetting": [0.0, 1.0, 2.0, 3.0, 4.0], "days": 14},
    "seed": 0,
}

log = logging.getLogger("bidfit")


class ConfigError(ValueError):
    pass


def _merge(base, update, path=""):
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and key != "features":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be an object")
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=None):
    """Defaults, updated by the JSON file at ``path`` and then by ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, user)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    try:
        EstimationConfig.from_dict(cfg["estimation"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid estimation settings: {exc}") from None
    return cfg


def estimation_config(cfg):
    return EstimationConfig.from_dict(cfg["estimation"])


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Record of one CLI run: config, input digests, outputs, versions, wall time."""

    def __init__(self, command, config):
        self.command = command
        self.config = config
        self.inputs = {}
        self.outputs = []
        self.started = time.perf_counter()

    def add_input(self, path):
        self.inputs[str(path)] = _digest(path)

    def add_output(self, path):
        self.outputs.append(str(path))

    def to_dict(self):
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.config.get("seed"),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "versions": {"bidfit": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "wall_time_s": time.perf_counter() - self.started,
        }

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, default=str)


def _load_model(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no such model file: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"model file {path} is not valid JSON: {exc}") from None
    try:
        return BidModel.from_dict(d.get("model", d))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed model file {path}: {exc}") from None


def _load_data(path, manifest, require_load=True):
    frame = load_dataset(path, require_load=require_load)
    manifest.add_input(path)
    return frame


def _write_series(path, timestamps, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp"] + list(columns))
        for i, t in enumerate(timestamps):
            w.writerow([str(np.datetime64(t, "s"))] + [repr(float(v[i])) for v in columns.values()])


# -- commands -------------------------------------------------------------

def cmd_simulate(args, cfg, manifest):
    """Synthetic dataset from a truth model (or the built-in demo pool)."""
    out = Path(args.out)
    if args.truth:
        truth = _load_model(args.truth)
        manifest.add_input(args.truth)
        if not args.inputs:
            raise ConfigError("--truth needs --inputs with prices and features")
        inputs = _load_data(args.inputs, manifest, require_load=False)
        clean = generate_synthetic(truth, inputs.price, inputs.features, 0.0, inputs.timestamps,
                                   horizon=cfg["forecast"]["horizon"],
                                   feature_names=inputs.feature_names)
        sd = args.noise_frac * float(np.mean(clean.load))
        rng = np.random.default_rng(cfg["seed"])
        frame = replace(clean, load=np.maximum(clean.load + rng.normal(0.0, sd, len(clean)), 0.0))
    else:
        frame, truth = demo_dataset(args.days, seed=cfg["seed"], n_blocks=args.blocks,
                                    noise_frac=args.noise_frac)
    sidecar = save_synthetic(frame, truth, out)
    manifest.add_output(out)
    manifest.add_output(sidecar)
    return out


def cmd_estimate(args, cfg, manifest):
    frame = _load_data(args.data, manifest)
    result = fit_pipeline(frame, estimation_config(cfg), refine=cfg["refine"])
    out = Path(args.out)
    doc = result.step1.to_dict()
    doc["model"] = result.model.to_dict()
    if result.refinement is not None:
        doc["refinement"] = {"weighted_gap": result.refinement.objective}
    with open(out, "w") as fh:
        json.dump(doc, fh, indent=2)
    manifest.add_output(out)
    return out


def cmd_forecast(args, cfg, manifest):
    model = _load_model(args.model)
    manifest.add_input(args.model)
    frame = _load_data(args.data, manifest, require_load=False)
    horizon = cfg["forecast"]["horizon"]
    totals = []
    for start in range(0, len(frame), horizon):
        part = frame.slice(start, min(start + horizon, len(frame)))
        totals.append(simulate(model, part.price, part.features, repair=True).total)
    out = Path(args.out)
    _write_series(out, frame.timestamps, {"load": np.concatenate(totals)})
    manifest.add_output(out)
    if args.bids:
        bid = materialize_bid(model, frame.features)
        Path(args.bids).write_text(bid.to_text([str(t) for t in frame.timestamps]))
        manifest.add_output(args.bids)
    return out


def cmd_validate(args, cfg, manifest):
    frame = _load_data(args.data, manifest)
    val = cfg["validation"]
    if not val["penalties"] or not val["forgetting"]:
        raise ConfigError("empty cross-validation grid")
    cv = cross_validate(frame, estimation_config(cfg), val["penalties"], val["forgetting"],
                        validation_days=val["days"], train_days=cfg["forecast"]["train_days"])
    out = Path(args.out)
    cv.to_csv(out)
    manifest.add_output(out)
    print(f"best L={cv.best_penalty:g} E={cv.best_forgetting:g} "
          f"MAPE={np.nanmin(cv.surface):.4f}")
    return out


def cmd_benchmark(args, cfg, manifest):
    frame = _load_data(args.data, manifest)
    fc = cfg["forecast"]
    reports = benchmark(frame, estimation_config(cfg), tuple(args.methods), fc["test_days"],
                        fc["train_days"], arx_options=cfg["arx"], simple_window=fc["simple_window"])
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "mae", "rmse", "mape"])
        for name, rep in reports.items():
            m = rep.metrics
            w.writerow([name, repr(m.mae), repr(m.rmse), repr(m.mape)])
            print(f"{name:>10s}  MAE {m.mae:10.4f}  RMSE {m.rmse:10.4f}  MAPE {m.mape:.4f}")
    manifest.add_output(out)
    if args.series_dir:
        d = Path(args.series_dir)
        d.mkdir(parents=True, exist_ok=True)
        for name, rep in reports.items():
            p = d / f"{name}.csv"
            rep.to_csv(p)
            manifest.add_output(p)
    return out


def _grid(text):
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse grid {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="bidfit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
        p.add_argument("--seed", type=int)
        p.add_argument("-v", "--verbose", action="store_true")

    def estimation_flags(p):
        p.add_argument("--blocks", type=int, dest="n_blocks")
        p.add_argument("--penalty", type=float)
        p.add_argument("--forgetting", type=float)

    p = sub.add_parser("simulate", help="write a synthetic dataset plus truth sidecar")
    common(p, "dataset file to write")
    p.add_argument("--truth", help="truth model file (default: built-in demo pool)")
    p.add_argument("--inputs", help="price and feature file used with --truth")
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--noise-frac", type=float, default=0.02)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="fit a bid model (penalty step plus refinement)")
    common(p, "model file to write")
    p.add_argument("--data", required=True)
    estimation_flags(p)
    p.add_argument("--no-refine", action="store_true")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("forecast", help="simulate a fitted model on prices and features")
    common(p, "predicted consumption file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="file with timestamp, price and features")
    p.add_argument("--bids", help="also write the per-period market bid here")
    p.add_argument("--horizon", type=int)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("validate", help="rolling cross-validation over (L, E)")
    common(p, "MAPE surface file")
    p.add_argument("--data", required=True)
    estimation_flags(p)
    p.add_argument("--penalties", help="comma-separated L grid")
    p.add_argument("--forgetting-grid", help="comma-separated E grid")
    p.add_argument("--validation-days", type=int)
    p.add_argument("--train-days", type=int)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("benchmark", help="compare inv, arx and simple-inv backtests")
    common(p, "metrics table file")
    p.add_argument("--data", required=True)
    estimation_flags(p)
    p.add_argument("--methods", nargs="+", default=["inv", "arx", "simple-inv"],
                   choices=["inv", "arx", "simple-inv"])
    p.add_argument("--test-days", type=int)
    p.add_argument("--train-days", type=int)
    p.add_argument("--series-dir", help="directory for per-method forecast series")
    p.set_defaults(func=cmd_benchmark)
    return parser


def _overrides(args):
    get = lambda name: getattr(args, name, None)
    out = {
        "seed": get("seed"),
        "estimation.n_blocks": get("n_blocks") if args.command != "simulate" else None,
        "estimation.penalty": get("penalty"),
        "estimation.forgetting": get("forgetting"),
        "forecast.horizon": get("horizon"),
        "forecast.test_days": get("test_days"),
        "forecast.train_days": get("train_days"),
        "validation.penalties": _grid(get("penalties")),
        "validation.forgetting": _grid(get("forgetting_grid")),
        "validation.days": get("validation_days"),
    }
    if get("no_refine"):
        out["refine"] = False
    return out


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        manifest = RunManifest(args.command, cfg)
        if args.config:
            manifest.add_input(args.config)
        out = args.func(args, cfg, manifest)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, InfeasibleBidError, InsufficientHistoryError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except LpError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    path = Path(args.manifest) if args.manifest else Path(str(out) + ".manifest.json")
    manifest.write(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
