"""Command line entry point: simulate | train | forecast | evaluate | repro.

Settings come from, in increasing priority, a scale preset, an optional
JSON config file (``--config``) and explicit flags.  Exit codes: 0 on
success, 2 for invalid input or configuration, 3 for numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
import warnings
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import afm, fmbase, metrics
from .bundle import load_bundle, save_bundle
from .dynsys import SYSTEMS, generate_dataset, get_system, load_dataset, save_dataset

log = logging.getLogger("afmflow")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


class StageFailed(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------

# Experiment-level keys.  Model hyperparameters live under "afm" and "fm".
EXPERIMENT_KEYS = {
    "system": str, "dataset": (str, type(None)), "model_kind": str, "out": (str, type(None)),
    "seeds": list, "n_train": int, "n_test": int, "samples": int, "horizon": (int, type(None)),
    "afm": dict, "fm": dict,
}

PRESETS = {
    "full": {
        "n_train": 2000, "n_test": 400, "samples": 100, "seeds": [0, 1, 2, 3, 4],
        "afm": {"window": 75, "max_steps": 20000},
        "fm": {"window": 75, "max_steps": 20000, "vel_hidden": 128, "vel_layers": 4},
    },
    "desk": {
        "n_train": 400, "n_test": 80, "samples": 20, "seeds": [0, 1, 2],
        "afm": {"window": 10, "max_steps": 1000},
        "fm": {"window": 10, "max_steps": 200, "vel_hidden": 32, "vel_layers": 2},
    },
    "smoke": {
        "n_train": 16, "n_test": 4, "samples": 4, "seeds": [0],
        "afm": {"window": 5, "max_steps": 20, "batch_size": 16, "enc_hidden": 8, "h_dim": 8,
                "mlp_hidden": 16, "ode_steps": 4, "smooth_window": 5, "checkpoint_every": 5},
        "fm": {"window": 5, "max_steps": 5, "batch_size": 8, "enc_hidden": 8, "h_dim": 8,
               "vel_hidden": 8, "vel_layers": 1, "ode_steps": 4, "smooth_window": 5,
               "checkpoint_every": 5},
    },
}

BASE = {"system": "brusselator", "dataset": None, "model_kind": "afm", "out": None,
        "seeds": [0], "n_train": 2000, "n_test": 400, "samples": 100, "horizon": None,
        "afm": {}, "fm": {}}


def _model_cls(kind: str):
    if kind == "afm":
        return afm.AfmConfig
    if kind == "fm":
        return fmbase.FmConfig
    raise ConfigError(f"model_kind must be 'afm' or 'fm', got {kind!r}")


def validate_config(cfg: dict) -> dict:
    """Reject unknown keys, wrong types and out-of-range values before any compute."""
    for k, v in cfg.items():
        if k not in EXPERIMENT_KEYS:
            raise ConfigError(f"unknown config key {k!r}")
        if not isinstance(v, EXPERIMENT_KEYS[k]) or isinstance(v, bool):
            raise ConfigError(f"config key {k!r} has the wrong type ({type(v).__name__})")
    for kind in ("afm", "fm"):
        known = {f.name for f in fields(_model_cls(kind))}
        bad = sorted(set(cfg.get(kind, {})) - known)
        if bad:
            raise ConfigError(f"unknown {kind} config key {bad[0]!r}")
        try:
            _model_cls(kind)(**cfg.get(kind, {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {kind} config: {exc}") from exc
    _model_cls(cfg.get("model_kind", "afm"))
    if cfg.get("system") is not None:
        try:
            get_system(cfg["system"])
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc
    for key in ("n_train", "n_test", "samples"):
        if key in cfg and cfg[key] < 1:
            raise ConfigError(f"{key} must be at least 1")
    if cfg.get("horizon") is not None and cfg["horizon"] < 1:
        raise ConfigError("horizon must be at least 1")
    if "seeds" in cfg:
        if not cfg["seeds"] or not all(isinstance(s, int) and s >= 0 for s in cfg["seeds"]):
            raise ConfigError("seeds must be a non-empty list of non-negative integers")
    return cfg


def _merge(base: dict, over: dict) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    return out


def build_config(preset: str | None, path: str | None, overrides: dict) -> dict:
    cfg = _merge(BASE, PRESETS[preset] if preset else {})
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        validate_config(raw)
        cfg = _merge(cfg, raw)
    cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    return validate_config(cfg)


def model_config(cfg: dict, kind: str, seed: int):
    return _model_cls(kind)(**_merge(cfg[kind], {"seed": seed}))


# ----------------------------------------------------------------------------
# output directories
# ----------------------------------------------------------------------------

LOCK = ".afmflow.lock"


@contextmanager
def output_dir(path, force: bool):
    """Create ``path`` (refusing non-empty directories unless forced) and hold its lock."""
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"{out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{out} is locked by another process ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        others = [p for p in out.iterdir() if p.name != LOCK]
        if others:
            if not force:
                raise ConfigError(f"{out} is not empty; pass --force to overwrite")
            for p in others:
                shutil.rmtree(p) if p.is_dir() else p.unlink()
        yield out
    finally:
        lock.unlink(missing_ok=True)


@contextmanager
def thread_limit():
    """Cap BLAS worker threads with AFM_THREADS when set."""
    val = os.environ.get("AFM_THREADS")
    if not val:
        yield
        return
    try:
        k = int(val)
        if k < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"AFM_THREADS must be a positive integer, got {val!r}") from None
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=k):
        yield


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# stages (shared by the subcommands and repro)
# ----------------------------------------------------------------------------


def stage_simulate(cfg: dict, seed: int, out: Path):
    ds = generate_dataset(cfg["system"], cfg["n_train"], cfg["n_test"], seed=seed)
    save_dataset(ds, out)
    return ds


def stage_train(ds, kind: str, cfg: dict, seed: int, out: Path):
    mcfg = model_config(cfg, kind, seed)
    if kind == "afm":
        if mcfg.window > ds.observe + ds.predict - 1:
            raise ConfigError(f"window {mcfg.window} exceeds the dataset history")
        bundle, records = afm.train(ds, mcfg)
    else:
        if mcfg.window > ds.observe:
            raise ConfigError(f"window {mcfg.window} exceeds the observation length {ds.observe}")
        bundle, records = fmbase.fm_train(ds, mcfg)
    save_bundle(bundle, out)
    afm.write_train_log(out / "train_log.csv", records)
    return bundle, records


def _check_compatible(bundle, ds) -> None:
    if bundle.n != ds.n or bundle.c_dim != ds.c_dim:
        raise ConfigError(f"model expects dim {bundle.n} / covariates {bundle.c_dim}, dataset "
                          f"has {ds.n} / {ds.c_dim}")
    if bundle.norm.get("id") != ds.norm_id():
        raise ConfigError("model and dataset normalizations differ "
                          f"({bundle.norm.get('id')} vs {ds.norm_id()})")


def stage_forecast(bundle, ds, samples: int, horizon: int | None, seed: int):
    """Ensembles for every test instance, starting at the end of the observe window.

    The baseline emits its fixed-length window from the observe origin and,
    when the horizon reaches past it, a second window re-conditioned on the
    true prediction window, truncated to the requested horizon.
    """
    _check_compatible(bundle, ds)
    obs = ds.observe
    full = ds.predict + ds.extrapolate
    horizon = full if horizon is None else horizon
    if horizon < 1:
        raise ConfigError("horizon must be at least 1")
    if horizon > full:
        raise ConfigError(f"horizon {horizon} runs past the trajectory end ({full} steps available)")
    ids = ds.train.shape[0] + np.arange(ds.test.shape[0])
    cov = ds.test_cov
    if bundle.kind == "afm":
        c = cov[:, :obs + horizon] if ds.c_dim else None
        return [afm.forecast(bundle, ds.test[:, :obs], c, horizon, samples, seed,
                             start=obs, instance_ids=ids)]
    f = int(bundle.arch["horizon"])
    out = []
    origin, k = obs, 0
    while origin - obs < horizon:
        c = cov[:, :origin + f] if ds.c_dim else None
        if origin + f > ds.test.shape[1]:
            # the last window would run past the data; keep its covariates finite
            pad = origin + f - ds.test.shape[1]
            hist = ds.test[:, :origin]
            if c is not None:
                c = np.concatenate([c, np.repeat(c[:, -1:], pad, axis=1)], axis=1)
        else:
            hist = ds.test[:, :origin]
        ens = fmbase.fm_forecast(bundle, hist, c, None, samples, seed + k, start=origin,
                                 instance_ids=ids)
        keep = min(f, obs + horizon - origin)
        ens.samples = ens.samples[:, :, :keep]
        out.append(ens)
        origin += f
        k += 1
    return out


def regime_windows(ds) -> dict:
    obs, pred, ext = ds.split
    return {"prediction": (obs, obs + pred), "extrapolation": (obs + pred, obs + pred + ext)}


def score_ensembles(ds, ensembles) -> tuple[metrics.MetricReport, list[str]]:
    """Score per regime in standardized units; regimes without full coverage are reported missing."""
    n_test = ds.test.shape[0]
    T = ds.test.shape[1]
    S = max(e.n_samples for e in ensembles)
    grid = np.full((n_test, S, T, ds.n), np.nan)
    covered = np.zeros(T, dtype=bool)
    for e in ensembles:
        ids = np.asarray(e.instance_ids) - ds.train.shape[0]
        f = e.samples.shape[2]
        grid[ids, :e.n_samples, e.start:e.start + f] = e.samples
        covered[e.start:e.start + f] = True
    truth = ds.normalize(ds.test)
    z = ds.normalize(grid)
    samples, truths, missing = {}, {}, []
    for name, (a, b) in regime_windows(ds).items():
        if b <= a:
            continue
        if not covered[a:b].all():
            missing.append(name)
            continue
        samples[name] = z[:, :, a:b]
        truths[name] = truth[:, a:b]
    return metrics.evaluate_windows(samples, truths), missing


def write_forecast_outputs(out: Path, ensembles, meta: dict) -> None:
    afm.write_forecast_csv(out / "forecast.csv", ensembles)
    afm.write_quantiles_csv(out / "quantiles.csv", ensembles)
    _write_json(out / "forecast.json", meta)


def ensembles_from_csv(path: Path, ds) -> list:
    """Rebuild ensembles (one per contiguous block of steps) from forecast.csv."""
    table = afm.read_forecast_csv(path)
    if not table:
        raise ConfigError(f"{path} holds no forecasts")
    iids = np.array(sorted(table))
    ts = table[int(iids[0])][0]
    S = max(v[1].shape[0] for v in table.values())
    arr = np.full((iids.size, S, ts.size, ds.n), np.nan)
    for j, iid in enumerate(iids):
        t_i, a = table[int(iid)]
        if not np.array_equal(t_i, ts):
            raise ConfigError(f"instance {iid} covers different steps than instance {iids[0]}")
        arr[j, :a.shape[0]] = a
    valid = np.all(np.isfinite(arr), axis=(2, 3))
    blocks = np.split(np.arange(ts.size), np.flatnonzero(np.diff(ts) != 1) + 1)
    return [afm.ForecastEnsemble(arr[:, :, b], valid, int(ts[b[0]]), iids) for b in blocks]


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = build_config(args.scale, args.config, {"system": args.system, "n_train": args.train,
                                                  "n_test": args.test})
    seed = args.seed if args.seed is not None else cfg["seeds"][0]
    out_path = args.out or cfg["out"]
    if not out_path:
        raise ConfigError("--out is required")
    with output_dir(out_path, args.force) as out:
        ds = stage_simulate(cfg, seed, out)
    total = cfg["n_train"] + cfg["n_test"]
    rej = ds.meta["rejected"]
    print(f"simulated {total} {ds.name} trajectories ({cfg['n_train']} train / {cfg['n_test']} test), "
          f"{ds.train.shape[1]} steps, {rej} rejected ({rej / (total + rej):.2%}) -> {out_path}")
    return EXIT_OK


def _train_overrides(args) -> dict:
    over = {}
    for key in ("max_steps", "window", "batch_size", "lr"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    return over


def cmd_train(args) -> int:
    kind = args.model
    cfg = build_config(args.scale, args.config, {"model_kind": kind})
    cfg[kind].update(_train_overrides(args))
    validate_config(cfg)
    seed = args.seed if args.seed is not None else cfg["seeds"][0]
    model_config(cfg, kind, seed)
    ds = load_dataset(args.dataset)
    with output_dir(args.out, args.force) as out:
        bundle, records = stage_train(ds, kind, cfg, seed, out)
    print(f"trained {kind} model {bundle.model_id()} on {ds.name}: {len(records)} steps, "
          f"final loss {records[-1].loss:.4g}" if records else f"initialized {kind} model")
    return EXIT_OK


def cmd_forecast(args) -> int:
    if args.horizon is not None and args.horizon < 1:
        raise ConfigError("horizon must be at least 1")
    if args.samples < 1:
        raise ConfigError("samples must be at least 1")
    bundle = load_bundle(args.model_dir)
    ds = load_dataset(args.dataset)
    with output_dir(args.out, args.force) as out:
        ens = stage_forecast(bundle, ds, args.samples, args.horizon, args.seed)
        write_forecast_outputs(out, ens, {"model_kind": bundle.kind, "model_id": bundle.model_id(),
                                          "dataset": ds.name, "norm_id": ds.norm_id(),
                                          "seed": args.seed, "samples": args.samples,
                                          "train_seed": bundle.config.get("seed")})
    print(f"wrote {sum(e.samples.shape[0] * e.n_samples for e in ens)} sample paths "
          f"for {ds.test.shape[0]} instances -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ds = load_dataset(args.dataset)
    rows = []
    for fdir in args.forecasts:
        fdir = Path(fdir)
        meta_path = fdir / "forecast.json"
        meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.is_file() else {}
        if meta.get("norm_id") not in (None, ds.norm_id()):
            raise ConfigError(f"{fdir} was produced for a different dataset normalization")
        ens = ensembles_from_csv(fdir / "forecast.csv", ds)
        report, missing = score_ensembles(ds, ens)
        for name in missing:
            warnings.warn(f"{fdir}: no {name} forecasts; those rows are omitted", UserWarning,
                          stacklevel=1)
            print(f"warning: {fdir}: {name} regime missing, rows omitted", file=sys.stderr)
        seed = meta.get("train_seed", meta.get("seed", 0))
        rows += metrics.per_seed_rows(meta.get("model_kind", "unknown"), ds.name, seed, report)
    rows += metrics.aggregate_rows(rows)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(args.out, rows)
    _print_rows(rows)
    return EXIT_OK


def _print_rows(rows) -> None:
    for r in rows:
        if r["seed"] == "all":
            print(f"{r['model_kind']:>4} {r['system']:<17} {r['regime']:<13} {r['metric']:<5} "
                  f"{r['mean']:.4f} +- {r['std']:.4f} (n={r['seed_count']})")


def run_repro(cfg: dict, systems: list[str], out: Path, progress=print) -> list[dict]:
    """simulate -> train afm/fm -> forecast -> evaluate for each system and seed."""
    rows = []
    for system in systems:
        for seed in cfg["seeds"]:
            run = out / system / f"seed{seed}"
            scfg = dict(cfg, system=system)

            def stage(name, fn, *a):
                t0 = time.perf_counter()
                try:
                    res = fn(*a)
                except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
                    raise StageFailed(f"{name} ({system}, seed {seed})", exc) from exc
                progress(f"[{system} seed {seed}] {name} done in {time.perf_counter() - t0:.1f}s")
                return res

            (run / "data").mkdir(parents=True, exist_ok=True)
            ds = stage("simulate", stage_simulate, scfg, seed, run / "data")
            for kind in ("afm", "fm"):
                mdir = run / kind
                mdir.mkdir(parents=True, exist_ok=True)
                bundle, _ = stage(f"train {kind}", stage_train, ds, kind, scfg, seed, mdir)
                ens = stage(f"forecast {kind}", stage_forecast, bundle, ds, cfg["samples"],
                            cfg["horizon"], seed)
                write_forecast_outputs(mdir, ens, {"model_kind": kind, "model_id": bundle.model_id(),
                                                   "dataset": ds.name, "norm_id": ds.norm_id(),
                                                   "seed": seed, "samples": cfg["samples"],
                                                   "train_seed": seed})
                report, missing = stage(f"evaluate {kind}", score_ensembles, ds, ens)
                for name in missing:
                    progress(f"warning: {kind} {system} seed {seed}: {name} regime missing")
                rows += metrics.per_seed_rows(kind, system, seed, report)
    return rows + metrics.aggregate_rows(rows)


def cmd_repro(args) -> int:
    over = {}
    if args.seeds is not None:
        over["seeds"] = list(range(args.seeds))
    cfg = build_config(args.scale, args.config, over)
    systems = [s.strip() for s in args.systems.split(",") if s.strip()]
    for s in systems:
        try:
            get_system(s)
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc
    with output_dir(args.out, args.force) as out:
        _write_json(out / "config.json", dict(cfg, systems=systems, scale=args.scale))
        rows = run_repro(cfg, systems, out)
        metrics.write_metrics_csv(out / "metrics.csv", rows)
    _print_rows(rows)
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afmflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scale=True):
        sp.add_argument("--config", help="JSON experiment config")
        if scale:
            sp.add_argument("--scale", choices=sorted(PRESETS), default=None,
                            help="preset for counts and model sizes")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    sp = sub.add_parser("simulate", help="generate an SDE dataset")
    sp.add_argument("--system", default=None, help=f"one of {', '.join(sorted(SYSTEMS))}")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--train", type=int, default=None, help="training trajectories")
    sp.add_argument("--test", type=int, default=None, help="test trajectories")
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train an afm or fm model")
    sp.add_argument("--model", choices=("afm", "fm"), required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    sp.add_argument("--window", type=int, default=None)
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("forecast", help="sample forecast ensembles for the test split")
    sp.add_argument("--model-dir", dest="model_dir", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--samples", type=int, default=100)
    sp.add_argument("--horizon", type=int, default=None, help="default: predict + extrapolate")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_forecast)

    sp = sub.add_parser("evaluate", help="score forecast directories into metrics.csv")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--forecasts", nargs="+", required=True, help="forecast output directories")
    sp.add_argument("--out", required=True, help="metrics.csv path")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("repro", help="run the full afm-vs-fm comparison")
    sp.add_argument("--systems", default="brusselator,lorenz")
    sp.add_argument("--seeds", type=int, default=None, help="number of seeds (0..k-1)")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_repro, scale="desk")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors
        return int(exc.code or 0)
    if args.command == "repro" and args.scale is None:
        args.scale = "desk"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except StageFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.cause, FloatingPointError) else EXIT_INVALID
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
