"""Forecast scoring: empirical CRPS, horizon-averaged CRPS and NRMSE."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


def crps_empirical(samples, x, axis: int = 0):
    """CRPS of the empirical distribution of ``samples`` at observation ``x``.

    Uses the energy form E|X - x| - 1/2 E|X - X'| with the i = j pairs
    included, which equals the integral of (F_hat(y) - 1{y >= x})^2 exactly.
    ``samples`` may carry extra trailing axes; ``x`` broadcasts against the
    remaining shape.
    """
    a = np.moveaxis(np.asarray(samples, dtype=np.float64), axis, 0)
    m = a.shape[0]
    if m < 2:
        raise ValueError("CRPS needs at least 2 samples")
    x = np.asarray(x, dtype=np.float64)
    srt = np.sort(a, axis=0)
    abs_err = np.mean(np.abs(srt - x), axis=0)
    # sum_{i,j} |x_i - x_j| = 2 sum_i (2i - m - 1) x_(i), i = 1..m
    w = (2.0 * np.arange(1, m + 1) - m - 1).reshape((m,) + (1,) * (srt.ndim - 1))
    spread = np.sum(w * srt, axis=0) / (m * m)
    out = abs_err - spread
    return float(out) if np.ndim(out) == 0 else out


def mean_crps(samples, truth) -> float:
    """CRPS per (step, dim) averaged over the window.  samples (S, f, n), truth (f, n)."""
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[1:] != truth.shape:
        raise ValueError(f"samples {samples.shape} do not match truth {truth.shape}")
    return float(np.mean(crps_empirical(samples, truth)))


def nrmse(point_forecast, truth, per_dim: bool = False):
    """RMSE over the window divided by the sample std of the truth, per dimension, then averaged."""
    pf = np.asarray(point_forecast, dtype=np.float64)
    tr = np.asarray(truth, dtype=np.float64)
    if pf.shape != tr.shape:
        raise ValueError(f"forecast {pf.shape} and truth {tr.shape} differ in shape")
    if tr.ndim == 1:
        pf, tr = pf[:, None], tr[:, None]
    if tr.shape[0] < 2:
        raise ValueError("NRMSE needs at least 2 steps to estimate the truth's spread")
    sd = np.std(tr, axis=0, ddof=1)
    flat = np.flatnonzero(sd == 0)
    if flat.size:
        raise ValueError(f"truth is constant in dimension {int(flat[0]) + 1}; NRMSE undefined")
    rmse = np.sqrt(np.mean((pf - tr) ** 2, axis=0))
    vals = rmse / sd
    return vals if per_dim else float(np.mean(vals))


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------


REGIMES = ("prediction", "extrapolation")


@dataclass
class RegimeScores:
    crps: np.ndarray  # (I,) per-instance mean CRPS
    nrmse: np.ndarray  # (I,)
    crps_by_dim: np.ndarray  # (n,)
    crps_by_step: np.ndarray  # (f,)
    nrmse_by_dim: np.ndarray  # (n,)


@dataclass
class MetricReport:
    regimes: dict = field(default_factory=dict)  # name -> RegimeScores
    n_samples: int = 0
    n_instances: int = 0
    provenance: dict = field(default_factory=lambda: {
        "crps_space": "standardized (training mean/std), unnormalized",
        "point_forecast": "ensemble mean"})

    def mean(self, regime: str, metric: str) -> float:
        return float(np.mean(getattr(self.regimes[regime], metric)))


def score_regime(samples, truth) -> RegimeScores:
    """samples (I, S, f, n) possibly with NaN rows for excluded paths; truth (I, f, n)."""
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    I, S, f, n = samples.shape
    if truth.shape != (I, f, n):
        raise ValueError(f"truth {truth.shape} does not match samples {samples.shape}")
    crps_cells = np.empty((I, f, n))
    nr = np.empty(I)
    nr_dim = np.empty((I, n))
    for i in range(I):
        ok = np.all(np.isfinite(samples[i]), axis=(1, 2))
        s_i = samples[i, ok]
        crps_cells[i] = crps_empirical(s_i, truth[i])
        nr_dim[i] = nrmse(s_i.mean(axis=0), truth[i], per_dim=True)
        nr[i] = nr_dim[i].mean()
    return RegimeScores(crps_cells.mean(axis=(1, 2)), nr, crps_cells.mean(axis=(0, 1)),
                        crps_cells.mean(axis=(0, 2)), nr_dim.mean(axis=0))


def evaluate_windows(samples_by_regime: dict, truth_by_regime: dict) -> MetricReport:
    rep = MetricReport()
    for name, samples in samples_by_regime.items():
        sc = score_regime(samples, truth_by_regime[name])
        rep.regimes[name] = sc
        rep.n_instances = samples.shape[0]
        rep.n_samples = samples.shape[1]
    return rep


# ----------------------------------------------------------------------------
# metrics.csv
# ----------------------------------------------------------------------------

METRIC_COLUMNS = ["model_kind", "system", "regime", "metric", "seed", "mean", "std",
                  "std_err", "seed_count"]


def _fmt(x) -> str:
    return repr(float(x))


def per_seed_rows(model_kind: str, system: str, seed, report: MetricReport) -> list[dict]:
    rows = []
    for regime in REGIMES:
        if regime not in report.regimes:
            continue
        sc = report.regimes[regime]
        for metric in ("crps", "nrmse"):
            vals = getattr(sc, metric)
            sd = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
            rows.append({"model_kind": model_kind, "system": system, "regime": regime,
                         "metric": metric, "seed": str(seed), "mean": float(np.mean(vals)),
                         "std": sd, "std_err": sd / np.sqrt(vals.size), "seed_count": 1})
    return rows


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """Mean and standard deviation across seeds for each (model, system, regime, metric)."""
    groups: dict = {}
    for r in rows:
        if r["seed"] == "all":
            continue
        key = (r["model_kind"], r["system"], r["regime"], r["metric"])
        groups.setdefault(key, []).append(r["mean"])
    out = []
    for key, vals in groups.items():
        v = np.asarray(vals)
        sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
        out.append({"model_kind": key[0], "system": key[1], "regime": key[2], "metric": key[3],
                    "seed": "all", "mean": float(v.mean()), "std": sd,
                    "std_err": sd / np.sqrt(v.size), "seed_count": int(v.size)})
    return out


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(METRIC_COLUMNS)
        for r in rows:
            wr.writerow([r["model_kind"], r["system"], r["regime"], r["metric"], r["seed"],
                         _fmt(r["mean"]), _fmt(r["std"]), _fmt(r["std_err"]), int(r["seed_count"])])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("mean", "std", "std_err"):
            r[k] = float(r[k])
        r["seed_count"] = int(r["seed_count"])
    return rows
