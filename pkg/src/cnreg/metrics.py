"""Calibration, coverage, sharpness, binned log-likelihood (gof) and MAE.

Metric functions take plain arrays.  :func:`evaluate` drives them from any
*predictor*: an object with ``cdf(z, X)`` and ``quantiles(levels, X)``
(trained-model adapters and the synthetic oracles both qualify).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import _atomic_write, write_rows
from .errors import DataError, NumericError

BIN_PROB_FLOOR = 1e-10


@dataclass
class CalibrationConfig:
    nominal_grid: tuple = tuple(np.linspace(0.02, 0.98, 8))
    weights: tuple | None = None

    def __post_init__(self):
        grid = np.asarray(self.nominal_grid, dtype=float)
        if grid.ndim != 1 or len(grid) == 0:
            raise ValueError("nominal grid must be a nonempty list")
        if np.any(grid <= 0) or np.any(grid >= 1) or np.any(np.diff(grid) <= 0):
            raise ValueError("nominal grid must be strictly increasing inside (0, 1)")
        w = np.ones_like(grid) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != grid.shape or np.any(w < 0):
            raise ValueError("weights must be nonnegative and match the grid")
        self.nominal_grid = tuple(grid.tolist())
        self.weights = tuple(w.tolist())


@dataclass
class GofBins:
    """Nine interior edges defining ten bins ``[a_{j-1}, a_j)``.

    The outer bins are unbounded.  An outcome equal to an edge falls in the
    bin to its right.
    """

    edges: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        if self.edges.ndim != 1 or np.any(np.diff(self.edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")

    @classmethod
    def from_outcomes(cls, y_train, n_bins=10):
        """Edges equally spaced between the 5th and 95th empirical percentiles."""
        y_train = np.asarray(y_train, dtype=float)
        if y_train.size == 0:
            raise DataError("cannot place bins from an empty sample")
        lo, hi = np.percentile(y_train, [5, 95])
        return cls(np.linspace(lo, hi, n_bins - 1))

    @property
    def bin_count(self):
        return len(self.edges) + 1

    def assign(self, y):
        return np.searchsorted(self.edges, np.asarray(y, dtype=float), side="right")


@dataclass
class MetricReport:
    cal_hat: float
    coverage90: float
    gof_hat: float
    mae: float | None
    sharpness_curve: list = field(default_factory=list)
    calibration_gaps: list = field(default_factory=list)

    def to_record(self):
        return {
            "cal_hat": self.cal_hat,
            "coverage90": self.coverage90,
            "gof_hat": self.gof_hat,
            "mae": self.mae,
        }


def _check_nonempty(y):
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise DataError("no outcomes to evaluate")
    return y


def covered(lower, upper, y):
    return (np.asarray(lower) <= y) & (y <= np.asarray(upper))


def coverage_at(lower, upper, outcomes):
    """Percentage of outcomes inside their interval."""
    y = _check_nonempty(outcomes)
    return 100.0 * float(np.mean(covered(lower, upper, y)))


def calibration_gaps(lowers, uppers, outcomes, cfg=None):
    """Per level ``(nominal, empirical coverage)`` pairs, both as fractions."""
    cfg = cfg or CalibrationConfig()
    y = _check_nonempty(outcomes)
    lowers, uppers = np.atleast_2d(lowers), np.atleast_2d(uppers)
    if lowers.shape[0] != len(cfg.nominal_grid):
        raise ValueError("one row of intervals per nominal level is required")
    return [(q, float(np.mean(covered(lo, hi, y))))
            for q, lo, hi in zip(cfg.nominal_grid, lowers, uppers)]


def cal_hat(lowers, uppers, outcomes, cfg=None):
    """Weighted mean absolute gap between nominal and empirical coverage, in percent.

    ``lowers``/``uppers`` have one row per nominal level.  The weighted sum is
    divided by the number of levels, not by the weight total.
    """
    cfg = cfg or CalibrationConfig()
    gaps = calibration_gaps(lowers, uppers, outcomes, cfg)
    err = np.array([abs(q - emp) for q, emp in gaps])
    return 100.0 * float(np.sum(np.asarray(cfg.weights) * err) / len(err))


def bin_probs_from_cdf(cdf_at_edges):
    """Turn CDF values at the interior edges (rows x edges) into bin masses.

    Masses are floored at 1e-10 and renormalized.
    """
    F = np.atleast_2d(np.asarray(cdf_at_edges, dtype=float))
    F = np.maximum.accumulate(F, axis=1)
    n = len(F)
    full = np.hstack([np.zeros((n, 1)), F, np.ones((n, 1))])
    probs = np.maximum(np.diff(full, axis=1), BIN_PROB_FLOOR)
    return probs / probs.sum(axis=1, keepdims=True)


def gof_hat(bin_probs, outcomes, bins):
    """Mean log-probability assigned to the realized bin."""
    y = _check_nonempty(outcomes)
    P = np.atleast_2d(np.asarray(bin_probs, dtype=float))
    if P.shape != (len(y), bins.bin_count):
        raise ValueError(f"bin probabilities must have shape ({len(y)}, {bins.bin_count})")
    if np.any(np.abs(P.sum(axis=1) - 1) > 1e-6):
        raise ValueError("bin probabilities must sum to one per row")
    realized = P[np.arange(len(y)), bins.assign(y)]
    if np.any(realized <= 0):
        raise NumericError("zero probability on a realized bin")
    return float(np.mean(np.log(realized)))


def mae(predicted, reference):
    predicted = np.asarray(predicted, dtype=float)
    reference = _check_nonempty(reference)
    if predicted.shape != reference.shape:
        raise ValueError("predictions and reference must have equal length")
    return float(np.mean(np.abs(predicted - reference)))


def sharpness_curve(lowers, uppers, outcomes, nominal_grid):
    """``(nominal, empirical coverage, median width)`` per level, sorted by coverage."""
    y = _check_nonempty(outcomes)
    rows = []
    for q, lo, hi in zip(nominal_grid, np.atleast_2d(lowers), np.atleast_2d(uppers)):
        rows.append((float(q), float(np.mean(covered(lo, hi, y))), float(np.median(hi - lo))))
    return sorted(rows, key=lambda r: (r[1], r[0]))


def equal_tail_bounds(predictor, nominal_grid, X):
    """Lower/upper matrices (levels x rows) of equal-tail intervals."""
    grid = np.asarray(nominal_grid, dtype=float)
    tails = (1 - grid) / 2
    levels = np.concatenate([tails, 1 - tails])
    Q = predictor.quantiles(levels, X)
    lo, hi = Q[: len(grid)], Q[len(grid):]
    return np.minimum(lo, hi), np.maximum(lo, hi)


def predictor_bin_probs(predictor, X, bins):
    X = np.atleast_2d(X)
    z = np.tile(bins.edges, len(X))
    Xr = np.repeat(X, len(bins.edges), axis=0)
    F = np.asarray(predictor.cdf(z, Xr)).reshape(len(X), len(bins.edges))
    return bin_probs_from_cdf(F)


def evaluate(predictor, X, y, bins, cfg=None, reference_medians=None, sharpness_grid=None):
    """Score a predictor on test rows ``X``/``y``.

    MAE compares predicted medians against ``reference_medians`` when given
    (the analytic medians in synthetic runs), else against ``y``.
    """
    cfg = cfg or CalibrationConfig()
    y = _check_nonempty(y)
    grid = np.asarray(cfg.nominal_grid)
    extra = [0.9] if not np.any(np.isclose(grid, 0.9)) else []
    sgrid = np.asarray(sharpness_grid if sharpness_grid is not None else grid)
    all_levels = np.unique(np.concatenate([grid, extra, sgrid]))
    lows, highs = equal_tail_bounds(predictor, all_levels, X)
    pick = {round(float(q), 12): i for i, q in enumerate(all_levels)}

    def rows(levels):
        idx = [pick[round(float(q), 12)] for q in levels]
        return lows[idx], highs[idx]

    lo_c, hi_c = rows(grid)
    lo_90, hi_90 = rows([0.9])
    lo_s, hi_s = rows(sgrid)
    med = predictor.quantiles([0.5], X)[0]
    ref = y if reference_medians is None else np.asarray(reference_medians, dtype=float)
    return MetricReport(
        cal_hat=cal_hat(lo_c, hi_c, y, cfg),
        coverage90=coverage_at(lo_90[0], hi_90[0], y),
        gof_hat=gof_hat(predictor_bin_probs(predictor, X, bins), y, bins),
        mae=mae(med, ref),
        sharpness_curve=sharpness_curve(lo_s, hi_s, y, sgrid),
        calibration_gaps=calibration_gaps(lo_c, hi_c, y, cfg),
    )


def write_report(report, path):
    """Flat JSON record, one metric per key."""
    text = json.dumps(report.to_record(), indent=2, sort_keys=True)
    _atomic_write(path, lambda fh: fh.write(text + "\n"))


def write_sharpness_table(report, path):
    write_rows(path, ["nominal", "empirical_coverage", "median_width"], report.sharpness_curve)


def write_calibration_table(report, path):
    write_rows(
        path,
        ["nominal", "empirical_coverage", "gap"],
        [(q, emp, emp - q) for q, emp in report.calibration_gaps],
    )
