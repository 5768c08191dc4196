"""Replicated comparisons of CN variants against the data-generating oracle."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .data import LabeledDataset, split_indices, write_rows
from .metrics import GofBins, evaluate
from .model import CN_FULL, G_ONLY, TrainingConfig, train
from .synthetic import SyntheticSpec, generate

METHODS = ("TH", "CN-g", "CN-f", "g-only")
METRIC_KEYS = ("cal_hat", "gof_hat", "coverage90", "mae")


def resplit(data, seed, ratio=0.7):
    """Same raw rows, new random train/test split."""
    train_idx, test_idx = split_indices(len(data.X), ratio, seed)
    return LabeledDataset.from_arrays(data.X, data.y, train_idx=train_idx, test_idx=test_idx)


def run_replication(data, seed, cfg: TrainingConfig, methods=METHODS, ratio=0.7, cal_cfg=None):
    """Split, train and score every requested method once.

    Returns ``(reports, models)``: a metric report per method and the trained
    models keyed by variant (``cn_full``, ``g_only``).
    """
    ds = resplit(data, seed, ratio)
    X_tr, y_tr = ds.train(standardized=False)
    X_te, y_te = ds.test()
    bins = GofBins.from_outcomes(y_tr)
    ref = data.oracle.median(X_te)
    reports, models = {}, {}
    if "CN-g" in methods or "CN-f" in methods:
        models["cn_full"] = train(ds, dataclasses.replace(cfg, variant=CN_FULL, seed=seed))
    if "g-only" in methods:
        models["g_only"] = train(ds, dataclasses.replace(cfg, variant=G_ONLY, seed=seed))
    predictors = {
        "TH": lambda: data.oracle,
        "CN-g": lambda: models["cn_full"].predictor("from_g"),
        "CN-f": lambda: models["cn_full"].predictor("from_f"),
        "g-only": lambda: models["g_only"].predictor("from_g"),
    }
    for method in methods:
        reports[method] = evaluate(predictors[method](), X_te, y_te, bins, cal_cfg,
                                   reference_medians=ref)
    return reports, models


def _reports_only(spec, seed, cfg, methods, ratio):
    # regenerated per worker: oracles hold closures and do not pickle
    return run_replication(generate(spec), seed, cfg, methods, ratio)[0]


def summarize(records):
    """Mean and sd per metric; the sd is zero for a single replication."""
    out = {}
    for key in METRIC_KEYS:
        vals = np.array([r[key] for r in records], dtype=float)
        out[key] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
    return out


def compare(families=("hetero_gaussian", "weibull"), methods=METHODS, replications=10, seed=0,
            cfg=None, ratio=0.7, n=None, jobs=1, progress=None):
    """Replicated comparison; each family's data is drawn once with ``seed``.

    Replication ``r`` re-splits that data and trains with seed ``seed + r``.
    With ``jobs > 1`` replications run in worker processes; results do not
    depend on ``jobs``.  Returns ``(summary_rows, per_replication_rows)``.
    """
    if replications < 1:
        raise ValueError("replications must be at least 1")
    cfg = cfg or TrainingConfig()
    summary, raw = [], []
    for family in families:
        spec = SyntheticSpec(family, n=n, seed=seed, split_ratio=ratio)
        records = {m: [] for m in methods}
        args = [(spec, seed + r, cfg, methods, ratio) for r in range(replications)]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_reports_only, *zip(*args)))
        else:
            results = (_reports_only(*a) for a in args)
        for r, reports in enumerate(results):
            for m in methods:
                rec = reports[m].to_record()
                records[m].append(rec)
                raw.append({"family": family, "replication": r, "method": m, **rec})
            if progress:
                progress(family, r, reports)
        for m in methods:
            stats = summarize(records[m])
            summary.append({"family": family, "method": m, "replications": replications,
                            **{f"{k}_mean": stats[k][0] for k in METRIC_KEYS},
                            **{f"{k}_sd": stats[k][1] for k in METRIC_KEYS}})
    return summary, raw


def write_records(path, records):
    if not records:
        raise ValueError("nothing to write")
    header = list(records[0])
    write_rows(path, header, [[rec[h] for h in header] for rec in records])


def survival_error(model, oracle, X, threshold=1.0):
    """Mean absolute error of ``P(Y > threshold | x)`` from g against the oracle."""
    X = np.atleast_2d(X)
    z = np.full(len(X), float(threshold))
    est = 1.0 - model.cdf(z, X)
    return float(np.mean(np.abs(est - oracle.survival(z, X))))
