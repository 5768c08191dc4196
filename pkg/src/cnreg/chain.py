"""Chained CN models for multi-dimensional outcomes.

A joint conditional distribution over ``m`` outcomes is factored as
``p(y_a | x) p(y_b | x, y_a) ...`` following ``order``.  Each factor is a
single-outcome CN model whose features are ``x`` followed by the earlier
outcomes of the chain.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, _atomic_write, write_rows
from .errors import ConfigError, DataError, ShapeError
from .model import PROB_FLOOR, TrainedCnModel, TrainingConfig, checkpoint_load, train

DEFAULT_CDF_SAMPLES = 5000


@dataclass
class ChainModel:
    """Sequence of single-outcome models; ``links[j]`` models outcome ``order[j]``.

    Links may be trained models or any object exposing ``cdf(z, X)`` and
    ``quantile_from_g(q, X)`` (the synthetic oracles qualify).
    """

    order: tuple
    links: list
    n_features: int
    sample_count_for_cdf: int = DEFAULT_CDF_SAMPLES
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.order = tuple(int(i) for i in self.order)
        m = len(self.order)
        if sorted(self.order) != list(range(m)):
            raise ConfigError(f"order {self.order} is not a permutation of 0..{m - 1}")
        if len(self.links) != m:
            raise ConfigError("one link per outcome is required")
        if self.sample_count_for_cdf < 1:
            raise ConfigError("sample_count_for_cdf must be positive")
        for j, link in enumerate(self.links):
            width = getattr(link, "n_features", None)
            if width is not None and width != self.n_features + j:
                raise ShapeError(f"link {j} takes {width} features, expected {self.n_features + j}")

    @property
    def m(self):
        return len(self.order)

    def _x(self, x):
        x = np.asarray(x, dtype=float).ravel()
        if len(x) != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got {len(x)}")
        return x

    def save(self, directory):
        """One checkpoint per link plus a ``chain.json`` manifest."""
        os.makedirs(directory, exist_ok=True)
        for j, link in enumerate(self.links):
            if not isinstance(link, TrainedCnModel):
                raise TypeError("only trained links can be saved")
            link.save(os.path.join(directory, f"link_{j}.npz"))
        manifest = {
            "order": list(self.order),
            "n_features": self.n_features,
            "sample_count_for_cdf": self.sample_count_for_cdf,
            "seed": self.seed,
        }
        text = json.dumps(manifest, indent=2)
        _atomic_write(os.path.join(directory, "chain.json"), lambda fh: fh.write(text + "\n"))

    @classmethod
    def load(cls, directory):
        path = os.path.join(directory, "chain.json")
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        with open(path) as fh:
            manifest = json.load(fh)
        links = [checkpoint_load(os.path.join(directory, f"link_{j}.npz"))
                 for j in range(len(manifest["order"]))]
        return cls(links=links, **manifest)


def train_chain(data: LabeledDataset, cfg: TrainingConfig, order=None, sample_count_for_cdf=None):
    """Train one CN model per outcome along ``order`` (default: column order).

    Link ``j`` is fit on the observed earlier outcomes, never on sampled ones.
    Its seed is ``cfg.seed + j``.  A single-outcome dataset returns the plain
    trained model.
    """
    Y = np.asarray(data.outcomes_raw, dtype=float)
    if Y.ndim == 1:
        return train(data, cfg)
    m = Y.shape[1]
    if m == 1:
        single = LabeledDataset(data.features_raw, Y[:, 0], data.train_idx, data.test_idx)
        return train(single, cfg)
    order = tuple(range(m)) if order is None else tuple(order)
    if sorted(order) != list(range(m)):
        raise ConfigError(f"order {order} is not a permutation of 0..{m - 1}")
    links = []
    for j, col in enumerate(order):
        feats = np.column_stack([data.features_raw, Y[:, list(order[:j])]])
        link_data = LabeledDataset(feats, Y[:, col], data.train_idx, data.test_idx)
        links.append(train(link_data, dataclasses.replace(cfg, seed=cfg.seed + j)))
    return ChainModel(
        order=order,
        links=links,
        n_features=data.n_features,
        sample_count_for_cdf=sample_count_for_cdf or DEFAULT_CDF_SAMPLES,
        seed=cfg.seed,
    )


def _link_quantile(link, u, F, source):
    if source == "from_f":
        if not hasattr(link, "quantile_from_f"):
            raise ConfigError("f-based sampling needs trained links")
        return np.asarray(link.quantile_from_f(u, F)), np.zeros(len(u), dtype=bool)
    if isinstance(link, TrainedCnModel):
        vals, sat = link.quantile_from_g(u, F, return_saturation=True)
        return np.asarray(vals), np.asarray(sat)
    return np.asarray(link.quantile_from_g(u, F)), np.zeros(len(u), dtype=bool)


def sample_joint(chain: ChainModel, x, count, seed=None, source="from_g", return_saturation=False):
    """Draw ``count`` joint outcomes at ``x`` by inverting each link in turn.

    Columns follow the dataset's outcome order.  With ``return_saturation``
    the number of draws that hit the edge of some link's inversion grid is
    returned as well.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    x = chain._x(x)
    rng = np.random.default_rng(chain.seed if seed is None else seed)
    U = rng.uniform(size=(count, chain.m))
    feats = np.repeat(x[None, :], count, axis=0)
    out = np.empty((count, chain.m))
    saturated = np.zeros(count, dtype=bool)
    for j, link in enumerate(chain.links):
        if j == 0:
            # all rows share x, so a single curve serves every draw
            vals, sat = _link_quantile(link, U[:, 0], x, source)
        else:
            vals, sat = _link_quantile(link, U[:, j], feats, source)
        out[:, chain.order[j]] = vals
        saturated |= sat
        feats = np.column_stack([feats, vals])
    if return_saturation:
        return out, int(saturated.sum())
    return out


def _rectified_curves(link, F):
    """Link CDF along its inversion grid per row, made monotone by a running max."""
    curves = np.maximum.accumulate(link.g_curves(F), axis=1)
    grid = link.grid * link.y_sd + link.y_mean
    return grid, curves


def _interp_rows(grid, curves, z):
    """Evaluate every row's piecewise-linear curve at the scalar ``z``."""
    if z <= grid[0]:
        return np.full(len(curves), PROB_FLOOR)
    if z >= grid[-1]:
        return curves[:, -1]
    k = np.searchsorted(grid, z, side="right") - 1
    t = (z - grid[k]) / (grid[k + 1] - grid[k])
    return (1 - t) * curves[:, k] + t * curves[:, k + 1]


class _TwoLinkSample:
    """Fixed Monte-Carlo sample of ``y_first`` and the second link's CDF per draw."""

    def __init__(self, chain, x, seed):
        count = chain.sample_count_for_cdf
        rng = np.random.default_rng(seed)
        u = rng.uniform(size=count)
        first, second = chain.links
        self.y1, _ = _link_quantile(first, u, x, "from_g")
        F = np.column_stack([np.repeat(x[None, :], count, axis=0), self.y1])
        self.second = second
        self.F = F
        self.curves = None
        if isinstance(second, TrainedCnModel):
            self.grid, self.curves = _rectified_curves(second, F)

    def second_cdf(self, z2):
        if self.curves is not None:
            return _interp_rows(self.grid, self.curves, z2)
        return np.asarray(self.second.cdf(np.full(len(self.F), z2), self.F))

    def joint(self, z1, z2):
        return float(np.mean((self.y1 < z1) * self.second_cdf(z2)))


def _sample_for(chain, x, seed):
    key = (x.tobytes(), seed, chain.sample_count_for_cdf)
    if key not in chain._cache:
        if len(chain._cache) > 16:
            chain._cache.clear()
        chain._cache[key] = _TwoLinkSample(chain, x, seed)
    return chain._cache[key]


def joint_cdf(chain: ChainModel, z, x, seed=None):
    """``P(Y_1 < z_1, ..., Y_m < z_m | x)`` with ``z`` in dataset outcome order.

    For two outcomes the first link is sampled ``sample_count_for_cdf``
    times and the second link's CDF is averaged over those draws.  The
    sample set is fixed per ``(x, seed)``, so the estimate is exactly
    monotone in each coordinate.  Longer chains use plain Monte Carlo over
    joint draws.
    """
    z = np.asarray(z, dtype=float).ravel()
    if len(z) != chain.m:
        raise ShapeError(f"z needs {chain.m} coordinates")
    x = chain._x(x)
    seed = chain.seed if seed is None else seed
    zc = z[list(chain.order)]
    if chain.m == 2:
        return _sample_for(chain, x, seed).joint(zc[0], zc[1])
    draws = sample_joint(chain, x, chain.sample_count_for_cdf, seed=seed)
    return float(np.mean(np.all(draws < z, axis=1)))


def joint_cdf_grid(chain: ChainModel, z1_values, z2_values, x, seed=None):
    """Joint CDF over a grid; entry ``[i, k]`` is at ``(z1_values[i], z2_values[k])``."""
    if chain.m != 2:
        raise ConfigError("grid evaluation supports two outcomes")
    z1_values = np.asarray(z1_values, dtype=float)
    z2_values = np.asarray(z2_values, dtype=float)
    out = np.empty((len(z1_values), len(z2_values)))
    for i, a in enumerate(z1_values):
        for k, b in enumerate(z2_values):
            z = np.empty(2)
            z[0], z[1] = a, b
            out[i, k] = joint_cdf(chain, z, x, seed=seed)
    return out


def write_joint_cdf_grid(path, z1_values, z2_values, probs):
    """Three-column table ``z_1, z_2, probability`` for heat maps."""
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (len(z1_values), len(z2_values)):
        raise DataError("grid shape does not match its axes")
    rows = [(float(a), float(b), float(probs[i, k]))
            for i, a in enumerate(z1_values) for k, b in enumerate(z2_values)]
    write_rows(path, ["z_1", "z_2", "probability"], rows)
