"""Collaborating networks: a CDF network ``g(z, x)`` trained jointly with an
inverse-CDF network ``f(q, x)``.

Training runs a pre-training phase for ``g`` (random candidate outcomes drawn
uniformly around the observed range), then alternates one ``f`` step and one
``g`` step per iteration.  During the joint phase the logit output of ``g``
is batch-normalized with a fixed scale/shift so that the logits carry the
moments of ``logit(q)`` for ``q ~ Uniform(0, 1)``.

All networks work in standardized units; the public query methods take and
return values in original units.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import warnings
import zipfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import LabeledDataset, _atomic_write
from .errors import (
    ConfigError,
    CorruptCheckpointError,
    DataError,
    NumericError,
    ShapeError,
    VersionMismatchError,
)
from .nn import LOGIT_UNIFORM_SECOND_MOMENT, MLP, Adam, sigmoid, softplus

logger = logging.getLogger(__name__)

CN_FULL = "cn_full"
G_ONLY = "g_only_fixed_f"
T_G = "t_g_oracle_f"
VARIANTS = (CN_FULL, G_ONLY, T_G)

PROB_FLOOR = 1e-6
F_GRID = np.linspace(0.005, 0.995, 199)
CHECKPOINT_VERSION = 1
_CHUNK_ROWS = 1 << 15


@dataclass
class TrainingConfig:
    """Hyperparameters of pre-training plus joint training.

    ``batch_size=None`` resolves to 128, or 64 for training sets under 500
    rows; a batch larger than the training set is cut down to its size.
    ``pretrain_margin=None`` resolves to half the standardized outcome range.
    ``moment_matching`` switches on the fixed-affine output constraint for the
    joint phase.  It is off by default (see the README for why).
    ``f_step_g_stats`` picks the statistics ``g``'s normalization layers use
    while ``f`` is updated: running averages or the current batch.
    """

    pretrain_iters: int = 20000
    joint_iters: int = 20000
    batch_size: int | None = None
    g_step_size: float = 1e-4
    f_step_size: float = 5e-4
    q_distribution: str = "uniform"
    q_beta: tuple = (0.5, 0.5)
    pretrain_margin: float | None = None
    variant: str = CN_FULL
    ext_lambda: float = 0.0
    seed: int = 0
    g_hidden: tuple = (100, 80)
    f_hidden: tuple = (100, 80, 60)
    grid_points: int = 1024
    moment_matching: bool = False
    f_step_g_stats: str = "running"

    def __post_init__(self):
        self.q_beta = tuple(float(v) for v in self.q_beta)
        self.g_hidden = tuple(int(v) for v in self.g_hidden)
        self.f_hidden = tuple(int(v) for v in self.f_hidden)
        self.validate()

    def validate(self):
        if self.pretrain_iters < 0 or self.joint_iters < 0:
            raise ConfigError("iteration counts must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not (self.g_step_size > 0 and self.f_step_size > 0):
            raise ConfigError("step sizes must be positive")
        if self.q_distribution not in ("uniform", "beta"):
            raise ConfigError(f"unknown q distribution {self.q_distribution!r}")
        if self.q_distribution == "beta" and not all(v > 0 for v in self.q_beta):
            raise ConfigError("beta parameters must be positive")
        if self.pretrain_margin is not None and not self.pretrain_margin > 0:
            raise ConfigError("pretrain margin must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not self.ext_lambda >= 0:
            raise ConfigError("ext_lambda must be nonnegative")
        if self.f_step_g_stats not in ("running", "batch"):
            raise ConfigError(f"unknown f_step_g_stats {self.f_step_g_stats!r}")
        if self.grid_points < 2:
            raise ConfigError("inversion grid needs at least two points")

    def resolved_batch_size(self, n):
        b = self.batch_size if self.batch_size is not None else (64 if n < 500 else 128)
        return min(b, n)

    @property
    def uses_moment_matching(self):
        return bool(self.moment_matching)

    def to_dict(self):
        d = asdict(self)
        d["q_beta"] = list(self.q_beta)
        d["g_hidden"] = list(self.g_hidden)
        d["f_hidden"] = list(self.f_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FixedF:
    """Non-learned quantile sampler standing in for ``f``.

    ``uniform`` ignores ``q``'s meaning and maps it linearly onto
    ``[lo, hi]``; ``oracle`` calls ``quantile_fn(q, X_raw)``.  Both work in
    original outcome units.  ``name`` identifies an oracle from
    :data:`cnreg.synthetic.ORACLES` so that checkpoints can restore it.
    """

    kind: str
    lo: float = 0.0
    hi: float = 1.0
    quantile_fn: object = None
    name: str | None = None

    def __post_init__(self):
        if self.kind == "uniform":
            if not self.lo < self.hi:
                raise ConfigError("uniform FixedF needs lo < hi")
        elif self.kind == "oracle":
            if self.quantile_fn is None:
                if self.name is None:
                    raise ConfigError("oracle FixedF needs a quantile function or a name")
                from .synthetic import ORACLES

                try:
                    self.quantile_fn = ORACLES[self.name].quantile
                except KeyError:
                    raise ConfigError(f"unknown oracle {self.name!r}") from None
        else:
            raise ConfigError(f"unknown FixedF kind {self.kind!r}")

    @classmethod
    def uniform(cls, lo, hi):
        return cls("uniform", lo=float(lo), hi=float(hi))

    @classmethod
    def oracle(cls, quantile_fn=None, name=None):
        return cls("oracle", quantile_fn=quantile_fn, name=name)

    def quantile(self, q, X_raw):
        q = np.asarray(q, dtype=float)
        if self.kind == "uniform":
            return self.lo + q * (self.hi - self.lo)
        return np.asarray(self.quantile_fn(q, X_raw), dtype=float)


@dataclass
class Interval:
    lower: float
    upper: float
    nominal_level: float
    swapped: bool = False

    @property
    def width(self):
        return self.upper - self.lower


class CallableNet:
    """Wrap a function of the (standardized) input matrix as a frozen network.

    Used for analytic stubs; cannot be trained or checkpointed.
    """

    mode = "eval"

    def __init__(self, fn, input_width):
        self.fn = fn
        self.input_width = input_width
        self.output_width = 1

    def forward(self, x, update_stats=True, keep_cache=True):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise ShapeError(f"expected input of shape (n, {self.input_width}), got {x.shape}")
        return np.asarray(self.fn(x), dtype=float).reshape(-1, 1)

    def eval(self):
        return self

    def train(self):
        return self


# -- losses ---------------------------------------------------------------


def bce(b, p):
    """Binary cross-entropy ``-b log p - (1-b) log(1-p)`` with clamped ``p``."""
    p = np.clip(np.asarray(p, dtype=float), PROB_FLOOR, 1 - PROB_FLOOR)
    b = np.asarray(b, dtype=float)
    out = -(b * np.log(p) + (1 - b) * np.log1p(-p))
    return out if out.ndim else float(out)


def _g_inputs(z, X):
    return np.column_stack([np.asarray(z, dtype=float).reshape(-1), X])


def g_loss(g, z, X, y, q=None, ext_lambda=0.0):
    """Cross-entropy of ``1(y < z)`` against ``g(z, x)`` plus the optional
    ``ext_lambda * mean((q - g)^2)`` term.

    ``z`` is treated as a constant: gradients are returned for ``g`` only.
    Returns ``(loss, grads)``.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    if not np.all(np.isfinite(z)):
        raise NumericError("candidate outcomes must be finite")
    n = len(z)
    s = g.forward(_g_inputs(z, X))[:, 0]
    if not np.all(np.isfinite(s)):
        raise NumericError("g produced non-finite logits")
    b = (np.asarray(y, dtype=float) < z).astype(float)
    p = sigmoid(s)
    loss = float(np.mean(softplus(s) - b * s))
    ds = (p - b) / n
    if ext_lambda > 0:
        if q is None:
            raise ValueError("ext term needs the percentiles q")
        r = np.asarray(q, dtype=float) - p
        loss += ext_lambda * float(np.mean(r * r))
        ds += ext_lambda * (-2.0 * r * p * (1 - p)) / n
    grads, _ = g.backward(ds[:, None], need_input_grad=False)
    return loss, grads


def f_loss(f, g, q, X, g_stats="running"):
    """Squared error between ``q`` and ``g(f(q, x), x)``.

    ``g`` is frozen and only passes gradients through its input.  With
    ``g_stats="running"`` it runs in eval mode; with ``"batch"`` its
    normalization layers use the current batch's statistics (without
    updating the running ones).  Returns ``(loss, grads)`` for ``f``.
    """
    if g_stats not in ("running", "batch"):
        raise ValueError(f"unknown g_stats {g_stats!r}")
    q = np.asarray(q, dtype=float).reshape(-1)
    n = len(q)
    z = f.forward(_g_inputs(q, X))
    g_mode = g.mode
    g.eval() if g_stats == "running" else g.train()
    try:
        s = g.forward(_g_inputs(z[:, 0], X), update_stats=False)[:, 0]
        p = sigmoid(s)
        r = q - p
        loss = float(np.mean(r * r))
        ds = -2.0 * r * p * (1 - p) / n
        _, dinp = g.backward(ds[:, None])
    finally:
        g.mode = g_mode
    grads, _ = f.backward(dinp[:, :1], need_input_grad=False)
    return loss, grads


def pretrain_loss(g, z, X, y):
    """Pre-training loss: the cross-entropy part of :func:`g_loss`."""
    return g_loss(g, z, X, y)


# -- training ---------------------------------------------------------------


def build_networks(n_features, cfg, rng):
    g = MLP.build(n_features + 1, cfg.g_hidden, 1,
                  output_norm=(0.0, math.sqrt(LOGIT_UNIFORM_SECOND_MOMENT)), rng=rng)
    g.set_norm_active(len(g.layers) - 1, False)
    f = MLP.build(n_features + 1, cfg.f_hidden, 1, rng=rng)
    return g, f


def outcome_search_range(y_std, margin=None):
    """``[min(y) - K, max(y) + K]``; ``K`` defaults to half the range of ``y``."""
    lo, hi = float(np.min(y_std)), float(np.max(y_std))
    k = 0.5 * (hi - lo) if margin is None else float(margin)
    if not k > 0:
        k = 1.0
    return lo - k, hi + k


def _sample_q(cfg, rng, n):
    if cfg.q_distribution == "beta":
        q = rng.beta(cfg.q_beta[0], cfg.q_beta[1], n)
    else:
        q = rng.uniform(0.0, 1.0, n)
    return np.clip(q, PROB_FLOOR, 1 - PROB_FLOOR)


def pretrain_g(data, cfg, g, rng=None, optimizer=None):
    """Run ``cfg.pretrain_iters`` pre-training steps on ``g`` in place.

    Returns the per-iteration loss trace.
    """
    X, y = data.train()
    n = len(y)
    if n == 0:
        raise DataError("training split is empty")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    optimizer = optimizer or Adam(cfg.g_step_size)
    lo, hi = outcome_search_range(y, cfg.pretrain_margin)
    batch = cfg.resolved_batch_size(n)
    trace = np.empty(cfg.pretrain_iters)
    g.train()
    for it in range(cfg.pretrain_iters):
        idx = rng.choice(n, batch, replace=False)
        z = rng.uniform(lo, hi, batch)
        loss, grads = g_loss(g, z, X[idx], y[idx])
        if not math.isfinite(loss):
            raise NumericError(f"non-finite pre-training loss at iteration {it}", it)
        try:
            optimizer.update(g.params, grads)
        except NumericError as exc:
            raise NumericError(f"{exc} (pre-training iteration {it})", it) from exc
        trace[it] = loss
    return trace


def train(data: LabeledDataset, cfg: TrainingConfig, fixed_f: FixedF | None = None):
    """Pre-train ``g`` then run the joint phase; returns a :class:`TrainedCnModel`.

    ``fixed_f`` replaces the learned ``f`` for the ``g_only_fixed_f`` and
    ``t_g_oracle_f`` variants.  For ``g_only_fixed_f`` it defaults to a
    uniform sampler over the pre-training range.
    """
    cfg.validate()
    X, y = data.train()
    X_raw, _ = data.train(standardized=False)
    n, p = X.shape
    if n == 0:
        raise DataError("training split is empty")
    if np.ndim(y) != 1:
        raise DataError("train() needs a single outcome column")
    rng = np.random.default_rng(cfg.seed)
    g, f = build_networks(p, cfg, rng)
    lo, hi = outcome_search_range(y, cfg.pretrain_margin)
    y_mean, y_sd = float(data.outcome_mean), float(data.outcome_sd)

    if cfg.variant == CN_FULL:
        fixed_f = None
    elif cfg.variant == G_ONLY:
        if fixed_f is None:
            fixed_f = FixedF.uniform(lo * y_sd + y_mean, hi * y_sd + y_mean)
        f = None
    else:
        if fixed_f is None or fixed_f.kind != "oracle":
            raise ConfigError("t_g_oracle_f needs an oracle FixedF")
        f = None

    pre_trace = pretrain_g(data, cfg, g, rng=rng, optimizer=Adam(cfg.g_step_size))

    g_opt = Adam(cfg.g_step_size)
    f_opt = Adam(cfg.f_step_size) if f is not None else None
    batch = cfg.resolved_batch_size(n)
    g_trace = np.empty(cfg.joint_iters)
    f_trace = np.full(cfg.joint_iters, np.nan)
    out_layer = len(g.layers) - 1

    def draw_z(q, idx, f_mode_update=False):
        if f is not None:
            return f.forward(_g_inputs(q, X[idx]), update_stats=f_mode_update)[:, 0]
        return (fixed_f.quantile(q, X_raw[idx]) - y_mean) / y_sd

    if cfg.joint_iters > 0 and cfg.uses_moment_matching:
        g.set_norm_active(out_layer, True)
        g.reset_running_stats(out_layer)
        # Seed the output statistics before the first f step reads them.
        idx = rng.choice(n, batch, replace=False)
        q = _sample_q(cfg, rng, batch)
        if f is not None:
            f.train()
        g.train().forward(_g_inputs(draw_z(q, idx), X[idx]), keep_cache=False)

    for it in range(cfg.joint_iters):
        idx = rng.choice(n, batch, replace=False)
        q = _sample_q(cfg, rng, batch)
        try:
            if f is not None:
                f.train()
                floss, fgrads = f_loss(f, g, q, X[idx], cfg.f_step_g_stats)
                if not math.isfinite(floss):
                    raise NumericError("non-finite f-loss", it)
                f_opt.update(f.params, fgrads)
                f_trace[it] = floss
            z = draw_z(q, idx)
            g.train()
            gloss, ggrads = g_loss(g, z, X[idx], y[idx], q=q, ext_lambda=cfg.ext_lambda)
            if not math.isfinite(gloss):
                raise NumericError("non-finite g-loss", it)
            g_opt.update(g.params, ggrads)
        except NumericError as exc:
            raise NumericError(f"{exc} (joint iteration {it})", it) from exc
        g_trace[it] = gloss

    g.eval()
    if f is not None:
        f.eval()
    model = TrainedCnModel(
        g_net=g,
        f_net=f,
        fixed_f=fixed_f,
        x_mean=data.feature_means,
        x_sd=data.feature_sds,
        y_mean=y_mean,
        y_sd=y_sd,
        grid_lo=lo,
        grid_hi=hi,
        grid_points=cfg.grid_points,
        config=cfg,
        trace={"pretrain_loss": pre_trace, "g_loss": g_trace, "f_loss": f_trace},
    )
    model.collapse_warning = model.detect_collapse(X_raw[: min(n, 50)])
    if model.collapse_warning:
        warnings.warn("f outputs barely vary with q: possible mode collapse", RuntimeWarning)
    return model


# -- trained model ----------------------------------------------------------


def _forward_eval(net, inp):
    if len(inp) <= _CHUNK_ROWS:
        return net.forward(inp, update_stats=False, keep_cache=False)[:, 0]
    out = np.empty(len(inp))
    for start in range(0, len(inp), _CHUNK_ROWS):
        stop = start + _CHUNK_ROWS
        out[start:stop] = net.forward(inp[start:stop], update_stats=False, keep_cache=False)[:, 0]
    return out


@dataclass
class TrainedCnModel:
    """A frozen ``(g, f)`` pair with the standardization it was trained under.

    Query methods accept one feature vector ``x`` of length ``p`` or a matrix
    of rows.  With a single ``x`` and several ``z``/``q`` values, all values
    are evaluated at that ``x``; otherwise values pair up with rows.
    """

    g_net: object
    f_net: object
    fixed_f: FixedF | None
    x_mean: np.ndarray
    x_sd: np.ndarray
    y_mean: float
    y_sd: float
    grid_lo: float
    grid_hi: float
    grid_points: int = 1024
    config: TrainingConfig | None = None
    trace: dict = field(default_factory=dict)
    collapse_warning: bool = False
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x_mean = np.atleast_1d(np.asarray(self.x_mean, dtype=float))
        self.x_sd = np.atleast_1d(np.asarray(self.x_sd, dtype=float))
        if not self.grid_lo < self.grid_hi:
            raise ConfigError("inversion grid needs lo < hi")
        self.grid = np.linspace(self.grid_lo, self.grid_hi, self.grid_points)
        self.g_net.eval()
        if self.f_net is not None:
            self.f_net.eval()

    @property
    def n_features(self):
        return len(self.x_mean)

    @property
    def grid_step(self):
        """Inversion-grid cell width in original outcome units."""
        return (self.grid_hi - self.grid_lo) / (self.grid_points - 1) * self.y_sd

    def _std_x(self, x):
        X = np.asarray(x, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got shape {np.shape(x)}")
        return (X - self.x_mean) / self.x_sd

    def _pair(self, values, x):
        """Broadcast per-query values against feature rows."""
        scalar = np.ndim(values) == 0 and np.ndim(x) == 1
        v = np.atleast_1d(np.asarray(values, dtype=float))
        X = self._std_x(x)
        if len(X) == 1 and len(v) > 1:
            X = np.repeat(X, len(v), axis=0)
        elif len(v) == 1 and len(X) > 1:
            v = np.repeat(v, len(X))
        elif len(v) != len(X):
            raise ShapeError(f"{len(v)} values cannot pair with {len(X)} feature rows")
        return v, X, scalar

    # g-based queries

    def _g_prob_std(self, z_std, Xs):
        s = _forward_eval(self.g_net, _g_inputs(z_std, Xs))
        return np.clip(sigmoid(s), PROB_FLOOR, 1 - PROB_FLOOR)

    def cdf(self, z, x):
        """``P(Y < z | x)`` from ``g``, clamped to ``[1e-6, 1 - 1e-6]``."""
        v, X, scalar = self._pair(z, x)
        out = self._g_prob_std((v - self.y_mean) / self.y_sd, X)
        return float(out[0]) if scalar else out

    def g_curves(self, x):
        """``g`` evaluated on the inversion grid: shape ``(rows, grid_points)``."""
        Xs = self._std_x(x)
        m = self.grid_points
        out = np.empty((len(Xs), m))
        rows_per_chunk = max(1, _CHUNK_ROWS // m)
        for start in range(0, len(Xs), rows_per_chunk):
            block = Xs[start:start + rows_per_chunk]
            inp = np.column_stack([np.tile(self.grid, len(block)),
                                   np.repeat(block, m, axis=0)])
            out[start:start + len(block)] = self._g_prob_std(inp[:, 0], inp[:, 1:]).reshape(-1, m)
        return out

    def _invert(self, curves, q):
        """First upward crossing of level ``q`` per curve, linearly refined."""
        q = np.broadcast_to(np.asarray(q, dtype=float), (len(curves),))
        above = curves >= q[:, None]
        crossed = above.any(axis=1)
        j = above.argmax(axis=1)
        rows = np.arange(len(curves))
        lo_val = curves[rows, np.maximum(j - 1, 0)]
        hi_val = curves[rows, j]
        denom = np.where(hi_val > lo_val, hi_val - lo_val, 1.0)
        t = np.clip((q - lo_val) / denom, 0.0, 1.0)
        step = self.grid[1] - self.grid[0]
        out = self.grid[np.maximum(j - 1, 0)] + t * step
        at_start = crossed & (j == 0)
        out = np.where(at_start, self.grid[0], out)
        out = np.where(crossed, out, self.grid[-1])
        saturated = ~crossed | (at_start & (curves[:, 0] > q))
        return out * self.y_sd + self.y_mean, saturated

    def quantile_from_g(self, q, x, return_saturation=False):
        """Invert ``g`` numerically on the inversion grid."""
        qs = np.atleast_1d(np.asarray(q, dtype=float))
        if np.any((qs <= 0) | (qs >= 1)):
            raise ValueError("quantile levels must lie in (0, 1)")
        scalar = np.ndim(q) == 0 and np.ndim(x) == 1
        X = self._std_x(x)
        if len(X) == 1:
            curves = self.g_curves(x)
            vals, sat = self._invert(np.repeat(curves, len(qs), axis=0), qs)
        else:
            if len(qs) not in (1, len(X)):
                raise ShapeError("q must be a scalar or pair with the feature rows")
            vals, sat = self._invert(self.g_curves(x), qs)
        if scalar:
            vals, sat = float(vals[0]), bool(sat[0])
        return (vals, sat) if return_saturation else vals

    def quantiles_from_g(self, levels, X):
        """Matrix ``(len(levels), rows)`` of g-based quantiles, one curve per row."""
        curves = self.g_curves(X)
        return np.stack([self._invert(curves, lv)[0] for lv in levels])

    # f-based queries

    def _f_std(self, q, Xs):
        if self.f_net is not None:
            return _forward_eval(self.f_net, _g_inputs(q, Xs))
        X_raw = Xs * self.x_sd + self.x_mean
        return (self.fixed_f.quantile(q, X_raw) - self.y_mean) / self.y_sd

    def quantile_from_f(self, q, x):
        """Direct evaluation of ``f`` (or the fixed sampler), original units."""
        v, X, scalar = self._pair(q, x)
        out = self._f_std(v, X) * self.y_sd + self.y_mean
        return float(out[0]) if scalar else out

    def quantiles_from_f(self, levels, X):
        """Running-maximum rectified f quantiles, shape ``(len(levels), rows)``.

        Levels inside the 199-point q grid interpolate the rectified grid
        curve, so the result is monotone in q and does not depend on which
        other levels are requested. Levels outside it evaluate ``f`` directly,
        clipped against the grid ends.
        """
        levels = np.asarray(levels, dtype=float)
        Xs = self._std_x(X)
        m = len(F_GRID)
        grid = self._f_std(np.tile(F_GRID, len(Xs)), np.repeat(Xs, m, axis=0))
        grid = np.maximum.accumulate(grid.reshape(len(Xs), m), axis=1)
        out = np.stack([np.interp(levels, F_GRID, row) for row in grid], axis=1)
        below, above = levels < F_GRID[0], levels > F_GRID[-1]
        if below.any() or above.any():
            edge = levels[below | above]
            vals = self._f_std(np.tile(edge, len(Xs)), np.repeat(Xs, len(edge), axis=0))
            vals = vals.reshape(len(Xs), len(edge)).T
            lo_mask, hi_mask = below[below | above], above[below | above]
            out[below] = np.minimum(vals[lo_mask], grid[:, 0])
            out[above] = np.maximum(vals[hi_mask], grid[:, -1])
        return out * self.y_sd + self.y_mean

    def cdf_from_f(self, z, x):
        """CDF implied by ``f`` on a 199-point q grid, rectified to be monotone."""
        v, X, scalar = self._pair(z, x)
        out = np.empty(len(v))
        uniq, inverse = np.unique(X, axis=0, return_inverse=True)
        inverse = np.ravel(inverse)
        m = len(F_GRID)
        fv = self._f_std(np.tile(F_GRID, len(uniq)), np.repeat(uniq, m, axis=0))
        fv = np.maximum.accumulate(fv.reshape(len(uniq), m), axis=1) * self.y_sd + self.y_mean
        for k in range(len(uniq)):
            rows = inverse == k
            out[rows] = np.interp(v[rows], fv[k], F_GRID)
        out = np.clip(out, PROB_FLOOR, 1 - PROB_FLOOR)
        return float(out[0]) if scalar else out

    # intervals

    def intervals(self, nominal, X, source="from_g"):
        """Equal-tail intervals; returns ``(lower, upper, swapped)`` arrays."""
        if not 0 < nominal < 1:
            raise ValueError("nominal level must lie in (0, 1)")
        tail = (1 - nominal) / 2
        levels = [tail, 1 - tail]
        if source == "from_g":
            lo, hi = self.quantiles_from_g(levels, X)
        elif source == "from_f":
            lo, hi = self.quantiles_from_f(levels, X)
        else:
            raise ValueError(f"unknown source {source!r}")
        swapped = lo > hi
        return np.minimum(lo, hi), np.maximum(lo, hi), swapped

    def interval(self, nominal, x, source="from_g"):
        lo, hi, swapped = self.intervals(nominal, np.atleast_2d(x), source)
        return Interval(float(lo[0]), float(hi[0]), nominal, bool(swapped[0]))

    def median(self, x, source="from_g"):
        if source == "from_g":
            return self.quantile_from_g(0.5, x)
        return self.quantile_from_f(0.5, x)

    def predictor(self, source="from_g"):
        return ModelPredictor(self, source)

    # diagnostics

    def fixed_point_gap(self, x, levels=None):
        """Mean ``|g(f(q, x), x) - q|`` over a q grid and feature rows."""
        levels = np.linspace(0.01, 0.99, 99) if levels is None else np.asarray(levels)
        Xs = self._std_x(x)
        q = np.tile(levels, len(Xs))
        Xr = np.repeat(Xs, len(levels), axis=0)
        z = self._f_std(q, Xr)
        return float(np.mean(np.abs(self._g_prob_std(z, Xr) - q)))

    def detect_collapse(self, x):
        if self.f_net is None:
            return False
        Xs = self._std_x(x)
        levels = np.linspace(0.01, 0.99, 99)
        vals = self._f_std(np.tile(levels, len(Xs)), np.repeat(Xs, len(levels), axis=0))
        spread = vals.reshape(len(Xs), len(levels)).std(axis=1).mean()
        return bool(spread < 1e-4)

    # persistence

    def save(self, path):
        checkpoint_save(self, path)

    @classmethod
    def load(cls, path):
        return checkpoint_load(path)


class ModelPredictor:
    """Adapter exposing one of the model's two routes to the metric code."""

    def __init__(self, model, source="from_g"):
        if source not in ("from_g", "from_f"):
            raise ValueError(f"unknown source {source!r}")
        self.model = model
        self.source = source

    def cdf(self, z, X):
        if self.source == "from_g":
            return self.model.cdf(z, X)
        return self.model.cdf_from_f(z, X)

    def quantiles(self, levels, X):
        if self.source == "from_g":
            return self.model.quantiles_from_g(levels, X)
        return self.model.quantiles_from_f(levels, X)

    def median(self, X):
        return self.quantiles([0.5], X)[0]


# -- checkpoints ----------------------------------------------------------------


def checkpoint_save(model, path):
    """Write ``model`` to an ``.npz`` container with a JSON header entry."""
    for net in (model.g_net, model.f_net):
        if net is not None and not isinstance(net, MLP):
            raise TypeError("only MLP-backed models can be checkpointed")
    arrays = {}
    g_meta, g_arrays = model.g_net.to_state()
    arrays.update({f"g/{k}": v for k, v in g_arrays.items()})
    f_meta = None
    if model.f_net is not None:
        f_meta, f_arrays = model.f_net.to_state()
        arrays.update({f"f/{k}": v for k, v in f_arrays.items()})
    fixed = None
    if model.fixed_f is not None:
        ff = model.fixed_f
        if ff.kind == "oracle" and ff.name is None:
            raise TypeError("anonymous oracle FixedF cannot be checkpointed")
        fixed = {"kind": ff.kind, "lo": ff.lo, "hi": ff.hi, "name": ff.name}
    for k, v in model.trace.items():
        arrays[f"trace/{k}"] = np.asarray(v, dtype=float)
    arrays["std/x_mean"] = model.x_mean
    arrays["std/x_sd"] = model.x_sd
    arrays["std/y"] = np.array([model.y_mean, model.y_sd])
    arrays["grid/bounds"] = np.array([model.grid_lo, model.grid_hi])
    meta = {
        "format": "cnreg-checkpoint",
        "version": CHECKPOINT_VERSION,
        "g": g_meta,
        "f": f_meta,
        "fixed_f": fixed,
        "grid_points": model.grid_points,
        "config": model.config.to_dict() if model.config is not None else None,
        "collapse_warning": model.collapse_warning,
        "extras": model.extras,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    _atomic_write(path, lambda fh: fh.write(buf.getvalue()), mode="wb")


def checkpoint_load(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
        meta = json.loads(arrays.pop("meta").tobytes().decode())
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as exc:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != "cnreg-checkpoint":
        raise CorruptCheckpointError(f"{path} is not a checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {meta.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    try:
        def sub(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        g = MLP.from_state(meta["g"], sub("g/"))
        f = MLP.from_state(meta["f"], sub("f/")) if meta["f"] is not None else None
        fixed = FixedF(**meta["fixed_f"]) if meta["fixed_f"] is not None else None
        cfg = TrainingConfig.from_dict(meta["config"]) if meta["config"] is not None else None
        lo, hi = arrays["grid/bounds"]
        y_mean, y_sd = arrays["std/y"]
        model = TrainedCnModel(
            g_net=g, f_net=f, fixed_f=fixed,
            x_mean=arrays["std/x_mean"], x_sd=arrays["std/x_sd"],
            y_mean=float(y_mean), y_sd=float(y_sd),
            grid_lo=float(lo), grid_hi=float(hi), grid_points=int(meta["grid_points"]),
            config=cfg, trace=sub("trace/"),
            collapse_warning=bool(meta["collapse_warning"]), extras=meta.get("extras", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"checkpoint {path} is incomplete: {exc}") from exc
    return model
