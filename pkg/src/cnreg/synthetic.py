"""Synthetic data generators with their exact conditional distributions.

Each generator returns a :class:`SyntheticData` holding the raw arrays, a
:class:`~cnreg.data.LabeledDataset` with a random train/test split, and the
oracle (true conditional distribution) used as the theoretical optimum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, special

from .data import LabeledDataset
from .errors import NumericError, ShapeError
from .metrics import CalibrationConfig, GofBins, evaluate
from .model import CN_FULL, G_ONLY, T_G, FixedF, Interval, TrainingConfig, train

FAMILIES = ("sine1d", "hetero_gaussian", "weibull", "bivariate_gaussian", "von_mises_circular")

DEFAULT_N = {
    "sine1d": 100,
    "hetero_gaussian": 1000,
    "weibull": 1000,
    "bivariate_gaussian": 2000,
    "von_mises_circular": 5000,
}


@dataclass
class SyntheticSpec:
    family: str
    n: int | None = None
    seed: int = 0
    split_ratio: float = 0.7
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.n is None:
            self.n = DEFAULT_N[self.family]
        if self.n < 1:
            raise ValueError("n must be positive")


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    X: np.ndarray
    y: np.ndarray
    dataset: LabeledDataset
    oracle: object


def _rows(X):
    X = np.asarray(X, dtype=float)
    return X[None, :] if X.ndim == 1 else X


def _pair(values, X):
    """Match query values with feature rows (one x -> many values, or 1:1)."""
    scalar = np.ndim(values) == 0 and np.ndim(X) == 1
    v = np.atleast_1d(np.asarray(values, dtype=float))
    X = _rows(X)
    if len(X) == 1 and len(v) > 1:
        X = np.repeat(X, len(v), axis=0)
    elif len(v) == 1 and len(X) > 1:
        v = np.repeat(v, len(X))
    elif len(v) != len(X):
        raise ShapeError(f"{len(v)} values cannot pair with {len(X)} feature rows")
    return v, X, scalar


class OracleDistribution:
    """True univariate conditional distribution of ``Y | x``.

    Subclasses supply vectorized ``_cdf(z, X)`` and ``_quantile(q, X)``.
    """

    def cdf(self, z, X, **_):
        v, X, scalar = _pair(z, X)
        out = self._cdf(v, X)
        return float(out[0]) if scalar else out

    def quantile(self, q, X):
        v, X, scalar = _pair(q, X)
        out = self._quantile(v, X)
        return float(out[0]) if scalar else out

    def quantiles(self, levels, X):
        X = _rows(X)
        return np.stack([self._quantile(np.full(len(X), lv), X) for lv in levels])

    def median(self, X):
        return self.quantile(0.5, X)

    def optimal_interval(self, nominal, x):
        tail = (1 - nominal) / 2
        return Interval(self.quantile(tail, x), self.quantile(1 - tail, x), nominal)

    def sample(self, X, rng):
        X = _rows(X)
        return self._quantile(rng.uniform(size=len(X)), X)

    # predictor protocol alias used by chain links
    def quantile_from_g(self, q, X):
        return self.quantile(q, X)


class GaussianOracle(OracleDistribution):
    def __init__(self, mean_fn, sd_fn):
        self.mean_fn = mean_fn
        self.sd_fn = sd_fn

    def _cdf(self, z, X):
        return special.ndtr((z - self.mean_fn(X)) / self.sd_fn(X))

    def _quantile(self, q, X):
        return self.mean_fn(X) + self.sd_fn(X) * special.ndtri(q)


class WeibullOracle(OracleDistribution):
    """Weibull with scale ``x[:, 0]`` and shape ``x[:, 1]``."""

    def _cdf(self, z, X):
        lam, k = X[:, 0], X[:, 1]
        zp = np.maximum(z, 0.0)
        return np.where(z > 0, -np.expm1(-((zp / lam) ** k)), 0.0)

    def _quantile(self, q, X):
        lam, k = X[:, 0], X[:, 1]
        return lam * (-np.log1p(-q)) ** (1.0 / k)

    def survival(self, z, X):
        return 1.0 - self.cdf(z, X)


def _sine_mean(X):
    return np.sin(4 * np.pi * X[:, 0])


def _sine_sd(X):
    return 0.5 + 0.3 * np.sin(4 * np.pi * X[:, 0])


ORACLES = {
    "sine1d": GaussianOracle(_sine_mean, _sine_sd),
    "hetero_gaussian": GaussianOracle(lambda X: X[:, 0], lambda X: X[:, 1]),
    "weibull": WeibullOracle(),
}


def _finish(spec, X, y, oracle):
    ds = LabeledDataset.from_arrays(X, y, ratio=spec.split_ratio, seed=spec.seed)
    return SyntheticData(spec, X, y, ds, oracle)


def gen_sine1d(spec):
    """``x`` equally spaced on [-0.5, 0.5]; ``Y|x ~ N(sin 4πx, (0.5 + 0.3 sin 4πx)^2)``."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.params.get("x_range", (-0.5, 0.5))
    X = np.linspace(lo, hi, spec.n)[:, None]
    oracle = ORACLES["sine1d"]
    y = _sine_mean(X) + _sine_sd(X) * rng.standard_normal(spec.n)
    return _finish(spec, X, y, oracle)


def gen_hetero_gaussian(spec):
    """``mu ~ N(0, var 4)``, ``sigma ~ U(0.5, 2.5)``, ``x = [mu, sigma]``, ``y ~ N(mu, sigma^2)``."""
    rng = np.random.default_rng(spec.seed)
    mu_sd = math.sqrt(spec.params.get("mu_var", 4.0))
    s_lo, s_hi = spec.params.get("sigma_range", (0.5, 2.5))
    mu = rng.normal(0.0, mu_sd, spec.n)
    sigma = rng.uniform(s_lo, s_hi, spec.n)
    y = mu + sigma * rng.standard_normal(spec.n)
    return _finish(spec, np.column_stack([mu, sigma]), y, ORACLES["hetero_gaussian"])


def gen_weibull(spec):
    """``lambda ~ U(0.5, 2)``, ``k ~ U(1, 5)``, ``x = [lambda, k]``; inverse-transform draws."""
    rng = np.random.default_rng(spec.seed)
    l_lo, l_hi = spec.params.get("scale_range", (0.5, 2.0))
    k_lo, k_hi = spec.params.get("shape_range", (1.0, 5.0))
    lam = rng.uniform(l_lo, l_hi, spec.n)
    k = rng.uniform(k_lo, k_hi, spec.n)
    u = rng.uniform(size=spec.n)
    y = lam * (-np.log1p(-u)) ** (1.0 / k)
    return _finish(spec, np.column_stack([lam, k]), y, ORACLES["weibull"])


# -- two-dimensional outcomes ---------------------------------------------


def bivariate_normal_cdf(a, b, rho):
    """``P(U < a, V < b)`` for standard normals with correlation ``rho``.

    Integrates ``phi(t) * Phi((b - rho t) / sqrt(1 - rho^2))`` over ``t < a``.
    """
    if np.isneginf(a) or np.isneginf(b):
        return 0.0
    if np.isposinf(a):
        return float(special.ndtr(b))
    if np.isposinf(b):
        return float(special.ndtr(a))
    s = math.sqrt(1 - rho * rho)

    def integrand(t):
        return math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi) * special.ndtr((b - rho * t) / s)

    val, _ = integrate.quad(integrand, -np.inf, a, epsabs=1e-12, epsrel=1e-10, limit=200)
    return float(val)


class BivariateGaussianOracle:
    """``x = [mu1, mu2, sigma1, sigma2]``; outcomes correlated with ``rho``."""

    def __init__(self, rho=0.5):
        self.rho = rho
        r = rho
        self.links = [
            GaussianOracle(lambda X: X[:, 0], lambda X: X[:, 2]),
            # features [x, y1]
            GaussianOracle(
                lambda X: X[:, 1] + r * X[:, 3] * (X[:, 4] - X[:, 0]) / X[:, 2],
                lambda X: X[:, 3] * math.sqrt(1 - r * r),
            ),
        ]

    def joint_cdf(self, z1, z2, x):
        x = np.asarray(x, dtype=float)
        a = (z1 - x[0]) / x[2]
        b = (z2 - x[1]) / x[3]
        return bivariate_normal_cdf(a, b, self.rho)

    def sample(self, x, count, rng):
        x = np.asarray(x, dtype=float)
        e1, e2 = rng.standard_normal((2, count))
        y1 = x[0] + x[2] * e1
        y2 = x[1] + x[3] * (self.rho * e1 + math.sqrt(1 - self.rho**2) * e2)
        return np.column_stack([y1, y2])


def gen_bivariate_gaussian(spec):
    """``mu_j ~ N(0, var 2)``, ``sigma_j ~ U(1, 2)``, correlation 0.5."""
    rng = np.random.default_rng(spec.seed)
    rho = spec.params.get("rho", 0.5)
    mu_sd = math.sqrt(spec.params.get("mu_var", 2.0))
    mu = rng.normal(0.0, mu_sd, (spec.n, 2))
    sigma = rng.uniform(1.0, 2.0, (spec.n, 2))
    X = np.column_stack([mu[:, 0], mu[:, 1], sigma[:, 0], sigma[:, 1]])
    e1, e2 = rng.standard_normal((2, spec.n))
    y1 = mu[:, 0] + sigma[:, 0] * e1
    y2 = mu[:, 1] + sigma[:, 1] * (rho * e1 + math.sqrt(1 - rho * rho) * e2)
    return _finish(spec, X, np.column_stack([y1, y2]), BivariateGaussianOracle(rho))


def sample_von_mises(kappa, rng, mu=0.0, max_proposals=10_000):
    """Best-Fisher rejection sampler, vectorized over ``kappa``.

    Raises :class:`NumericError` if any draw is still pending after
    ``max_proposals`` rounds.
    """
    kappa = np.atleast_1d(np.asarray(kappa, dtype=float))
    if np.any(kappa <= 0):
        raise ValueError("kappa must be positive")
    tau = 1 + np.sqrt(1 + 4 * kappa**2)
    rho = (tau - np.sqrt(2 * tau)) / (2 * kappa)
    r = (1 + rho**2) / (2 * rho)
    out = np.empty_like(kappa)
    pending = np.arange(len(kappa))
    for _ in range(max_proposals):
        if pending.size == 0:
            break
        u1, u2, u3 = rng.uniform(size=(3, pending.size))
        k, rr = kappa[pending], r[pending]
        zc = np.cos(np.pi * u1)
        fv = (1 + rr * zc) / (rr + zc)
        c = k * (rr - fv)
        with np.errstate(divide="ignore", invalid="ignore"):
            ok = (c * (2 - c) - u2 > 0) | (np.log(c / u2) + 1 - c >= 0)
        theta = np.sign(u3 - 0.5) * np.arccos(np.clip(fv, -1.0, 1.0))
        out[pending[ok]] = theta[ok]
        pending = pending[~ok]
    else:
        if pending.size:
            raise NumericError("von Mises sampler exceeded its proposal budget")
    return np.mod(out + mu + np.pi, 2 * np.pi) - np.pi


def _circular_outcomes(k1, k2, rng):
    psi1 = sample_von_mises(k1, rng)
    psi2 = sample_von_mises(k2, rng)
    return np.column_stack([(np.cos(psi1) + np.cos(psi2)) / 2, (np.sin(psi1) + np.sin(psi2)) / 2])


class VonMisesCircularOracle:
    """Joint CDF by Monte Carlo: ``mc_draws`` outcomes per query ``x``, cached."""

    def __init__(self, mc_draws=1_000_000, seed=12345):
        self.mc_draws = mc_draws
        self.seed = seed
        self._draws = lru_cache(maxsize=16)(self._simulate)

    def _simulate(self, key):
        k1, k2 = key
        rng = np.random.default_rng(self.seed)
        n = self.mc_draws
        return _circular_outcomes(np.full(n, k1), np.full(n, k2), rng)

    def joint_cdf(self, z1, z2, x):
        Y = self._draws(tuple(float(v) for v in np.asarray(x)[:2]))
        return float(np.mean((Y[:, 0] < z1) & (Y[:, 1] < z2)))

    def sample(self, x, count, rng):
        x = np.asarray(x, dtype=float)
        return _circular_outcomes(np.full(count, x[0]), np.full(count, x[1]), rng)


def gen_von_mises_circular(spec):
    """``kappa_j ~ U(0.5, 2)``; outcome is the mean of two unit vectors at von Mises angles."""
    rng = np.random.default_rng(spec.seed)
    k_lo, k_hi = spec.params.get("kappa_range", (0.5, 2.0))
    kappa = rng.uniform(k_lo, k_hi, (spec.n, 2))
    Y = _circular_outcomes(kappa[:, 0], kappa[:, 1], rng)
    return _finish(spec, kappa, Y, VonMisesCircularOracle())


GENERATORS = {
    "sine1d": gen_sine1d,
    "hetero_gaussian": gen_hetero_gaussian,
    "weibull": gen_weibull,
    "bivariate_gaussian": gen_bivariate_gaussian,
    "von_mises_circular": gen_von_mises_circular,
}


def generate(spec):
    return GENERATORS[spec.family](spec)


# -- convergence study -----------------------------------------------------

STUDY_VARIANTS = ("t_g", "cn_full", "g_only_uniform_f")


def convergence_config(n, seed, **overrides):
    """Settings for the training-size study: batch 200, shrunk to ``n`` when smaller."""
    base = dict(batch_size=200, seed=seed)
    base.update(overrides)
    return TrainingConfig(**base)


def gof_vs_n_study(family="sine1d", n_grid=(100, 500, 1000, 2000, 5000), variants=STUDY_VARIANTS,
                   seed=0, n_test=1000, cfg_overrides=None, progress=None):
    """Train each variant on fresh draws of size ``n`` and score gof on a fixed test draw.

    Variants: ``t_g`` (g against the true quantile function), ``cn_full``
    (scored through g), ``cn_f`` (same joint model scored through f) and
    ``g_only_uniform_f``.  Returns rows ``(n, variant, gof_hat)``.
    """
    n_grid = list(n_grid)
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid must be increasing")
    unknown = set(variants) - {"t_g", "cn_full", "cn_f", "g_only_uniform_f"}
    if unknown:
        raise ValueError(f"unknown study variants {sorted(unknown)}")
    cfg_overrides = dict(cfg_overrides or {})
    oracle = ORACLES[family]
    test = generate(SyntheticSpec(family, n=n_test, seed=seed + 10_000))
    rows = []
    for i, n in enumerate(n_grid):
        data = generate(SyntheticSpec(family, n=n, seed=seed + i))
        ds = LabeledDataset.from_arrays(data.X, data.y, train_idx=np.arange(n))
        bins = GofBins.from_outcomes(data.y)
        joint = None
        for variant in variants:
            cfg = convergence_config(n, seed + i, **cfg_overrides)
            if variant == "t_g":
                cfg.variant = T_G
                model, source = train(ds, cfg, FixedF.oracle(oracle.quantile, name=family)), "from_g"
            elif variant == "g_only_uniform_f":
                cfg.variant = G_ONLY
                model, source = train(ds, cfg), "from_g"
            else:
                if joint is None:
                    joint = train(ds, cfg)
                model = joint
                source = "from_g" if variant == "cn_full" else "from_f"
            gof = evaluate(model.predictor(source), test.X, test.y, bins).gof_hat
            rows.append((n, variant, gof))
            if progress:
                progress(n, variant, gof)
    return rows
