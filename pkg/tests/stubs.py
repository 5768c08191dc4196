"""Analytic stand-ins for trained networks."""

import numpy as np
from scipy import special, stats

from cnreg.model import CallableNet, FixedF, TrainedCnModel


def gaussian_logit(z, mean, sd):
    t = (z - mean) / sd
    return special.log_ndtr(t) - special.log_ndtr(-t)


def stub_model(g_fn, p=1, lo=-8.0, hi=8.0, points=1024, f_net=None, fixed_f=None):
    """Model in raw units (identity standardization) around a logit function of [z, x]."""
    if f_net is None and fixed_f is None:
        fixed_f = FixedF.uniform(lo, hi)
    return TrainedCnModel(
        g_net=CallableNet(g_fn, p + 1), f_net=f_net, fixed_f=fixed_f,
        x_mean=np.zeros(p), x_sd=np.ones(p), y_mean=0.0, y_sd=1.0,
        grid_lo=lo, grid_hi=hi, grid_points=points,
    )


def gaussian_stub(sd=1.0, **kw):
    """g(z, x) = Phi((z - x_1) / sd)."""
    return stub_model(lambda a: gaussian_logit(a[:, 0], a[:, 1], sd), **kw)


def weibull_stub(lam=1.0, k=1.0, **kw):
    def fn(a):
        p = np.clip(stats.weibull_min.cdf(a[:, 0], k, scale=lam), 1e-300, 1 - 1e-16)
        return np.log(p) - np.log1p(-p)

    return stub_model(fn, lo=0.0, hi=10.0, **kw)


class QuantileNet:
    """Frozen quantile function of [q, x] with the forward/backward interface f_loss needs."""

    mode = "eval"
    input_width = 2

    def __init__(self, fn):
        self.fn = fn
        self.params = {}

    def forward(self, x, update_stats=True, keep_cache=True):
        return np.asarray(self.fn(np.asarray(x)), dtype=float).reshape(-1, 1)

    def backward(self, grad_out, need_input_grad=True):
        return {}, None

    def train(self):
        return self

    def eval(self):
        return self
