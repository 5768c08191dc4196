"""Small feed-forward network engine: eLU layers, batch normalization, ADAM.

Layers compute ``act(a @ W + b)`` and, when normalization is enabled, normalize
the activations afterwards.  Two normalization flavours exist: the usual one
with a learned scale/shift, and a fixed-affine one whose scale and shift are
constants (used to pin the first two moments of an output).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict

import numpy as np

from .errors import DegenerateBatchError, DomainError, NumericError, ShapeError, StateError

ELU = "elu"
IDENTITY = "identity"

NO_NORM = "none"
LEARNABLE_AFFINE = "learnable_affine"
FIXED_AFFINE = "fixed_affine"

_ACTIVATIONS = (ELU, IDENTITY)
_NORMS = (NO_NORM, LEARNABLE_AFFINE, FIXED_AFFINE)

# Second moment of logit(q) for q ~ Uniform(0, 1), i.e. pi^2 / 3.
LOGIT_UNIFORM_SECOND_MOMENT = np.pi**2 / 3


@dataclass(frozen=True)
class LayerSpec:
    input_width: int
    output_width: int
    activation: str = ELU
    normalization: str = NO_NORM
    shift: float = 0.0
    scale: float = 1.0
    eps: float = 1e-5

    def __post_init__(self):
        if self.input_width < 1 or self.output_width < 1:
            raise ValueError("layer widths must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.normalization not in _NORMS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.normalization == FIXED_AFFINE and not self.scale > 0:
            raise ValueError("fixed_affine scale must be positive")


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=float)
    if np.any(~(p > 0)) or np.any(~(p < 1)):
        raise DomainError("logit is only defined on the open interval (0, 1)")
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def softplus(z):
    z = np.asarray(z, dtype=float)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def elu(z):
    z = np.asarray(z, dtype=float)
    if z.ndim == 0:
        return float(np.expm1(z)) if z < 0 else float(z)
    out = np.expm1(np.minimum(z, 0.0))
    return np.maximum(out, z, out=out)


class MLP:
    """Multilayer perceptron with per-layer activation and normalization.

    Parameters live in ``params`` keyed ``W{i}``, ``b{i}`` and, for learnable
    normalization, ``gamma{i}``/``beta{i}``.  Running statistics for every
    normalized layer live in ``running``.
    """

    def __init__(self, layers, rng=None, momentum=0.99):
        layers = list(layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.output_width != nxt.input_width:
                raise ShapeError(
                    f"layer widths do not chain: {prev.output_width} -> {nxt.input_width}"
                )
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        rng = np.random.default_rng(rng)
        self.layers = layers
        self.momentum = momentum
        self.mode = "train"
        self.params = {}
        self.running = {}
        self.norm_active = [spec.normalization != NO_NORM for spec in layers]
        for i, spec in enumerate(layers):
            std = np.sqrt(2.0 / spec.input_width)
            self.params[f"W{i}"] = rng.normal(0.0, std, (spec.input_width, spec.output_width))
            self.params[f"b{i}"] = np.zeros(spec.output_width)
            if spec.normalization == LEARNABLE_AFFINE:
                self.params[f"gamma{i}"] = np.ones(spec.output_width)
                self.params[f"beta{i}"] = np.zeros(spec.output_width)
            if spec.normalization != NO_NORM:
                self.running[i] = {
                    "mean": np.zeros(spec.output_width),
                    "var": np.ones(spec.output_width),
                    "fresh": True,
                }
        self._cache = None

    @classmethod
    def build(cls, input_width, hidden, output_width=1, *, hidden_norm=LEARNABLE_AFFINE,
              output_norm=None, rng=None, momentum=0.99):
        """Stack eLU hidden layers and a linear output layer.

        ``output_norm`` is ``None`` or a ``(shift, scale)`` pair selecting a
        fixed-affine normalization on the output.
        """
        widths = [input_width, *hidden]
        layers = [
            LayerSpec(w_in, w_out, ELU, hidden_norm)
            for w_in, w_out in zip(widths, widths[1:])
        ]
        if output_norm is None:
            layers.append(LayerSpec(widths[-1], output_width, IDENTITY))
        else:
            shift, scale = output_norm
            layers.append(
                LayerSpec(widths[-1], output_width, IDENTITY, FIXED_AFFINE,
                          shift=shift, scale=scale, eps=1e-8)
            )
        return cls(layers, rng=rng, momentum=momentum)

    @property
    def input_width(self):
        return self.layers[0].input_width

    @property
    def output_width(self):
        return self.layers[-1].output_width

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def set_norm_active(self, index, active):
        if self.layers[index].normalization == NO_NORM:
            raise ValueError(f"layer {index} has no normalization")
        self.norm_active[index] = bool(active)

    def reset_running_stats(self, index):
        """Make the next train-mode batch overwrite (not average into) the stats."""
        self.running[index]["fresh"] = True

    def forward(self, x, update_stats=True, keep_cache=True):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise ShapeError(f"expected input of shape (n, {self.input_width}), got {x.shape}")
        training = self.mode == "train"
        if training and x.shape[0] < 2 and any(self.norm_active):
            raise DegenerateBatchError("batch normalization in train mode needs n >= 2")
        if not training and not keep_cache:
            return self._infer(x)
        cache = []
        a = x
        for i, spec in enumerate(self.layers):
            z = a @ self.params[f"W{i}"] + self.params[f"b{i}"]
            h = elu(z) if spec.activation == ELU else z
            entry = {"a": a, "z": z, "h": h}
            if self.norm_active[i]:
                stats = self.running[i]
                if training:
                    mean = h.mean(axis=0)
                    centered = h - mean
                    var = np.mean(centered * centered, axis=0)
                    if update_stats:
                        if stats["fresh"]:
                            stats["mean"] = mean.copy()
                            stats["var"] = var.copy()
                            stats["fresh"] = False
                        else:
                            m = self.momentum
                            stats["mean"] = m * stats["mean"] + (1 - m) * mean
                            stats["var"] = m * stats["var"] + (1 - m) * var
                else:
                    mean, var = stats["mean"], stats["var"]
                    centered = h - mean
                inv = 1.0 / np.sqrt(var + spec.eps)
                xhat = centered * inv
                if spec.normalization == LEARNABLE_AFFINE:
                    out = xhat * self.params[f"gamma{i}"] + self.params[f"beta{i}"]
                else:
                    out = xhat * spec.scale + spec.shift
                entry.update(xhat=xhat, inv=inv, batch_stats=training)
                a = out
            else:
                a = h
            cache.append(entry)
        self._cache = cache if keep_cache else None
        return a

    def _infer(self, x):
        # eval-mode pass with each normalization folded into one affine map
        a = x
        for i, spec in enumerate(self.layers):
            a = a @ self.params[f"W{i}"]
            a += self.params[f"b{i}"]
            if spec.activation == ELU:
                neg = np.minimum(a, 0.0)
                np.expm1(neg, out=neg)
                np.maximum(a, neg, out=a)
            if self.norm_active[i]:
                stats = self.running[i]
                inv = 1.0 / np.sqrt(stats["var"] + spec.eps)
                if spec.normalization == LEARNABLE_AFFINE:
                    scale = self.params[f"gamma{i}"] * inv
                    shift = self.params[f"beta{i}"] - stats["mean"] * scale
                else:
                    scale = spec.scale * inv
                    shift = spec.shift - stats["mean"] * scale
                a *= scale
                a += shift
        self._cache = None
        return a

    def __call__(self, x):
        return self.forward(x)

    def backward(self, grad_out, need_input_grad=True):
        """Backpropagate ``grad_out`` (dLoss/dOutput) through the last forward pass.

        Returns ``(grads, grad_input)``; ``grad_input`` is ``None`` when
        ``need_input_grad`` is false.  Fixed-affine layers contribute no
        parameter gradients.  The forward cache is consumed.
        """
        if self._cache is None:
            raise StateError("backward called without a preceding forward pass")
        cache, self._cache = self._cache, None
        d = np.asarray(grad_out, dtype=float)
        if d.shape != (cache[-1]["a"].shape[0], self.output_width):
            raise ShapeError(f"output gradient has shape {d.shape}")
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            spec = self.layers[i]
            entry = cache[i]
            if "xhat" in entry:
                xhat, inv = entry["xhat"], entry["inv"]
                if spec.normalization == LEARNABLE_AFFINE:
                    grads[f"gamma{i}"] = (d * xhat).sum(axis=0)
                    grads[f"beta{i}"] = d.sum(axis=0)
                    dxhat = d * self.params[f"gamma{i}"]
                else:
                    dxhat = d * spec.scale
                if entry["batch_stats"]:
                    d = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
                else:
                    d = dxhat * inv
            if spec.activation == ELU:
                # elu'(z) = 1 for z > 0 and e^z = elu(z) + 1 otherwise
                d = d * np.minimum(entry["h"] + 1.0, 1.0)
            grads[f"W{i}"] = entry["a"].T @ d
            grads[f"b{i}"] = d.sum(axis=0)
            if i > 0 or need_input_grad:
                d = d @ self.params[f"W{i}"].T
        return grads, (d if need_input_grad else None)

    def fingerprint(self):
        h = hashlib.sha256()
        for key in sorted(self.params):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.params[key]).tobytes())
        return h.hexdigest()

    # -- persistence -----------------------------------------------------

    def to_state(self):
        """Return ``(meta, arrays)``: JSON-able metadata and named float arrays."""
        meta = {
            "layers": [asdict(spec) for spec in self.layers],
            "momentum": self.momentum,
            "mode": self.mode,
            "norm_active": list(self.norm_active),
            "fresh": {str(i): bool(s["fresh"]) for i, s in self.running.items()},
        }
        arrays = dict(self.params)
        for i, s in self.running.items():
            arrays[f"running_mean{i}"] = s["mean"]
            arrays[f"running_var{i}"] = s["var"]
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        net = cls([LayerSpec(**spec) for spec in meta["layers"]], rng=0,
                  momentum=meta["momentum"])
        for key in net.params:
            net.params[key] = np.array(arrays[key], dtype=float)
        for i, s in net.running.items():
            s["mean"] = np.array(arrays[f"running_mean{i}"], dtype=float)
            s["var"] = np.array(arrays[f"running_var{i}"], dtype=float)
            s["fresh"] = meta["fresh"][str(i)]
        net.norm_active = list(meta["norm_active"])
        net.mode = meta["mode"]
        return net


class Adam:
    """ADAM with bias correction; updates parameter dicts in place."""

    def __init__(self, step_size, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if not step_size > 0:
            raise ValueError("step size must be positive")
        self.step_size = step_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = {}
        self.second_moment = {}

    def update(self, params, grads):
        for key, g in grads.items():
            if key not in params:
                raise ShapeError(f"gradient for unknown parameter {key!r}")
            if g.shape != params[key].shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[key].shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {key!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for key, g in grads.items():
            m = self.first_moment.get(key)
            if m is None:
                m = self.first_moment[key] = np.zeros_like(g)
                self.second_moment[key] = np.zeros_like(g)
            v = self.second_moment[key]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[key] -= self.step_size * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
