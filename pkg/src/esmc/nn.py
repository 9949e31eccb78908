"""Dense-network substrate: layers, layer stacks with reverse-mode gradients,
the AdagradDecay optimizer with linear warm-up, and a finite-difference checker.

Everything runs in float64 so gradients can be verified at desk scale; the
forward pass also accepts ``np.longdouble`` parameters for finite-difference
oracles.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, NonFiniteGradientError, UsageError

DEFAULT_LEAKY_SLOPE = 0.01


class Activation(str, enum.Enum):
    LEAKY_RELU = "leaky_relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


def as_float(x):
    x = np.asarray(x)
    return x if x.dtype in (np.float64, np.longdouble) else x.astype(np.float64)


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * as_float(x)))


def leaky_relu(x, slope=DEFAULT_LEAKY_SLOPE):
    x = as_float(x)
    return np.where(x >= 0.0, x, slope * x)


@dataclass
class DenseLayer:
    """One affine map followed by an activation; ``weight`` is ``[out, in]``."""

    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.LEAKY_RELU
    slope: float = DEFAULT_LEAKY_SLOPE

    def __post_init__(self):
        self.weight = as_float(self.weight)
        self.bias = as_float(self.bias)
        self.activation = Activation(self.activation)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )
        if not 0.0 < self.slope < 1.0:
            raise ConfigError(f"LeakyReLU slope must lie in (0, 1), got {self.slope}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_dim, out_dim, activation, rng, slope=DEFAULT_LEAKY_SLOPE):
        limit = math.sqrt(6.0 / (in_dim + out_dim))
        weight = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        return cls(weight, np.zeros(out_dim), activation, slope)

    def activate(self, z):
        if self.activation is Activation.LEAKY_RELU:
            return leaky_relu(z, self.slope)
        if self.activation is Activation.SIGMOID:
            return sigmoid(z)
        return z

    def activation_grad(self, z, out):
        if self.activation is Activation.LEAKY_RELU:
            return np.where(z >= 0.0, 1.0, self.slope)
        if self.activation is Activation.SIGMOID:
            return out * (1.0 - out)
        return np.ones_like(z)


def dense_forward(x, layer: DenseLayer):
    """Apply ``layer`` to a vector ``[in]`` or a batch ``[batch, in]``."""
    x = as_float(x)
    if x.shape[-1] != layer.in_dim:
        raise ConfigError(f"input length {x.shape[-1]} != layer in-dim {layer.in_dim}")
    return layer.activate(x @ layer.weight.T + layer.bias)


class MLP:
    """A stack of dense layers that caches its last forward pass for ``backward``."""

    def __init__(self, layers):
        self.layers = list(layers)
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ConfigError(
                    f"layer output {prev.out_dim} does not feed next input {nxt.in_dim}"
                )
        self._cache = None

    @classmethod
    def build(cls, in_dim, hidden, out_dim, rng, out_activation=Activation.SIGMOID,
              slope=DEFAULT_LEAKY_SLOPE):
        dims = [in_dim, *hidden, out_dim]
        layers = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            act = out_activation if i == len(dims) - 2 else Activation.LEAKY_RELU
            layers.append(DenseLayer.init(a, b, act, rng, slope))
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def shapes(self):
        return [(l.weight.shape, l.bias.shape) for l in self.layers]

    def forward(self, x):
        x = as_float(x)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[1] != self.in_dim:
            raise ConfigError(f"input length {h.shape[1]} != network in-dim {self.in_dim}")
        trace = []
        for layer in self.layers:
            z = h @ layer.weight.T + layer.bias
            out = layer.activate(z)
            trace.append((h, z, out))
            h = out
        self._cache = (trace, squeeze)
        return h[0] if squeeze else h

    def backward(self, output_grad):
        """Gradients of ``sum(output * output_grad)`` w.r.t. parameters and input.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` a list of
        ``(d_weight, d_bias)`` aligned with ``self.layers``.
        """
        if self._cache is None:
            raise UsageError("backward called without a cached forward pass")
        trace, squeeze = self._cache
        g = as_float(output_grad)
        if squeeze:
            g = g[None, :]
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            h, z, out = trace[i]
            dz = g * layer.activation_grad(z, out)
            grads[i] = (dz.T @ h, dz.sum(axis=0))
            g = dz @ layer.weight
        return grads, (g[0] if squeeze else g)

    def clear_cache(self):
        self._cache = None

    def named_parameters(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight
            out[f"{prefix}.{i}.bias"] = layer.bias
        return out

    @staticmethod
    def named_grads(prefix, grads):
        out = {}
        for i, (dw, db) in enumerate(grads):
            out[f"{prefix}.{i}.weight"] = dw
            out[f"{prefix}.{i}.bias"] = db
        return out

    def flat_parameters(self):
        return np.concatenate(
            [np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers]
        )

    def unflatten(self, flat):
        """Split a flat vector laid out like ``flat_parameters`` into per-layer pieces."""
        out, pos = [], 0
        for layer in self.layers:
            nw = layer.weight.size
            w = flat[pos:pos + nw].reshape(layer.weight.shape)
            pos += nw
            b = flat[pos:pos + layer.out_dim]
            pos += layer.out_dim
            out.append((w, b))
        return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class SparseRows:
    """Row-sparse gradient for an embedding table: ``values[i]`` belongs to ``rows[i]``."""

    rows: np.ndarray
    values: np.ndarray
    n_rows: int

    def to_dense(self):
        dense = np.zeros((self.n_rows, self.values.shape[1]))
        np.add.at(dense, self.rows, self.values)
        return dense


@dataclass
class LrSchedule:
    base_lr: float = 0.005
    warmup_steps: int = 1000

    def __post_init__(self):
        if self.base_lr < 0:
            raise ConfigError("learning rate must be nonnegative")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")

    def lr(self, step):
        return self.base_lr * min(1.0, (step + 1) / max(1, self.warmup_steps))


@dataclass
class AdagradState:
    decay: float = 1e-4
    epsilon: float = 1e-8
    step_count: int = 0
    accumulator: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ConfigError(f"decay must lie in [0, 1], got {self.decay}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


def _check_finite(grads):
    for name, g in grads.items():
        vals = g.values if isinstance(g, SparseRows) else g
        if not np.all(np.isfinite(vals)):
            raise NonFiniteGradientError(name)


def adagrad_step(params: Mapping[str, np.ndarray], grads, state: AdagradState,
                 schedule: LrSchedule):
    """One AdagradDecay update, applied in place.

    ``acc <- (1 - decay) * acc + g**2`` (plain Adagrad when ``decay == 0``), then
    ``param <- param - lr(t) * g / (sqrt(acc) + eps)``. Gradients given as
    :class:`SparseRows` touch only the listed rows of both parameter and
    accumulator; repeated row ids are summed before the update.
    """
    _check_finite(grads)
    lr = schedule.lr(state.step_count)
    keep = 1.0 - state.decay
    for name, g in grads.items():
        p = params[name]
        acc = state.accumulator.get(name)
        if acc is None:
            acc = state.accumulator[name] = np.zeros_like(p)
        if isinstance(g, SparseRows):
            rows, inverse = np.unique(g.rows, return_inverse=True)
            summed = np.zeros((rows.size, g.values.shape[1]))
            np.add.at(summed, inverse, g.values)
            a = acc[rows]
            if state.decay > 0:
                a *= keep
            a += summed * summed
            acc[rows] = a
            p[rows] -= lr * summed / (np.sqrt(a) + state.epsilon)
        else:
            if p.shape != g.shape:
                raise ConfigError(f"gradient shape {g.shape} != parameter {name} {p.shape}")
            if state.decay > 0:
                acc *= keep
            acc += g * g
            p -= lr * g / (np.sqrt(acc) + state.epsilon)
    state.step_count += 1
    return params, state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict
    tol: float

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error < self.tol

    def __str__(self):
        worst = sorted(self.errors.items(), key=lambda kv: -kv[1])[:3]
        body = ", ".join(f"{k}={v:.2e}" for k, v in worst)
        return f"grad check max rel err {self.max_error:.2e} (tol {self.tol:g}): {body}"


def grad_check(loss_fn: Callable, params: Mapping[str, np.ndarray], h=1e-5, tol=1e-4,
               max_entries=None, rng=None, analytic=None) -> GradCheckReport:
    """Compare analytic gradients with central differences, parameter group by group.

    ``loss_fn(params)`` must return ``(loss, grads)``; ``params`` is perturbed in
    place and restored. ``analytic`` overrides the gradients ``loss_fn``
    reports, e.g. float64 gradients checked against differences of an
    extended-precision copy. ``max_entries`` caps the coordinates probed per
    group (sampled with ``rng``).
    """
    if analytic is None:
        _, analytic = loss_fn(params)
    rng = rng if rng is not None else np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        g = analytic.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif isinstance(g, SparseRows):
            g = g.to_dense()
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = rng.choice(p.size, size=max_entries, replace=False)
        worst = 0.0
        for k in flat_idx:
            idx = np.unravel_index(k, p.shape)
            orig = p[idx]
            p[idx] = orig + h
            up = loss_fn(params)[0]
            p[idx] = orig - h
            down = loss_fn(params)[0]
            p[idx] = orig
            numeric = (up - down) / (2 * h)
            a = g[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, float(err))
        errors[name] = worst
    return GradCheckReport(errors, tol)
