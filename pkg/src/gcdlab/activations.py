"""Activation functions for the adapter bottleneck, with exact derivatives.

Each kind is identified by a lowercase tag plus optional parameter, the same
form used in config files: ``linear``, ``relu``, ``leaky_relu:0.5``,
``threshold_relu:-1``, ``elu:2``, ``sigmoid``, ``tanh``, ``swish``, ``gelu``.

Conventions that matter for reproducibility:
  - kinked kinds take the right-limit derivative at their kink
    (f'(0)=1 for relu/leaky_relu/elu, f'(t)=1 for threshold_relu);
  - gelu is the erf form, not the tanh approximation;
  - sparsity counts exact zeros (|v| <= 1e-12), because the mechanism under
    study is hard zeroing of negative pre-activations, not small values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import ConfigError, DegenerateInputError, NumericError
from .tensor import Tensor, active_tape, unary_from_values

SPARSITY_TOL = 1e-12

_PARAMETRIC = {"leaky_relu": 0.01, "threshold_relu": 0.0, "elu": 1.0}
_PLAIN = ("linear", "relu", "sigmoid", "tanh", "swish", "gelu")


@dataclass(frozen=True)
class ActivationKind:
    tag: str
    param: float | None = None

    def __post_init__(self):
        if self.tag in _PLAIN:
            if self.param is not None:
                raise ConfigError(f"{self.tag} takes no parameter")
        elif self.tag == "leaky_relu":
            if self.param is None or not 0.0 <= self.param <= 1.0:
                raise ConfigError(f"leaky_relu slope must be in [0, 1], got {self.param}")
        elif self.tag == "threshold_relu":
            if self.param is None or not np.isfinite(self.param):
                raise ConfigError(f"threshold_relu threshold must be finite, got {self.param}")
        elif self.tag == "elu":
            if self.param is None or self.param < 0.0:
                raise ConfigError(f"elu slope must be >= 0, got {self.param}")
        else:
            raise ConfigError(f"unknown activation tag {self.tag!r}")

    @classmethod
    def parse(cls, text):
        """Parse a config name like ``leaky_relu:0.5`` or ``linear``."""
        text = text.strip().lower()
        if ":" in text:
            tag, raw = text.split(":", 1)
            try:
                return cls(tag, float(raw))
            except ValueError:
                raise ConfigError(f"bad activation parameter in {text!r}") from None
        if text in _PARAMETRIC:
            return cls(text, _PARAMETRIC[text])
        return cls(text)

    def spec_string(self):
        if self.param is None:
            return self.tag
        return f"{self.tag}:{self.param:g}"


LINEAR = ActivationKind("linear")
RELU = ActivationKind("relu")
GELU = ActivationKind("gelu")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def values(kind, x):
    """Forward values on a plain ndarray."""
    x = np.asarray(x, dtype=np.float64)
    tag, p = kind.tag, kind.param
    if tag == "linear":
        return x.copy()
    if tag == "relu":
        return np.where(x >= 0.0, x, 0.0)
    if tag == "leaky_relu":
        return np.where(x >= 0.0, x, p * x)
    if tag == "threshold_relu":
        return np.where(x >= p, x, 0.0)
    if tag == "elu":
        out = x.copy()
        neg = x < 0.0
        out[neg] = p * np.expm1(x[neg])
        return out
    if tag == "sigmoid":
        return _sigmoid(x)
    if tag == "tanh":
        return np.tanh(x)
    if tag == "swish":
        return x * _sigmoid(x)
    if tag == "gelu":
        return kernels.gelu_value(x)
    raise ConfigError(f"unknown activation tag {tag!r}")


def derivative(kind, x):
    """Exact elementwise derivative on a plain ndarray."""
    x = np.asarray(x, dtype=np.float64)
    tag, p = kind.tag, kind.param
    if tag == "linear":
        return np.ones_like(x)
    if tag == "relu":
        return np.where(x >= 0.0, 1.0, 0.0)
    if tag == "leaky_relu":
        return np.where(x >= 0.0, 1.0, p)
    if tag == "threshold_relu":
        return np.where(x >= p, 1.0, 0.0)
    if tag == "elu":
        out = np.ones_like(x)
        neg = x < 0.0
        out[neg] = p * np.exp(x[neg])
        return out
    if tag == "sigmoid":
        s = _sigmoid(x)
        return s * (1.0 - s)
    if tag == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if tag == "swish":
        s = _sigmoid(x)
        return s + x * s * (1.0 - s)
    if tag == "gelu":
        phi = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * phi
    raise ConfigError(f"unknown activation tag {tag!r}")


def values_and_derivative(kind, x):
    """Forward values and exact derivative in one pass (shares the expensive
    erf/exp subexpressions; the hot path of every taped activation)."""
    x = np.asarray(x, dtype=np.float64)
    tag, p = kind.tag, kind.param
    if tag == "gelu":
        return kernels.gelu_value_and_derivative(x)
    if tag == "sigmoid":
        s = _sigmoid(x)
        return s, s * (1.0 - s)
    if tag == "swish":
        s = _sigmoid(x)
        return x * s, s + x * s * (1.0 - s)
    if tag == "tanh":
        t = np.tanh(x)
        return t, 1.0 - t * t
    if tag == "elu":
        out = x.copy()
        der = np.ones_like(x)
        neg = x < 0.0
        e = np.expm1(x[neg])
        out[neg] = p * e
        der[neg] = p * (e + 1.0)
        return out, der
    return values(kind, x), derivative(kind, x)


def apply(kind, x):
    """Apply an activation to a Tensor, recording its exact derivative."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"activation {kind.tag}: non-finite input")
    if active_tape() is None or not x.requires_grad:
        return Tensor(values(kind, x.data))
    val, der = values_and_derivative(kind, x.data)
    return unary_from_values(x, val, der)


def sparsity(x):
    """Fraction of exactly-zero entries (|v| <= 1e-12)."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.size == 0:
        raise DegenerateInputError("sparsity of an empty tensor")
    return float(np.mean(np.abs(data) <= SPARSITY_TOL))


def max_abs_difference(kind_a, kind_b, x):
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return float(np.max(np.abs(values(kind_a, data) - values(kind_b, data))))


@dataclass
class EquivalenceReport:
    checks: list  # (description, offending_kind, max_abs_diff, ok)

    @property
    def ok(self):
        return all(c[3] for c in self.checks)

    @property
    def failures(self):
        return [c for c in self.checks if not c[3]]


def limit_equivalences(x, tol=1e-12):
    """Check the degenerate-parameter identities of the bottleneck activations.

    leaky_relu(0) == relu, leaky_relu(1) == linear, threshold_relu(0) == relu,
    elu(0) == relu, all elementwise within tol on the given input.
    """
    pairs = [
        ("leaky_relu:0 == relu", ActivationKind("leaky_relu", 0.0), RELU),
        ("leaky_relu:1 == linear", ActivationKind("leaky_relu", 1.0), LINEAR),
        ("threshold_relu:0 == relu", ActivationKind("threshold_relu", 0.0), RELU),
        ("elu:0 == relu", ActivationKind("elu", 0.0), RELU),
    ]
    checks = []
    for desc, a, b in pairs:
        diff = max_abs_difference(a, b, x)
        checks.append((desc, a.spec_string(), diff, diff <= tol))
    return EquivalenceReport(checks)
