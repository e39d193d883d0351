"""Digamma, trigamma and log-gamma on positive reals (vectorized).

Both polygamma functions shift the argument upward with the recurrence until
it reaches 6, then apply the asymptotic series truncated after six terms.
Accuracy is better than 1e-10 everywhere on (0, inf).
"""

import math

import numpy as np

from dreg.errors import NumericError

_SHIFT_TO = 6.0

# Bernoulli-number coefficients B_2k / (2k)
_DIGAMMA_SERIES = (1.0 / 12, -1.0 / 120, 1.0 / 252, -1.0 / 240, 1.0 / 132, -691.0 / 32760)
# Bernoulli numbers B_2k for the trigamma series sum B_2k / x^(2k+1)
_TRIGAMMA_SERIES = (1.0 / 6, -1.0 / 30, 1.0 / 42, -1.0 / 30, 5.0 / 66, -691.0 / 2730)


def _check(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise NumericError("polygamma functions are only defined here for finite x > 0")
    return x


def _shift(x):
    """Return (shifted x >= 6, number of unit steps taken) elementwise."""
    steps = np.maximum(np.ceil(_SHIFT_TO - x), 0.0)
    return x + steps, steps.astype(np.int64)


def digamma(x):
    x = _check(x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    xs, steps = _shift(x)
    acc = np.zeros_like(x)
    for k in range(int(steps.max(initial=0))):
        live = steps > k
        acc[live] -= 1.0 / (x[live] + k)
    inv2 = 1.0 / (xs * xs)
    series = np.zeros_like(xs)
    for c in reversed(_DIGAMMA_SERIES):
        series = (series + c) * inv2
    out = np.log(xs) - 0.5 / xs - series + acc
    return float(out[0]) if scalar else out


def trigamma(x):
    x = _check(x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    xs, steps = _shift(x)
    acc = np.zeros_like(x)
    for k in range(int(steps.max(initial=0))):
        live = steps > k
        acc[live] += 1.0 / (x[live] + k) ** 2
    inv = 1.0 / xs
    inv2 = inv * inv
    series = np.zeros_like(xs)
    for c in reversed(_TRIGAMMA_SERIES):
        series = (series + c) * inv2
    out = inv + 0.5 * inv2 + series * inv + acc
    return float(out[0]) if scalar else out


_lgamma = np.vectorize(math.lgamma, otypes=[np.float64])


def lgamma(x):
    x = _check(x)
    out = _lgamma(x)
    return float(out) if np.ndim(out) == 0 else out
