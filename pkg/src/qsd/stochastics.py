"""Seeded random streams and the uniform/normal/gamma/beta/Bernoulli samplers.

Every variate is derived from the raw 64-bit output of a Philox counter-based
generator keyed by ``(seed, stream_id)``, using only integer shifts and
elementary floating point operations, so a stream replays identically on any
platform with IEEE doubles.

Beta variates are formed as the quotient of two independent gamma variates.
The gamma variates are kept in log space throughout, which avoids the
underflow that otherwise occurs for shapes well below one (shape 0.05 yields
values below 1e-300 with appreciable probability).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ParameterError

_TWO_POW_M53 = 2.0**-53
# largest double below one; beta variates are clamped into [_TINY, _ONE_MINUS]
_ONE_MINUS = 1.0 - _TWO_POW_M53
_TINY = np.finfo(np.float64).tiny


class RngStream:
    """A single-owner random stream identified by ``(seed, stream_id)``.

    Streams with different ids but the same seed share no state.  A stream
    must not be used from more than one thread at a time.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or seed >= 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        if stream_id < 0:
            raise ParameterError(f"stream_id must be non-negative, got {stream_id}")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self._bitgen = np.random.Philox(seq)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def derive(self, stream_id: int) -> RngStream:
        """Fresh stream sharing this stream's seed but with another id."""
        return RngStream(self.seed, stream_id)

    @property
    def state(self) -> dict:
        """Snapshot of the generator state (for equality checks only)."""
        return self._bitgen.state

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n)

    def uniform(self, size=None):
        """Uniform variates on [0, 1) with 53 random bits each."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def normal(self, size=None):
        """Standard normal variates by the Box-Muller transform."""
        n = 1 if size is None else int(np.prod(size))
        half = (n + 1) // 2
        u = self.uniform(2 * half)
        radius = np.sqrt(-2.0 * np.log1p(-u[:half]))
        theta = (2.0 * math.pi) * u[half:]
        z = np.concatenate((radius * np.cos(theta), radius * np.sin(theta)))[:n]
        if size is None:
            return float(z[0])
        return z.reshape(size)


def _count(size) -> int:
    return 1 if size is None else int(np.prod(size))


def _shaped(values: np.ndarray, size):
    if size is None:
        return values[0].item()
    return values.reshape(size)


def _check_positive(name: str, value: float) -> float:
    value = float(value)
    if not (value > 0.0 and math.isfinite(value)):
        raise ParameterError(f"{name} must be a finite positive number, got {value}")
    return value


def uniform(stream: RngStream, size=None):
    """Next uniform variate(s) on [0, 1) from ``stream``."""
    return stream.uniform(size)


def log_gamma_variates(stream: RngStream, shape: float, n: int) -> np.ndarray:
    """Natural logs of ``n`` independent Gamma(shape, 1) variates.

    Marsaglia-Tsang squeeze/rejection for shape >= 1.  For shape < 1 a
    Gamma(shape + 1) variate is multiplied by U**(1/shape), which in log space
    is an addition and therefore cannot underflow.
    """
    shape = _check_positive("shape", shape)
    boosted = shape < 1.0
    a = shape + 1.0 if boosted else shape
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    log_d = math.log(d)

    out = np.empty(n, dtype=np.float64)
    filled = 0
    while filled < n:
        m = n - filled
        x = stream.normal(m)
        u = stream.uniform(m)
        v = 1.0 + c * x
        v = v * v * v
        positive = v > 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            log_v = np.log(v)
            x2 = x * x
            accept = positive & (
                (u < 1.0 - 0.0331 * x2 * x2)
                | (np.log(u) < 0.5 * x2 + d * (1.0 - v + log_v))
            )
        k = int(accept.sum())
        out[filled:filled + k] = log_d + log_v[accept]
        filled += k

    if boosted:
        # 1 - u lies in (0, 1], so the log is finite
        out += np.log1p(-stream.uniform(n)) / shape
    return out


def gamma_sample(stream: RngStream, shape: float, size=None):
    """Gamma(shape, unit scale) variate(s); valid for every shape > 0."""
    logs = log_gamma_variates(stream, shape, _count(size))
    return _shaped(np.maximum(np.exp(logs), _TINY), size)


def beta_from_gammas(gamma_draw, lambda_draw):
    """Combine two gamma variates into a beta variate, g / (g + l)."""
    g = np.asarray(gamma_draw, dtype=np.float64)
    lam = np.asarray(lambda_draw, dtype=np.float64)
    if np.any(g <= 0) or np.any(lam <= 0):
        raise ParameterError("gamma variates must be strictly positive")
    p = g / (g + lam)
    return p.item() if p.ndim == 0 else p


def beta_from_log_gammas(log_gamma, log_lambda) -> np.ndarray:
    """Same quotient as :func:`beta_from_gammas` but from log-space variates.

    Values are evaluated through the logistic function of the log ratio,
    taking whichever branch keeps the result accurate near 0 and near 1, and
    are then clamped into the open unit interval.
    """
    t = np.asarray(log_gamma, dtype=np.float64) - np.asarray(log_lambda, dtype=np.float64)
    p = np.empty_like(t)
    upper = t >= 0.0
    with np.errstate(over="ignore"):
        # 1 - p = 1 / (1 + e^t) is accurate for t >= 0; overflow gives the right limit
        p[upper] = 1.0 - 1.0 / (1.0 + np.exp(t[upper]))
        p[~upper] = 1.0 / (1.0 + np.exp(-t[~upper]))
    return np.clip(p, _TINY, _ONE_MINUS)


def beta_sample(stream: RngStream, alpha: float, beta: float, size=None):
    """Beta(alpha, beta) variate(s) in (0, 1) from two gamma variates.

    All ``alpha``-shaped gamma draws are taken before the ``beta``-shaped ones.
    """
    alpha = _check_positive("alpha", alpha)
    beta = _check_positive("beta", beta)
    n = _count(size)
    log_g = log_gamma_variates(stream, alpha, n)
    log_l = log_gamma_variates(stream, beta, n)
    # both variates can underflow even in log space when both shapes are
    # extremely small; such pairs carry no information and are redrawn
    lost = np.isneginf(log_g) & np.isneginf(log_l)
    while lost.any():
        k = int(lost.sum())
        log_g[lost] = log_gamma_variates(stream, alpha, k)
        log_l[lost] = log_gamma_variates(stream, beta, k)
        lost = np.isneginf(log_g) & np.isneginf(log_l)
    return _shaped(beta_from_log_gammas(log_g, log_l), size)


def bernoulli(stream: RngStream, p, size=None):
    """1 with probability ``p`` else 0, decided by ``uniform < p``.

    ``p`` may be an array, in which case one outcome is drawn per element.
    """
    probs = np.asarray(p, dtype=np.float64)
    if np.any(~(probs >= 0.0)) or np.any(probs > 1.0):
        raise ParameterError("bernoulli probability must lie in [0, 1]")
    if size is None and probs.ndim > 0:
        size = probs.shape
    u = stream.uniform(_count(size))
    if size is not None:
        u = u.reshape(size)
    out = (u < probs).astype(np.int64)
    return int(out[0]) if size is None else out


# Lanczos approximation, g = 7, n = 9 (coefficients as published by P. Godfrey)
_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _ln_gamma_lanczos(x: np.ndarray) -> np.ndarray:
    # valid for x >= 0.5
    z = x - 1.0
    acc = np.full_like(z, _LANCZOS_COEF[0])
    for i, coef in enumerate(_LANCZOS_COEF[1:], start=1):
        acc += coef / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(acc)


def ln_gamma(x):
    """Natural log of the gamma function for x > 0 (scalar or array)."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~(arr > 0.0)) or np.any(~np.isfinite(arr)):
        raise ParameterError("ln_gamma requires finite x > 0")
    flat = np.atleast_1d(arr).astype(np.float64)
    out = np.empty_like(flat)
    small = flat < 0.5
    big = ~small
    out[big] = _ln_gamma_lanczos(flat[big])
    if np.any(small):
        xs = flat[small]
        # reflection: G(x) G(1 - x) = pi / sin(pi x)
        out[small] = np.log(math.pi / np.sin(math.pi * xs)) - _ln_gamma_lanczos(1.0 - xs)
    return out[0].item() if arr.ndim == 0 else out.reshape(arr.shape)


def ln_beta_function(alpha: float, beta: float) -> float:
    """log B(alpha, beta)."""
    return ln_gamma(alpha) + ln_gamma(beta) - ln_gamma(alpha + beta)


def beta_pdf(p, alpha: float, beta: float):
    """Beta density p^(a-1) (1-p)^(b-1) / B(a, b), evaluated in log space."""
    alpha = _check_positive("alpha", alpha)
    beta = _check_positive("beta", beta)
    arr = np.asarray(p, dtype=np.float64)
    if np.any(~(arr > 0.0)) or np.any(~(arr < 1.0)):
        raise ParameterError("beta_pdf requires 0 < p < 1")
    log_density = (
        (alpha - 1.0) * np.log(arr)
        + (beta - 1.0) * np.log1p(-arr)
        - ln_beta_function(alpha, beta)
    )
    out = np.exp(log_density)
    return out.item() if out.ndim == 0 else out
