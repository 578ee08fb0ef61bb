"""Mask and rescale coefficients for standard dropout, QSD and its ablations.

A dilution transform multiplies a layer's rectified activations by a
coefficient vector ``c = q * m`` during training and is the identity at test
time.  The modes differ only in how retain probabilities ``p`` (which drive
the Bernoulli masks ``m``) and rescaling sizes ``q`` are obtained:

========  =============================  ===============================
mode      retain probability             rescaling size
========  =============================  ===============================
none      (identity, c = 1)
standard  mean retain probability        1 / mean
dist_p    Beta(alpha, beta) draw         1 / mean
dist_q    mean retain probability        p' / mean**2, p' an independent
                                         Beta(alpha, beta) draw
qsd       Beta(alpha, beta) draw         p / mean**2, the same draw
========  =============================  ===============================

with ``beta = alpha * (1 - mean) / mean`` so every beta draw has the
configured mean retain probability.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .stochastics import RngStream, beta_sample, bernoulli


class DilutionMode(str, enum.Enum):
    NONE = "none"
    STANDARD = "standard"
    DIST_P = "dist_p"
    DIST_Q = "dist_q"
    QSD = "qsd"

    @property
    def uses_beta(self) -> bool:
        return self in (DilutionMode.DIST_P, DilutionMode.DIST_Q, DilutionMode.QSD)


def derived_beta(alpha: float, drop_rate: float) -> float:
    """Second beta shape giving mean retain probability ``1 - drop_rate``."""
    if not (alpha > 0 and math.isfinite(alpha)):
        raise ParameterError(f"alpha must be > 0, got {alpha}")
    if not (0.0 < drop_rate < 1.0):
        raise ParameterError(f"drop_rate must lie strictly between 0 and 1, got {drop_rate}")
    keep = 1.0 - drop_rate
    return alpha * (1.0 - keep) / keep


@dataclass(frozen=True)
class DilutionConfig:
    mode: DilutionMode = DilutionMode.NONE
    drop_rate: float = 0.0
    alpha: float = 1.0
    # draw a separate coefficient vector for every example of a batch
    per_example: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", DilutionMode(self.mode))
        object.__setattr__(self, "per_example", bool(self.per_example))
        object.__setattr__(self, "drop_rate", float(self.drop_rate))
        object.__setattr__(self, "alpha", float(self.alpha))
        if not (0.0 <= self.drop_rate < 1.0):
            raise ParameterError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        if self.mode.uses_beta and not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ParameterError(f"alpha must be > 0 for mode {self.mode.value}, got {self.alpha}")
        if self.mode.uses_beta and self.drop_rate > 0.0 and not derived_beta(self.alpha, self.drop_rate) > 0.0:
            raise ParameterError(
                f"drop_rate {self.drop_rate} is too small for alpha {self.alpha}: beta underflows to 0"
            )

    @property
    def keep_prob(self) -> float:
        return 1.0 - self.drop_rate

    @property
    def beta(self) -> float | None:
        if not self.mode.uses_beta or self.drop_rate == 0.0:
            return None
        return derived_beta(self.alpha, self.drop_rate)

    @property
    def is_identity(self) -> bool:
        return self.mode is DilutionMode.NONE or self.drop_rate == 0.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "drop_rate": self.drop_rate,
            "alpha": self.alpha,
            "per_example": self.per_example,
        }

    @classmethod
    def from_dict(cls, data: dict) -> DilutionConfig:
        return cls(
            DilutionMode(data["mode"]),
            data.get("drop_rate", 0.0),
            data.get("alpha", 1.0),
            data.get("per_example", False),
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CoefficientBatch:
    """One draw of per-unit retain probabilities, masks, rescales and coefficients.

    Arrays have shape ``(n,)`` for a draw shared by a whole batch, or
    ``(rows, n)`` for per-example draws.
    """

    retain_probs: np.ndarray
    masks: np.ndarray
    rescales: np.ndarray
    coefficients: np.ndarray

    @property
    def width(self) -> int:
        return self.coefficients.shape[-1]

    @classmethod
    def identity(cls, n: int) -> CoefficientBatch:
        ones = np.ones(n)
        return cls(
            _frozen(ones.copy()),
            _frozen(np.ones(n, dtype=np.int64)),
            _frozen(ones.copy()),
            _frozen(ones),
        )

    @classmethod
    def from_coefficients(cls, coefficients) -> CoefficientBatch:
        """Wrap explicit coefficients, e.g. to replay a recorded draw."""
        c = np.array(coefficients, dtype=np.float64)
        if c.ndim not in (1, 2):
            raise ShapeError("coefficients must be a vector or a (rows, n) matrix")
        return cls(
            _frozen(np.full(c.shape, np.nan)),
            _frozen((c != 0).astype(np.int64)),
            _frozen(c.copy()),
            _frozen(c),
        )


def sample_coefficients(
    config: DilutionConfig, n: int, stream: RngStream | None, rows: int | None = None
) -> CoefficientBatch:
    """Draw coefficients for a layer of ``n`` units.

    One vector of length ``n`` by default; ``rows`` independent vectors,
    stacked as a ``(rows, n)`` matrix, when ``rows`` is given.  Identity
    configurations (mode none, or zero drop rate) return all-ones
    coefficients of length ``n`` without touching ``stream``.
    """
    if n < 1:
        raise ParameterError(f"layer width must be at least 1, got {n}")
    if rows is not None and rows < 1:
        raise ParameterError(f"rows must be at least 1, got {rows}")
    if config.is_identity:
        return CoefficientBatch.identity(n)
    if stream is None:
        raise ParameterError(f"mode {config.mode.value} needs a random stream")
    shape = n if rows is None else (rows, n)

    keep = config.keep_prob
    mode = config.mode
    if mode is DilutionMode.STANDARD:
        p = np.full(shape, keep)
        m = bernoulli(stream, p)
        q = np.full(shape, 1.0 / keep)
    elif mode is DilutionMode.DIST_P:
        p = beta_sample(stream, config.alpha, config.beta, shape)
        m = bernoulli(stream, p)
        q = np.full(shape, 1.0 / keep)
    elif mode is DilutionMode.DIST_Q:
        p = np.full(shape, keep)
        m = bernoulli(stream, p)
        q = beta_sample(stream, config.alpha, config.beta, shape) / (keep * keep)
    elif mode is DilutionMode.QSD:
        p = beta_sample(stream, config.alpha, config.beta, shape)
        m = bernoulli(stream, p)
        q = p / (keep * keep)
    else:  # pragma: no cover - exhaustive over the enum
        raise ParameterError(f"unknown mode {mode}")
    c = q * m
    return CoefficientBatch(_frozen(p), _frozen(m), _frozen(q), _frozen(c))


def expected_coefficient(alpha: float, drop_rate: float) -> float:
    """Exact mean of QSD coefficients, 1 + beta / (alpha (alpha + beta + 1)).

    Equals E[p^2] / E[p]^2 for p ~ Beta(alpha, beta), so it is never below 1.
    """
    if not (alpha > 0 and math.isfinite(alpha)):
        raise ParameterError(f"alpha must be > 0, got {alpha}")
    if not (0.0 <= drop_rate < 1.0):
        raise ParameterError(f"drop_rate must lie in [0, 1), got {drop_rate}")
    if drop_rate == 0.0:
        return 1.0
    beta = derived_beta(alpha, drop_rate)
    return 1.0 + beta / (alpha * (alpha + beta + 1.0))


def apply(batch: CoefficientBatch | np.ndarray, activations: np.ndarray) -> np.ndarray:
    """Scale activations by the coefficients along the last axis."""
    c = batch.coefficients if isinstance(batch, CoefficientBatch) else np.asarray(batch)
    a = np.asarray(activations, dtype=np.float64)
    if a.shape[-1] != c.shape[-1] or (c.ndim == 2 and a.shape[0] != c.shape[0]):
        raise ShapeError(f"activations of shape {a.shape} do not match coefficients {c.shape}")
    return a * c
