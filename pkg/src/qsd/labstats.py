"""Run bookkeeping and the analysis toolkit: final-epoch averages, rank-sum
tests, quantile summaries, hidden-layer activation statistics and histograms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .dataio import Dataset, permute_pixels
from .errors import ParameterError, ShapeError, UsageError
from .netcore import MlpModel, forward
from .stochastics import RngStream

METRICS = ("train_cost", "test_cost", "test_error")
FINAL_EPOCHS = 3


@dataclass
class RunRecord:
    condition: str
    seed: int
    train_cost: list[float] = field(default_factory=list)
    test_cost: list[float] = field(default_factory=list)
    test_error: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    diverged_at: int | None = None

    @property
    def n_epochs(self) -> int:
        return len(self.test_cost)

    @property
    def failed(self) -> bool:
        return self.diverged_at is not None

    def series(self, metric: str) -> list[float]:
        if metric not in METRICS:
            raise ParameterError(f"unknown metric {metric!r}; choose from {METRICS}")
        return getattr(self, metric)


def final_metric(record: RunRecord, metric: str = "test_cost") -> float:
    """Mean of ``metric`` over the last three recorded epochs."""
    values = record.series(metric)
    if len(values) < FINAL_EPOCHS:
        raise UsageError(f"need at least {FINAL_EPOCHS} epochs, record has {len(values)}")
    return float(np.mean(values[-FINAL_EPOCHS:]))


class RankSumResult(NamedTuple):
    z: float
    p: float
    u: float


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    ranks = np.empty(values.shape[0])
    i = 0
    n = values.shape[0]
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def rank_sum_test(a: Sequence[float], b: Sequence[float], continuity: bool = False) -> RankSumResult:
    """Unpaired Wilcoxon rank-sum (Mann-Whitney) test, normal approximation.

    Ties receive midranks and the variance carries the usual tie correction.
    ``z`` is positive when ``a`` tends to exceed ``b``; ``p`` is two-sided.
    The continuity correction is off by default, which reproduces the
    customary Z = 3.36 for two completely separated groups of eight.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise UsageError("rank_sum_test needs two non-empty groups")
    if a.size < 2 or b.size < 2:
        raise UsageError("rank_sum_test needs at least two values per group")
    n1, n2 = a.size, b.size
    n = n1 + n2
    ranks = midranks(np.concatenate((a, b)))
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    mean_u = n1 * n2 / 2.0
    _, counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(counts**3 - counts)) / (n * (n - 1))
    var_u = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var_u <= 0.0:
        return RankSumResult(0.0, 1.0, u)
    diff = u - mean_u
    if continuity:
        diff = math.copysign(max(abs(diff) - 0.5, 0.0), diff)
    z = diff / math.sqrt(var_u)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return RankSumResult(z, min(p, 1.0), u)


def median_iqr(values: Sequence[float]) -> tuple[float, float, float]:
    """(median, first quartile, third quartile) with linear interpolation."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise UsageError("median_iqr of an empty sequence")
    q1, med, q3 = np.quantile(arr, [0.25, 0.5, 0.75])
    return float(med), float(q1), float(q3)


REGIMES = ("masks_on", "masks_off", "masks_off_permuted")


@dataclass
class LayerActivations:
    unit_means: np.ndarray  # mean over samples, one per unit
    sample_means: np.ndarray  # mean over units, one per sample

    @property
    def mean(self) -> float:
        return float(self.sample_means.mean())

    @property
    def sample_std(self) -> float:
        """Standard deviation (n - 1) of the per-sample means."""
        if self.sample_means.size < 2:
            return 0.0
        return float(self.sample_means.std(ddof=1))


@dataclass
class ActivationSummary:
    regime: str
    layers: list[LayerActivations]

    def to_rows(self) -> list[dict]:
        return [
            {"regime": self.regime, "layer": i + 1, "mean": la.mean, "sample_std": la.sample_std}
            for i, la in enumerate(self.layers)
        ]


def activation_summary(
    model: MlpModel,
    dataset: Dataset,
    regime: str,
    stream: RngStream | None = None,
    chunk_size: int = 1000,
) -> ActivationSummary:
    """Per-unit and per-sample mean hidden outputs over a whole dataset.

    ``masks_on`` draws fresh dilution coefficients from ``stream`` for every
    chunk of ``chunk_size`` samples, as during training; ``masks_off`` uses
    the identity transform; ``masks_off_permuted`` first permutes each
    sample's pixels with ``stream`` and then evaluates like ``masks_off``.
    """
    if regime not in REGIMES:
        raise ParameterError(f"regime must be one of {REGIMES}, got {regime!r}")
    if regime != "masks_off" and stream is None:
        raise ParameterError(f"regime {regime} needs a random stream")
    if dataset.images.shape[1] != model.widths[0]:
        raise ShapeError(f"dataset width {dataset.images.shape[1]} != model input {model.widths[0]}")
    if regime == "masks_off_permuted":
        dataset = permute_pixels(dataset, stream)

    n = len(dataset)
    unit_sums = [np.zeros(w) for w in model.widths[1:-1]]
    sample_means = [np.empty(n) for _ in model.widths[1:-1]]
    train_stream = stream if regime == "masks_on" else None
    for start in range(0, n, chunk_size):
        x = dataset.images[start:start + chunk_size]
        _, cache = forward(model, x, train_stream)
        for i, h in enumerate(cache.hidden_outputs):
            unit_sums[i] += h.sum(axis=0)
            sample_means[i][start:start + x.shape[0]] = h.mean(axis=1)
    layers = [
        LayerActivations(unit_sums[i] / max(n, 1), sample_means[i]) for i in range(model.n_hidden)
    ]
    return ActivationSummary(regime, layers)


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    underflow: int = 0
    overflow: int = 0


def histogram(values, bin_count: int, value_range: tuple[float, float]) -> Histogram:
    """Uniform-width bins, right-open except the last, which is closed.

    Values outside ``value_range`` are tallied in ``underflow``/``overflow``.
    """
    if bin_count < 1:
        raise ParameterError(f"bin_count must be >= 1, got {bin_count}")
    lo, hi = float(value_range[0]), float(value_range[1])
    if not (math.isfinite(lo) and math.isfinite(hi) and hi > lo):
        raise ParameterError(f"degenerate histogram range ({lo}, {hi})")
    arr = np.asarray(values, dtype=np.float64).ravel()
    counts, edges = np.histogram(arr, bins=bin_count, range=(lo, hi))
    return Histogram(edges, counts, int(np.sum(arr < lo)), int(np.sum(arr > hi)))


def value_range(arrays: Sequence[np.ndarray]) -> tuple[float, float]:
    """Common [min, max] over several arrays, widened if it collapses to a point."""
    lo = min(float(np.min(a)) for a in arrays)
    hi = max(float(np.max(a)) for a in arrays)
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


@dataclass
class ParamHistograms:
    weights: list[Histogram]
    biases: list[Histogram]


def param_distributions(
    model: MlpModel,
    bin_count: int = 50,
    weight_ranges: Sequence[tuple[float, float]] | None = None,
    bias_ranges: Sequence[tuple[float, float]] | None = None,
) -> ParamHistograms:
    """Per-layer weight and bias histograms.

    Pass ranges computed with :func:`shared_param_ranges` over every model of
    a comparison so the histograms share their bins.
    """
    if weight_ranges is None or bias_ranges is None:
        w_auto, b_auto = shared_param_ranges([model])
        weight_ranges = weight_ranges or w_auto
        bias_ranges = bias_ranges or b_auto
    weights = [histogram(w, bin_count, r) for w, r in zip(model.weights, weight_ranges)]
    biases = [histogram(b, bin_count, r) for b, r in zip(model.biases, bias_ranges)]
    return ParamHistograms(weights, biases)


def shared_param_ranges(models: Sequence[MlpModel]):
    n_layers = len(models[0].weights)
    weight_ranges = [value_range([m.weights[i] for m in models]) for i in range(n_layers)]
    bias_ranges = [value_range([m.biases[i] for m in models]) for i in range(n_layers)]
    return weight_ranges, bias_ranges
