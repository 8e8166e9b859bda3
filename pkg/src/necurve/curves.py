"""Normalized-entropy (NE) curve math.

NE is the average log loss per impression divided by the log loss of a
predictor that always outputs the background click-through rate (CTR).
Lifetime NE (LNE) averages from the start of training; window NE (WNE)
averages over the most recent ``d`` examples.  Lower NE is better.

Conventions used throughout the package:

* ``LNE_0 := 0``, so the window-covers-everything case ``d = t`` of the
  LNE/WNE transformation is well defined.
* A stream flagged ``normalized`` carries per-example losses that are
  already divided by the CTR normalizer (normalizer identically 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateCtrError(ValueError):
    """Empirical CTR of the requested range is 0 or 1, so the normalizer vanishes."""


class CurveTooShortError(ValueError):
    """Curve has too few points for the requested operation."""


def log_loss(a: float, b: float) -> float:
    """Cross-entropy of label probability ``a`` against prediction ``b``.

    ``-a*ln(b) - (1-a)*ln(1-b)``; symmetric under ``(a, b) -> (1-a, 1-b)``.
    """
    if not 0.0 < b < 1.0:
        raise ValueError(f"prediction must lie strictly inside (0, 1), got {b}")
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"label probability must lie in [0, 1], got {a}")
    return float(-(a * math.log(b) + (1.0 - a) * math.log1p(-b)))


def _log_loss_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized ``log_loss`` with the same domain checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(b <= 0.0) or np.any(b >= 1.0):
        raise ValueError("predictions must lie strictly inside (0, 1)")
    if np.any(a < 0.0) or np.any(a > 1.0):
        raise ValueError("label probabilities must lie in [0, 1]")
    return -(a * np.log(b) + (1.0 - a) * np.log1p(-b))


@dataclass
class LossStream:
    """Per-example losses of one model, with enough CTR context to normalize.

    Either ``labels``/``predictions`` or precomputed ``losses`` must be
    present.  ``ctr_prefix[t-1]`` is the empirical CTR of examples ``1..t``;
    when absent it is derived from ``labels``.  A ``normalized`` stream
    carries losses already divided by the normalizer, so no CTR is needed.
    """

    labels: np.ndarray | None = None
    predictions: np.ndarray | None = None
    losses: np.ndarray | None = None
    ctr_prefix: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self) -> None:
        for name in ("labels", "predictions", "losses", "ctr_prefix"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, np.asarray(value, dtype=np.float64))
        if self.losses is None and (self.labels is None or self.predictions is None):
            raise ValueError("stream needs either losses or labels+predictions")
        lengths = {
            len(arr)
            for arr in (self.labels, self.predictions, self.losses, self.ctr_prefix)
            if arr is not None
        }
        if len(lengths) != 1:
            raise ValueError(f"stream field lengths disagree: {sorted(lengths)}")
        if next(iter(lengths)) == 0:
            raise ValueError("stream is empty")
        if self.predictions is not None and (
            np.any(self.predictions <= 0.0) or np.any(self.predictions >= 1.0)
        ):
            raise ValueError("predictions must lie strictly inside (0, 1)")
        if self.ctr_prefix is not None and (
            np.any(self.ctr_prefix < 0.0) or np.any(self.ctr_prefix > 1.0)
        ):
            raise ValueError("prefix CTR means must lie in [0, 1]")
        if self.losses is not None and np.any(self.losses < 0.0):
            raise ValueError("per-example losses must be nonnegative")

    @property
    def n(self) -> int:
        for arr in (self.losses, self.labels):
            if arr is not None:
                return len(arr)
        raise AssertionError("unreachable")

    def per_example_losses(self) -> np.ndarray:
        if self.losses is not None:
            return self.losses
        return _log_loss_array(self.labels, self.predictions)

    def range_ctr(self, first: int, last: int) -> float:
        """Empirical CTR of examples ``first..last`` (1-based, inclusive)."""
        if self.ctr_prefix is not None:
            total = last * self.ctr_prefix[last - 1]
            if first > 1:
                total -= (first - 1) * self.ctr_prefix[first - 2]
            return float(total / (last - first + 1))
        if self.labels is None:
            raise ValueError("stream has neither labels nor a CTR path")
        return float(np.mean(self.labels[first - 1 : last]))

    def range_normalizer(self, first: int, last: int) -> float:
        """Log loss of the background-CTR predictor over ``first..last``."""
        if self.normalized:
            return 1.0
        ctr = self.range_ctr(first, last)
        if ctr <= 0.0 or ctr >= 1.0:
            raise DegenerateCtrError(
                f"empirical CTR of range [{first}, {last}] is {ctr}; normalizer vanishes"
            )
        return log_loss(ctr, ctr)


@dataclass
class LearningCurve:
    """LNE values over cumulative example counts, one value per checkpoint."""

    values: np.ndarray
    example_counts: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.example_counts = np.asarray(self.example_counts, dtype=np.float64)
        if len(self.values) != len(self.example_counts):
            raise ValueError("values and example_counts lengths disagree")
        if len(self.values) < 1:
            raise ValueError("curve must have at least one point")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("curve values must be finite")
        if np.any(self.example_counts <= 0.0) or np.any(
            np.diff(self.example_counts) <= 0.0
        ):
            raise ValueError("example counts must be positive and strictly increasing")

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class WindowSpec:
    """Window of ``d`` examples ending at example count ``t`` (``1 <= d <= t``)."""

    t: int
    d: int

    def __post_init__(self) -> None:
        if not 1 <= self.d <= self.t:
            raise ValueError(f"need 1 <= d <= t, got d={self.d}, t={self.t}")


def normalized_entropy(
    stream: LossStream, first: int = 1, last: int | None = None
) -> float:
    """NE of ``stream`` over examples ``first..last`` (1-based, inclusive)."""
    if last is None:
        last = stream.n
    if not 1 <= first <= last <= stream.n:
        raise ValueError(f"invalid range [{first}, {last}] for stream of length {stream.n}")
    mean_loss = float(np.mean(stream.per_example_losses()[first - 1 : last]))
    return mean_loss / stream.range_normalizer(first, last)


def lne_curve(stream: LossStream, checkpoints: np.ndarray) -> LearningCurve:
    """Lifetime NE at each checkpoint: cumulative mean loss over the prefix
    divided by the prefix-CTR normalizer."""
    checkpoints = np.asarray(checkpoints, dtype=np.int64)
    if len(checkpoints) == 0:
        raise ValueError("need at least one checkpoint")
    if np.any(np.diff(checkpoints) <= 0):
        raise ValueError("checkpoints must be strictly increasing")
    if checkpoints[0] < 1 or checkpoints[-1] > stream.n:
        raise ValueError("checkpoints must lie within [1, N]")
    prefix_mean = np.cumsum(stream.per_example_losses()) / np.arange(1, stream.n + 1)
    values = np.empty(len(checkpoints), dtype=np.float64)
    for i, t in enumerate(checkpoints):
        values[i] = prefix_mean[t - 1] / stream.range_normalizer(1, int(t))
    return LearningCurve(values=values, example_counts=checkpoints)


def wne_direct(stream: LossStream, spec: WindowSpec) -> float:
    """Window NE straight from the definition: mean loss over the most recent
    ``d`` examples divided by the window-CTR normalizer."""
    if spec.t > stream.n:
        raise ValueError(f"window end {spec.t} exceeds stream length {stream.n}")
    first = spec.t - spec.d + 1
    mean_loss = float(np.mean(stream.per_example_losses()[first - 1 : spec.t]))
    return mean_loss / stream.range_normalizer(first, spec.t)


def wne_from_lne(curve: LearningCurve, spec: WindowSpec) -> float:
    """WNE recovered from two LNE curve points:
    ``(t*LNE_t - (t-d)*LNE_{t-d}) / d``, with ``LNE_0 := 0``.

    Exact whenever the empirical CTR is stable over the training run.  Both
    example counts ``t`` and ``t - d`` must be present on the curve (``t - d
    = 0`` uses the virtual origin).
    """
    if spec.d <= 0:
        raise ValueError("window size must be positive")
    lne_t = _value_at_count(curve, spec.t)
    if spec.d == spec.t:
        lne_left = 0.0
    else:
        lne_left = _value_at_count(curve, spec.t - spec.d)
    return (spec.t * lne_t - (spec.t - spec.d) * lne_left) / spec.d


def _value_at_count(curve: LearningCurve, count: int) -> float:
    idx = np.searchsorted(curve.example_counts, count)
    if idx >= len(curve) or curve.example_counts[idx] != count:
        raise ValueError(f"curve has no point at example count {count}")
    return float(curve.values[idx])


def resample_curve(curve: LearningCurve, n: int) -> LearningCurve:
    """Piecewise-linear resampling onto ``n`` equally spaced example counts
    spanning ``[t_1, t_L]``; endpoints are preserved exactly."""
    if len(curve) < 2:
        raise CurveTooShortError(f"cannot resample a curve of length {len(curve)}")
    if n < 2:
        raise ValueError("need at least 2 output points")
    counts = np.linspace(curve.example_counts[0], curve.example_counts[-1], n)
    values = np.interp(counts, curve.example_counts, curve.values)
    return LearningCurve(values=values, example_counts=counts)


@dataclass(frozen=True)
class GreedyPrediction:
    """Superiority call from the last observed curve values."""

    prob_left_superior: float  # 1.0 or 0.0
    tie: bool


def greedy_rank(
    curve_i: LearningCurve, curve_j: LearningCurve, observed_fraction: float
) -> GreedyPrediction:
    """Predict the left curve superior iff its last observed value is strictly
    lower.  Ties predict the right curve and set the tie flag."""
    if len(curve_i) != len(curve_j):
        raise ValueError("curves must be resampled to equal length")
    if not 0.0 < observed_fraction <= 1.0:
        raise ValueError("observed fraction must lie in (0, 1]")
    n_obs = observed_count(len(curve_i), observed_fraction)
    yi = float(curve_i.values[n_obs - 1])
    yj = float(curve_j.values[n_obs - 1])
    if yi == yj:
        return GreedyPrediction(prob_left_superior=0.0, tie=True)
    return GreedyPrediction(prob_left_superior=float(yi < yj), tie=False)


def observed_count(length: int, fraction: float) -> int:
    """Number of curve points visible at an observation fraction."""
    n_obs = int(round(fraction * length))
    if n_obs < 1:
        raise ValueError(
            f"observed fraction {fraction} exposes no points of a length-{length} curve"
        )
    return n_obs
