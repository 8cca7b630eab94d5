"""Normalized temporal distances, two-hot codings, and frame-pair sampling.

The learning target for a frame pair (u, v) drawn from a length-T
trajectory is the signed, normalized gap (v - u) / (T - 1) in [-1, 1].
Targets are represented as soft two-hot weights over K uniform bins
spanning [-1, 1]; predictions are decoded as the softmax expectation of
the bin centers. Pair intervals are drawn with probability proportional
to exp(-decay * interval) so adjacent steps dominate while long spans
stay reachable.

Everything here is a pure function of its inputs plus an explicit numpy
Generator, so concurrent use needs no locking.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class TimeIndexPair:
    """A 1-based pair of frame indices inside a length-T trajectory."""

    u: int
    v: int
    horizon_T: int

    def __post_init__(self):
        if self.horizon_T < 2:
            raise ValueError(f"horizon_T must be >= 2, got {self.horizon_T}")
        for name, idx in (("u", self.u), ("v", self.v)):
            if not 1 <= idx <= self.horizon_T:
                raise ValueError(
                    f"{name}={idx} outside [1, {self.horizon_T}]"
                )


def normalized_distance(pair):
    """Signed normalized gap (v - u) / (T - 1), antisymmetric in (u, v)."""
    return (pair.v - pair.u) / (pair.horizon_T - 1)


@dataclass(frozen=True)
class TwoHotCodec:
    """K uniform bin centers spanning [-1, 1] inclusive."""

    num_bins: int = 20

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError(f"num_bins must be >= 2, got {self.num_bins}")

    @property
    def centers(self):
        return _bin_centers(self.num_bins)

    def encode(self, d):
        """Soft two-hot weights for a scalar in [-1, 1].

        At most two adjacent entries are non-zero and their center-weighted
        sum reproduces d exactly (linear interpolation). Out-of-range values
        are rejected, never clamped.
        """
        d = float(d)
        if not -1.0 <= d <= 1.0:
            raise ValueError(f"target {d} outside [-1, 1]")
        centers = self.centers
        spacing = 2.0 / (self.num_bins - 1)
        lo = min(int((d + 1.0) / spacing), self.num_bins - 2)
        # rounding in the index division can land one bin high or low
        frac = min(max((d - centers[lo]) / (centers[lo + 1] - centers[lo]),
                       0.0), 1.0)
        weights = np.zeros(self.num_bins)
        weights[lo] = 1.0 - frac
        weights[lo + 1] = frac
        return weights

    def encode_batch(self, targets):
        targets = np.asarray(targets, dtype=float)
        if targets.size and (targets.min() < -1.0 or targets.max() > 1.0):
            raise ValueError("targets outside [-1, 1]")
        centers = self.centers
        spacing = 2.0 / (self.num_bins - 1)
        lo = np.minimum(((targets + 1.0) / spacing).astype(int),
                        self.num_bins - 2)
        frac = np.clip((targets - centers[lo]) / (centers[lo + 1] - centers[lo]),
                       0.0, 1.0)
        weights = np.zeros((targets.size, self.num_bins))
        rows = np.arange(targets.size)
        weights[rows, lo] = 1.0 - frac
        weights[rows, lo + 1] = frac
        return weights

    def decode(self, logits):
        """Expectation of bin centers under softmax(logits), in [-1, 1].

        Accepts a single logit vector or a batch (n, K); returns a float or
        an (n,) array accordingly.
        """
        logits = np.asarray(logits, dtype=float)
        if not np.all(np.isfinite(logits)):
            raise ValueError("non-finite logits")
        if logits.shape[-1] != self.num_bins:
            raise ValueError(
                f"expected {self.num_bins} logits, got {logits.shape[-1]}"
            )
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        out = np.clip(p @ self.centers, -1.0, 1.0)
        return float(out) if logits.ndim == 1 else out


@lru_cache(maxsize=None)
def _bin_centers(num_bins):
    centers = np.linspace(-1.0, 1.0, num_bins)
    centers.flags.writeable = False
    return centers


@dataclass(frozen=True)
class PairSamplerConfig:
    """How frame-pair intervals and orderings are drawn.

    decay is the exponential rate on the interval length; negative_sampling
    flips half the pairs to backward order so reversed motion gets negative
    targets; uniform_intervals replaces the exponential law with a uniform
    one (ablation).
    """

    decay: float = 0.1
    negative_sampling: bool = True
    uniform_intervals: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if not self.decay > 0:
            raise ValueError(f"decay must be > 0, got {self.decay}")


def interval_pmf(horizon_T, cfg):
    """Exact interval probabilities P(interval) over {1, ..., T-1}."""
    if horizon_T < 2:
        raise ValueError(f"horizon_T must be >= 2, got {horizon_T}")
    return np.array(_interval_tables(horizon_T, cfg)[0])


@lru_cache(maxsize=None)
def _interval_tables(horizon_T, cfg):
    if cfg.uniform_intervals:
        pmf = np.full(horizon_T - 1, 1.0 / (horizon_T - 1))
    else:
        weights = np.exp(-cfg.decay * np.arange(1, horizon_T))
        pmf = weights / weights.sum()
    cdf = np.cumsum(pmf)
    cdf[-1] = 1.0
    pmf.flags.writeable = False
    cdf.flags.writeable = False
    return pmf, cdf


def sample_interval(horizon_T, cfg, rng, size=None):
    """Draw interval lengths from {1, ..., T-1} under the configured law."""
    if horizon_T < 2:
        raise ValueError(f"horizon_T must be >= 2, got {horizon_T}")
    cdf = _interval_tables(horizon_T, cfg)[1]
    draws = rng.random(size)
    return np.searchsorted(cdf, draws, side="right") + 1


def sample_pair(horizon_T, cfg, rng):
    """Draw one frame pair: interval, uniform position, then ordering."""
    u, v = sample_pairs(horizon_T, cfg, rng, 1)
    return TimeIndexPair(int(u[0]), int(v[0]), horizon_T)


def sample_pairs(horizon_T, cfg, rng, n):
    """Vectorized pair drawing; returns 1-based (u, v) index arrays."""
    deltas = sample_interval(horizon_T, cfg, rng, size=n)
    starts = rng.integers(1, horizon_T - deltas + 1)
    if cfg.negative_sampling:
        backward = rng.random(n) < 0.5
    else:
        backward = np.zeros(n, dtype=bool)
    u = np.where(backward, starts + deltas, starts)
    v = np.where(backward, starts, starts + deltas)
    return u, v
