"""Importance-sampling primitives: weights, ESS, truncation, resampling.

Raw importance weights can span hundreds of orders of magnitude because the
targets are unnormalised, so weights are carried as a (log_offset, mantissa)
pair: raw_w_i = exp(log_offset) * mantissa_i with max(mantissa) = 1. Every
downstream quantity except the normalising constant (normalised weights,
ESS, truncation, resampling, self-normalised estimates) is scale invariant
and operates on the mantissa directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SupportViolationError",
    "DegenerateSampleError",
    "LogWeights",
    "EssReport",
    "WeightedSample",
    "compute_weights",
    "ess",
    "auto_truncate",
    "resample",
    "self_normalised_estimate",
    "weighted_mean_se",
    "log_normalising_constant",
    "make_weighted_sample",
]


class SupportViolationError(ValueError):
    """Proposal density zero at a point with positive target density."""


class DegenerateSampleError(RuntimeError):
    """All importance weights are zero; the sample carries no information."""


@dataclass
class LogWeights:
    """Importance weights as exp(log_offset) * mantissa, max mantissa = 1."""

    log_offset: float
    mantissa: np.ndarray

    @property
    def all_zero(self) -> bool:
        return not np.any(self.mantissa > 0.0)


@dataclass(frozen=True)
class EssReport:
    ess: float
    n: int
    max_norm_weight: float


def compute_weights(log_p_tilde: np.ndarray, log_q: np.ndarray) -> LogWeights:
    """w_i = exp(log_p_tilde_i - log_q_i), overflow-safe.

    A shared max-subtraction keeps relative weights exact; the subtracted
    offset is returned so the absolute scale (needed for the normalising
    constant) is never lost. log_p_tilde may be -inf (zero target density).
    log_q = -inf where log_p_tilde > -inf breaches the support condition
    and raises.
    """
    log_p = np.asarray(log_p_tilde, dtype=np.float64)
    log_q = np.asarray(log_q, dtype=np.float64)
    if log_p.shape != log_q.shape or log_p.ndim != 1:
        raise ValueError("log_p_tilde and log_q must be equal-length vectors")
    if np.any(np.isnan(log_p)) or np.any(np.isnan(log_q)):
        raise ValueError("NaN in log densities")
    if np.any(log_p == np.inf) or np.any(log_q == np.inf):
        raise ValueError("+inf log density")
    target_pos = log_p > -np.inf
    bad = (log_q == -np.inf) & target_pos
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise SupportViolationError(
            f"proposal has zero density at sample {idx} where the target is positive")
    with np.errstate(invalid="ignore"):
        logw = np.where(target_pos, log_p - log_q, -np.inf)
    offset = float(np.max(logw))
    if offset == -np.inf:
        return LogWeights(log_offset=-np.inf, mantissa=np.zeros_like(logw))
    return LogWeights(log_offset=offset, mantissa=np.exp(logw - offset))


def ess(w: np.ndarray) -> EssReport:
    """Effective sample size (sum w)^2 / sum w^2; zero if all weights are."""
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    wmax = float(np.max(w, initial=0.0))
    if wmax == 0.0:
        return EssReport(ess=0.0, n=w.size, max_norm_weight=0.0)
    wm = w / wmax  # scale invariant; avoids under/overflow in the squares
    total = float(np.sum(wm))
    sq = float(np.sum(wm * wm))
    return EssReport(ess=total * total / sq, n=w.size, max_norm_weight=1.0 / total)


def auto_truncate(w: np.ndarray, target_max_norm: float = 0.1,
                  slack: float = 1e-9, max_iter: int = 200):
    """Clip weights at the largest omega keeping the normalised maximum down.

    Chooses omega so that max_i min(w_i, omega) / sum_j min(w_j, omega)
    <= target_max_norm (+ slack), by bisection on the sorted-weight
    piecewise form of that ratio. If no omega can achieve the target
    (fewer than 1/target positive weights), omega is the smallest positive
    weight. If the raw weights already satisfy the bound, truncation is the
    identity and omega = max(w).

    Returns (w_trunc, omega) on the same scale as ``w``.
    """
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    total = float(np.sum(w))
    if total == 0.0:
        raise DegenerateSampleError("all importance weights are zero")
    wmax = float(np.max(w))
    if wmax / total <= target_max_norm + slack:
        return w.copy(), wmax

    pos = np.sort(w[w > 0.0])
    k = pos.size
    if 1.0 / k > target_max_norm:
        omega = float(pos[0])
        return np.minimum(w, omega), omega

    prefix = np.concatenate([[0.0], np.cumsum(pos)])

    def max_norm(om: float) -> float:
        j = int(np.searchsorted(pos, om, side="left"))
        s = prefix[j] + om * (k - j)
        return om / s

    # bisect for the boundary from the feasible side; the returned omega then
    # satisfies the target up to rounding dust, well inside the slack
    lo, hi = float(pos[0]), wmax  # max_norm(lo) = 1/k <= target < max_norm(hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if max_norm(mid) <= target_max_norm:
            lo = mid
        else:
            hi = mid
    omega = lo
    return np.minimum(w, omega), omega


def resample(w_trunc: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """n multinomial draws (with replacement) proportional to the weights."""
    w = np.asarray(w_trunc, dtype=np.float64)
    total = float(np.sum(w))
    if total <= 0.0 or np.any(w < 0):
        raise DegenerateSampleError("cannot resample from nonpositive weights")
    return rng.choice(w.size, size=n, replace=True, p=w / total)


def self_normalised_estimate(w: np.ndarray, h_values: np.ndarray) -> float:
    """sum w_i h_i / sum w_i (biased, consistent; exact for constant h)."""
    w = np.asarray(w, dtype=np.float64)
    h = np.asarray(h_values, dtype=np.float64)
    total = float(np.sum(w))
    if total <= 0.0:
        raise DegenerateSampleError("self-normalised estimate needs positive weight mass")
    return float(np.sum(w * h) / total)


def weighted_mean_se(w: np.ndarray, h_values: np.ndarray) -> tuple[float, float]:
    """Self-normalised mean and its delta-method Monte Carlo standard error."""
    w = np.asarray(w, dtype=np.float64)
    h = np.asarray(h_values, dtype=np.float64)
    mean = self_normalised_estimate(w, h)
    s = w / np.sum(w)
    se = float(np.sqrt(np.sum((s * (h - mean)) ** 2)))
    return mean, se


def log_normalising_constant(lw: LogWeights) -> float:
    """log of the mean raw weight; -inf when every weight is zero."""
    if lw.all_zero:
        return -np.inf
    return lw.log_offset + float(np.log(np.mean(lw.mantissa)))


@dataclass
class WeightedSample:
    """N proposal draws with raw and truncated weights plus diagnostics.

    ``w`` and ``w_trunc`` (and ``omega``) are on the mantissa scale, i.e.
    relative to exp(log_offset); all consumers of this object use only
    scale-invariant quantities except ``log_zhat``, which restores the
    offset.
    """

    xis: np.ndarray
    log_q: np.ndarray
    log_p_tilde: np.ndarray
    log_offset: float
    w: np.ndarray
    w_trunc: np.ndarray
    omega: float

    @property
    def n(self) -> int:
        return self.w.size

    @property
    def trunc_sum(self) -> float:
        return float(np.sum(self.w_trunc))

    @property
    def log_omega(self) -> float:
        return self.log_offset + float(np.log(self.omega))

    @property
    def ess_report(self) -> EssReport:
        return ess(self.w)

    @property
    def max_norm_trunc_weight(self) -> float:
        return float(np.max(self.w_trunc)) / self.trunc_sum

    @property
    def log_zhat(self) -> float:
        return log_normalising_constant(LogWeights(self.log_offset, self.w))

    def norm_trunc_weights(self) -> np.ndarray:
        return self.w_trunc / self.trunc_sum


def make_weighted_sample(xis: np.ndarray, log_q: np.ndarray, log_p_tilde: np.ndarray,
                         trunc_target: float = 0.1) -> WeightedSample:
    """Weights, automatic truncation and diagnostics for a proposal batch."""
    lw = compute_weights(log_p_tilde, log_q)
    if lw.all_zero:
        raise DegenerateSampleError("all importance weights are zero")
    w_trunc, omega = auto_truncate(lw.mantissa, target_max_norm=trunc_target)
    return WeightedSample(
        xis=xis, log_q=np.asarray(log_q, dtype=np.float64),
        log_p_tilde=np.asarray(log_p_tilde, dtype=np.float64),
        log_offset=lw.log_offset, w=lw.mantissa, w_trunc=w_trunc, omega=omega)
