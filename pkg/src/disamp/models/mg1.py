"""M/G/1 queue with observed inter-departure times, reparameterised for
likelihood-free inference.

All randomness of one simulation is collected in xi = (raw theta (3),
latents (2m)) with independent standard-normal priors. The simulator maps
the first three coordinates through the normal CDF onto the uniform priors
theta_1 ~ U(0, 1/3), theta_2 ~ U(0, 10), theta_3 - theta_2 ~ U(0, 10), turns
the next m latents into Exp(theta_1) inter-arrival times and the last m into
U(theta_2, theta_3) service times, and runs the Lindley recursion for the
inter-departure times.

The tempered target multiplies the standard-normal prior density of xi by a
Gaussian kernel on the distance between simulated and observed data,
exp(-d^2 / (2 eps^2)); eps shrinks toward (but never reaches) zero.
"""

from __future__ import annotations

import numpy as np
from scipy.special import log_ndtr, ndtr

from ..dis import TemperedTarget
from ..flow import FlowArchitecture

__all__ = [
    "theta_from_raw",
    "lindley_interdeparture",
    "simulate",
    "Mg1Target",
    "flow_architecture",
    "generate_dataset",
]

LOG_2PI = float(np.log(2.0 * np.pi))
DEFAULT_M = 20
TRUE_THETA = (0.1, 4.0, 5.0)


def theta_from_raw(raw: np.ndarray) -> np.ndarray:
    """Map standard-normal draws to the uniform parameter priors.

    The CDF values are clamped to the smallest positive normal so theta
    stays strictly inside the open prior support even when the CDF
    underflows at extreme negative inputs.
    """
    raw = np.atleast_2d(raw)
    u = np.maximum(ndtr(raw), np.finfo(np.float64).tiny)
    theta = np.empty_like(u)
    theta[:, 0] = u[:, 0] / 3.0
    theta[:, 1] = 10.0 * u[:, 1]
    theta[:, 2] = theta[:, 1] + 10.0 * u[:, 2]
    return theta


def lindley_interdeparture(a: np.ndarray, s: np.ndarray) -> np.ndarray:
    """d_i = s_i + max(0, A_i - D_{i-1}) with cumulative arrivals/departures."""
    a = np.atleast_2d(a)
    s = np.atleast_2d(s)
    with np.errstate(over="ignore"):
        arrivals = np.cumsum(a, axis=1)
    d = np.empty_like(s)
    dep_prev = np.zeros(a.shape[0])
    # arrivals may be +inf for degenerate rate-zero rows; inf - inf below
    # means "arrival after an infinite departure", i.e. an infinite wait
    with np.errstate(invalid="ignore"):
        for i in range(a.shape[1]):
            wait = np.maximum(0.0, arrivals[:, i] - dep_prev)
            d[:, i] = s[:, i] + np.where(np.isnan(wait), np.inf, wait)
            dep_prev = dep_prev + d[:, i]
    return d


def simulate(xis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pure map from xi to (theta, inter-departure times).

    Inter-arrival times are -log Phi(x_i) / theta_1 (exactly Exp(theta_1)
    when x_i is standard normal); log Phi is evaluated in log space so
    extreme negative latents give large but finite arrivals instead of a
    zero CDF underflow.
    """
    xis = np.atleast_2d(xis)
    m = (xis.shape[1] - 3) // 2
    if xis.shape[1] != 3 + 2 * m:
        raise ValueError("xi must have length 3 + 2m")
    theta = theta_from_raw(xis[:, :3])
    with np.errstate(over="ignore"):  # near-zero rates give +inf arrivals
        a = -log_ndtr(xis[:, 3:3 + m]) / theta[:, :1]
    s = theta[:, 1:2] + (theta[:, 2:3] - theta[:, 1:2]) * ndtr(xis[:, 3 + m:])
    return theta, lindley_interdeparture(a, s)


class Mg1Target(TemperedTarget):
    """Reparameterised ABC-style tempered posterior for the queue."""

    def __init__(self, y_obs: np.ndarray, rel_floor: float = 1e-3,
                 abs_floor: float = 1e-6):
        self.y_obs = np.asarray(y_obs, dtype=np.float64)
        self.m = self.y_obs.size
        self.dim = 3 + 2 * self.m
        self.rel_floor = rel_floor
        self.abs_floor = abs_floor

    def log_p_tilde_terms(self, xis: np.ndarray):
        xis = np.atleast_2d(xis)
        log_prior = -0.5 * self.dim * LOG_2PI - 0.5 * np.sum(xis ** 2, axis=1)
        _, y = simulate(xis)
        # rows whose simulation degenerated to infinite times get zero weight
        finite = np.all(np.isfinite(y), axis=1)
        sqdist = np.full(xis.shape[0], np.inf)
        if np.any(finite):
            with np.errstate(over="ignore"):  # huge-but-finite y may square to inf
                sqdist[finite] = np.sum((y[finite] - self.y_obs) ** 2, axis=1)
        return log_prior, sqdist

    def combine(self, terms, eps: float) -> np.ndarray:
        if eps <= 0.0:
            raise ValueError("this tempering scheme needs eps > 0")
        log_prior, sqdist = terms
        return log_prior - sqdist / (2.0 * eps ** 2)

    def bisection_floor(self, eps_prev: float) -> float:
        # eps -> 0 only asymptotically; cap the per-iteration drop instead
        return max(self.abs_floor, self.rel_floor * eps_prev)

    @property
    def report_names(self) -> list[str]:
        return ["theta1", "theta2", "theta3"]

    def report_values(self, xis: np.ndarray) -> np.ndarray:
        return theta_from_raw(np.atleast_2d(xis)[:, :3])


def flow_architecture(m: int = DEFAULT_M, perm_seed: int = 0) -> FlowArchitecture:
    """16 coupling layers with random permutations, 100-100-50 ELU nets."""
    return FlowArchitecture(dim=3 + 2 * m, n_couplings=16, hidden=(100, 100, 50),
                            permutation="random", perm_seed=perm_seed)


def generate_dataset(theta: tuple[float, float, float] = TRUE_THETA,
                     m: int = DEFAULT_M, rng: np.random.Generator | None = None):
    """Simulate m inter-departure observations at fixed parameters."""
    rng = rng or np.random.default_rng()
    t1, t2, t3 = theta
    a = rng.exponential(1.0 / t1, size=(1, m))
    s = rng.uniform(t2, t3, size=(1, m))
    return lindley_interdeparture(a, s)[0]
