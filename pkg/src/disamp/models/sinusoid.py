"""Two-dimensional sinusoidal target.

theta_1 ~ U(-pi, pi) and theta_2 | theta_1 ~ N(sin(theta_1), 1/200), so the
unnormalised density is exp(-100 (theta_2 - sin theta_1)^2) on the strip
|theta_1| < pi. Tempering interpolates geometrically with a wide Gaussian:
p_eps ~ p1^eps * p~^(1-eps), eps from 1 down to 0, where p1 is independent
N(0, sigma0^2) per coordinate with sigma0 = 2.
"""

from __future__ import annotations

import numpy as np

from ..dis import TemperedTarget
from ..flow import FlowArchitecture

__all__ = ["SinusoidTarget", "sinusoid_log_p_tilde", "flow_architecture"]

SIGMA0 = 2.0
LOG_2PI = float(np.log(2.0 * np.pi))


def _log_initial(theta: np.ndarray) -> np.ndarray:
    return -LOG_2PI - 2.0 * np.log(SIGMA0) - np.sum(theta ** 2, axis=1) / (2.0 * SIGMA0 ** 2)


def _log_unnormalised(theta: np.ndarray) -> np.ndarray:
    body = -100.0 * (theta[:, 1] - np.sin(theta[:, 0])) ** 2
    return np.where(np.abs(theta[:, 0]) < np.pi, body, -np.inf)


class SinusoidTarget(TemperedTarget):
    dim = 2
    sigma0 = SIGMA0

    def log_p_tilde_terms(self, xis: np.ndarray):
        xis = np.atleast_2d(xis)
        return _log_initial(xis), _log_unnormalised(xis)

    def combine(self, terms, eps: float) -> np.ndarray:
        if not 0.0 <= eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        log_p1, log_pt = terms
        if eps == 1.0:
            # the strip indicator is switched off entirely at eps = 1
            return log_p1.copy()
        return eps * log_p1 + (1.0 - eps) * log_pt

    @property
    def has_initial_sampler(self) -> bool:
        return True

    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.normal(0.0, self.sigma0, size=(n, 2))

    @property
    def report_names(self) -> list[str]:
        return ["theta1", "theta2"]

    def report_values(self, xis: np.ndarray) -> np.ndarray:
        return np.atleast_2d(xis)


def sinusoid_log_p_tilde(theta: np.ndarray, eps: float):
    """Tempered unnormalised log density for a single point or a batch."""
    arr = np.asarray(theta, dtype=np.float64)
    single = arr.ndim == 1
    target = SinusoidTarget()
    out = target.log_p_tilde(np.atleast_2d(arr), eps)
    return float(out[0]) if single else out


def flow_architecture() -> FlowArchitecture:
    """4 coupling layers with coordinate swaps in between, 3x10 ELU nets."""
    return FlowArchitecture(dim=2, n_couplings=4, hidden=(10, 10, 10),
                            permutation="reverse")
