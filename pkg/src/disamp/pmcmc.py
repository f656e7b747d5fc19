"""Particle-filter likelihood estimates and particle-marginal MCMC.

The bootstrap filter forward-simulates the unconditioned state dynamics
between observation times, weights particles by the observation density at
the endpoint, accumulates the log of the mean weight, and multinomially
resamples at every observation. Its log-likelihood estimate is unbiased on
the likelihood scale, which is what pseudo-marginal Metropolis-Hastings
needs: the estimate attached to the current chain state is stored and
reused, never recomputed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from scipy.special import logsumexp

from .models.lorenz import LorenzConfig, drift

__all__ = [
    "StateSpaceModel",
    "LorenzStateSpace",
    "pf_loglik",
    "tune_npf",
    "TuneResult",
    "pmcmc_run",
    "PmcmcResult",
    "batch_means_ess",
    "chain_mean_se",
]


class StateSpaceModel(Protocol):
    """Minimal surface the bootstrap filter needs."""

    n_steps: int
    obs_steps: tuple[int, ...]

    def initial_particles(self, n: int, rng: np.random.Generator) -> np.ndarray: ...

    def propagate(self, x: np.ndarray, step: int, rng: np.random.Generator) -> np.ndarray: ...

    def obs_logpdf(self, x: np.ndarray, obs_index: int) -> np.ndarray: ...


class LorenzStateSpace:
    """Lorenz dynamics at fixed parameters as a state-space model."""

    def __init__(self, config: LorenzConfig, y_obs: np.ndarray, theta: np.ndarray):
        self.config = config
        self.n_steps = config.n_steps
        self.obs_steps = tuple(config.obs_steps)
        self.y_obs = np.asarray(y_obs, dtype=np.float64).reshape(len(self.obs_steps), 3)
        theta = np.asarray(theta, dtype=np.float64)
        self.theta = theta
        if config.sigma is not None:
            self.sigma = config.sigma
        else:
            self.sigma = float(theta[3])

    def initial_particles(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.tile(np.asarray(self.config.x0, dtype=np.float64), (n, 1))

    def propagate(self, x: np.ndarray, step: int, rng: np.random.Generator) -> np.ndarray:
        cfg = self.config
        scale = np.sqrt(cfg.diffusion * cfg.dt)
        return x + drift(x, self.theta[:3]) * cfg.dt + scale * rng.standard_normal(x.shape)

    def obs_logpdf(self, x: np.ndarray, obs_index: int) -> np.ndarray:
        y = self.y_obs[obs_index]
        sq = np.sum((x - y) ** 2, axis=1)
        return -1.5 * np.log(2 * np.pi) - 3.0 * np.log(self.sigma) - sq / (2 * self.sigma ** 2)


def pf_loglik(model: StateSpaceModel, n_particles: int, rng: np.random.Generator) -> float:
    """Bootstrap particle filter estimate of the log-likelihood.

    Returns -inf (a flagged impossible dataset under this parameter) if all
    particle weights vanish at some observation.
    """
    if n_particles < 2:
        raise ValueError("need at least two particles")
    x = model.initial_particles(n_particles, rng)
    obs_lookup = {step: j for j, step in enumerate(model.obs_steps)}
    loglik = 0.0
    for step in range(1, model.n_steps + 1):
        x = model.propagate(x, step - 1, rng)
        j = obs_lookup.get(step)
        if j is None:
            continue
        logw = model.obs_logpdf(x, j)
        lmean = float(logsumexp(logw)) - np.log(n_particles)
        if not np.isfinite(lmean):
            return -np.inf
        loglik += lmean
        w = np.exp(logw - np.max(logw))
        idx = rng.choice(n_particles, size=n_particles, replace=True, p=w / np.sum(w))
        x = x[idx]
    return loglik


@dataclass
class TuneResult:
    n_particles: int
    achieved_sd: float
    table: list[tuple[int, float]]
    ok: bool


def tune_npf(loglik: Callable[[int, np.random.Generator], float],
             candidates: list[int], replicates: int, rng: np.random.Generator,
             target_sd: float = 1.5) -> TuneResult:
    """Smallest particle count whose log-likelihood sd at a reference
    parameter is at most target_sd; the sd table is always reported.

    Falls back to the largest candidate (flagged ok=False) when none makes
    the target, which genuinely happens for near-noiseless observations.
    """
    if replicates < 2:
        raise ValueError("sd needs at least two replicates")
    if sorted(candidates) != list(candidates):
        raise ValueError("candidates must be ascending")
    table = []
    chosen = None
    for n_pf in candidates:
        vals = np.array([loglik(n_pf, rng) for _ in range(replicates)])
        finite = vals[np.isfinite(vals)]
        sd = float(np.std(finite, ddof=1)) if finite.size >= 2 else np.inf
        table.append((n_pf, sd))
        if chosen is None and sd <= target_sd:
            chosen = (n_pf, sd)
    if chosen is not None:
        return TuneResult(n_particles=chosen[0], achieved_sd=chosen[1],
                          table=table, ok=True)
    return TuneResult(n_particles=candidates[-1], achieved_sd=table[-1][1],
                      table=table, ok=False)


@dataclass
class PmcmcResult:
    chain: np.ndarray          # (iterations + 1, k) including the start
    logliks: np.ndarray
    accepted: np.ndarray       # per proposal
    acceptance_rate: float


def pmcmc_run(loglik: Callable[[np.ndarray, np.random.Generator], float],
              log_prior: Callable[[np.ndarray], float],
              theta0: np.ndarray, proposal_cov: np.ndarray, n_iters: int,
              rng: np.random.Generator) -> PmcmcResult:
    """Pseudo-marginal Metropolis-Hastings with a fixed normal proposal."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    cov = np.asarray(proposal_cov, dtype=np.float64)
    if cov.shape != (theta0.size, theta0.size) or not np.allclose(cov, cov.T):
        raise ValueError("proposal covariance must be symmetric (k, k)")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as err:
        raise ValueError("proposal covariance must be positive definite") from err

    cur_theta = theta0.copy()
    cur_lp = log_prior(cur_theta)
    if cur_lp == -np.inf:
        raise ValueError("chain must start inside the prior support")
    cur_ll = loglik(cur_theta, rng)

    chain = np.empty((n_iters + 1, theta0.size))
    logliks = np.empty(n_iters + 1)
    accepted = np.zeros(n_iters, dtype=bool)
    chain[0] = cur_theta
    logliks[0] = cur_ll
    for t in range(n_iters):
        prop = cur_theta + chol @ rng.standard_normal(theta0.size)
        prop_lp = log_prior(prop)
        if prop_lp > -np.inf:
            prop_ll = loglik(prop, rng)
            log_alpha = (prop_ll + prop_lp) - (cur_ll + cur_lp)
            if np.log(rng.uniform()) < log_alpha:
                cur_theta, cur_lp, cur_ll = prop, prop_lp, prop_ll
                accepted[t] = True
        chain[t + 1] = cur_theta
        logliks[t + 1] = cur_ll
    return PmcmcResult(chain=chain, logliks=logliks, accepted=accepted,
                       acceptance_rate=float(accepted.mean()))


def batch_means_ess(chain: np.ndarray) -> np.ndarray:
    """Batch-means effective sample size per coordinate."""
    chain = np.atleast_2d(np.asarray(chain, dtype=np.float64))
    if chain.shape[0] < chain.shape[1]:
        chain = chain.T
    t = chain.shape[0]
    b = max(2, int(np.floor(np.sqrt(t))))
    k = t // b
    trimmed = chain[:k * b].reshape(k, b, chain.shape[1])
    means = trimmed.mean(axis=1)
    lam = chain.var(axis=0, ddof=1)
    sigma_bm = b * means.var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(sigma_bm > 0, t * lam / sigma_bm, float(t))
    return np.minimum(out, float(t))


def chain_mean_se(chain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and its batch-means Monte Carlo standard error."""
    chain = np.atleast_2d(np.asarray(chain, dtype=np.float64))
    if chain.shape[0] < chain.shape[1]:
        chain = chain.T
    t = chain.shape[0]
    b = max(2, int(np.floor(np.sqrt(t))))
    k = t // b
    means = chain[:k * b].reshape(k, b, chain.shape[1]).mean(axis=1)
    se = means.std(axis=0, ddof=1) / np.sqrt(k)
    return chain.mean(axis=0), se
