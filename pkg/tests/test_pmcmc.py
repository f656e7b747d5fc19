import numpy as np
import pytest
from scipy import stats

from disamp.models.lorenz import LorenzConfig, generate_dataset
from disamp.pmcmc import (
    LorenzStateSpace,
    batch_means_ess,
    chain_mean_se,
    pf_loglik,
    pmcmc_run,
    tune_npf,
)


class ConstantObsSS:
    """Deterministic transition, constant observation density."""

    n_steps = 6
    obs_steps = (2, 4, 6)

    def __init__(self, log_c=-1.3):
        self.log_c = log_c

    def initial_particles(self, n, rng):
        return np.zeros((n, 1))

    def propagate(self, x, step, rng):
        return x + 1.0

    def obs_logpdf(self, x, obs_index):
        return np.full(x.shape[0], self.log_c)


class LinearGaussianSS:
    """x_{t+1} = a x_t + N(0, q^2) from x_0 = 0, observed with N(0, r^2)."""

    def __init__(self, y, obs_steps, a=0.9, q=0.3, r=1.0, n_steps=30):
        self.y = y
        self.obs_steps = tuple(obs_steps)
        self.a, self.q, self.r = a, q, r
        self.n_steps = n_steps

    def initial_particles(self, n, rng):
        return np.zeros((n, 1))

    def propagate(self, x, step, rng):
        return self.a * x + self.q * rng.standard_normal(x.shape)

    def obs_logpdf(self, x, obs_index):
        resid = x[:, 0] - self.y[obs_index]
        return -0.5 * np.log(2 * np.pi) - np.log(self.r) - resid ** 2 / (2 * self.r ** 2)

    def kalman_loglik(self):
        """Exact log-likelihood by the Kalman recursions."""
        mean, var = 0.0, 0.0  # deterministic start
        loglik = 0.0
        obs_lookup = {s: j for j, s in enumerate(self.obs_steps)}
        for step in range(1, self.n_steps + 1):
            mean = self.a * mean
            var = self.a ** 2 * var + self.q ** 2
            j = obs_lookup.get(step)
            if j is None:
                continue
            s = var + self.r ** 2
            resid = self.y[j] - mean
            loglik += -0.5 * np.log(2 * np.pi * s) - resid ** 2 / (2 * s)
            gain = var / s
            mean = mean + gain * resid
            var = (1 - gain) * var
        return float(loglik)

    def simulate_data(self, rng):
        x = 0.0
        y = []
        for step in range(1, self.n_steps + 1):
            x = self.a * x + self.q * rng.standard_normal()
            if step in self.obs_steps:
                y.append(x + self.r * rng.standard_normal())
        return np.array(y)


def make_lg(seed=0):
    obs_steps = tuple(range(2, 31, 2))
    proto = LinearGaussianSS(None, obs_steps)
    y = proto.simulate_data(np.random.default_rng(seed))
    return LinearGaussianSS(y, obs_steps)


# ---------------------------------------------------------------------------
# particle filter

def test_constant_observation_model_is_exact():
    model = ConstantObsSS(log_c=-1.3)
    for n_pf in (2, 10, 100):
        ll = pf_loglik(model, n_pf, np.random.default_rng(0))
        assert ll == pytest.approx(3 * -1.3, rel=1e-12)


def test_pf_matches_kalman_oracle():
    model = make_lg()
    exact = model.kalman_loglik()
    rng = np.random.default_rng(1)
    estimates = np.array([pf_loglik(model, 800, rng) for _ in range(100)])
    se = estimates.std(ddof=1) / 10.0
    assert abs(estimates.mean() - exact) < 3 * se


def test_pf_variance_decreases_with_particles():
    model = make_lg(seed=2)
    sds = {}
    for n_pf in (50, 500):
        vals = np.array([pf_loglik(model, n_pf, np.random.default_rng(100 + r))
                         for r in range(40)])
        sds[n_pf] = vals.std(ddof=1)
    assert sds[500] < sds[50]


def test_pf_minimum_particles():
    with pytest.raises(ValueError):
        pf_loglik(make_lg(), 1, np.random.default_rng(0))


def test_pf_lorenz_smoke_and_reproducible():
    config = LorenzConfig(n_steps=40, obs_steps=(10, 20, 30, 40), sigma=2.0)
    y, _ = generate_dataset(config, np.random.default_rng(3))
    model = LorenzStateSpace(config, y, np.array([10.0, 28.0, 8 / 3]))
    a = pf_loglik(model, 100, np.random.default_rng(4))
    b = pf_loglik(model, 100, np.random.default_rng(4))
    assert np.isfinite(a) and a == b


# ---------------------------------------------------------------------------
# tuning

def test_tune_npf_easy_regime():
    model = make_lg(seed=5)
    rng = np.random.default_rng(6)

    def loglik(n_pf, r):
        return pf_loglik(model, n_pf, r)

    result = tune_npf(loglik, [10, 50, 200], replicates=20, rng=rng, target_sd=1.5)
    assert result.ok
    assert result.n_particles <= 200
    assert result.achieved_sd <= 1.5
    sds = [sd for _, sd in result.table]
    assert all(np.isfinite(sds[:len(result.table)]))


def test_tune_npf_sd_trend():
    model = make_lg(seed=7)
    rng = np.random.default_rng(8)
    result = tune_npf(lambda n, r: pf_loglik(model, n, r), [20, 100, 500],
                      replicates=30, rng=rng, target_sd=1e-9)
    sds = [sd for _, sd in result.table]
    assert not result.ok  # unreachable target: falls back to the largest
    assert result.n_particles == 500
    assert sds[2] < sds[0] * 1.25  # non-increasing up to Monte Carlo error


def test_tune_npf_single_replicate_rejected():
    with pytest.raises(ValueError):
        tune_npf(lambda n, r: 0.0, [10], replicates=1, rng=np.random.default_rng(0))


# ---------------------------------------------------------------------------
# particle MCMC

def exp_log_prior(theta, rate=0.1):
    theta = np.asarray(theta)
    if np.any(theta <= 0):
        return -np.inf
    return float(theta.size * np.log(rate) - rate * np.sum(theta))


def test_degenerate_proposal_accepts_everything():
    model = ConstantObsSS()
    result = pmcmc_run(
        loglik=lambda theta, rng: pf_loglik(model, 20, rng),
        log_prior=exp_log_prior,
        theta0=np.array([5.0, 5.0]),
        proposal_cov=np.eye(2) * 1e-20,
        n_iters=300,
        rng=np.random.default_rng(9),
    )
    assert result.acceptance_rate == 1.0


def test_prior_only_chain_matches_prior():
    # likelihood term removed: the chain must sample the Exp(0.1) prior
    result = pmcmc_run(
        loglik=lambda theta, rng: 0.0,
        log_prior=exp_log_prior,
        theta0=np.array([10.0, 10.0, 10.0]),
        proposal_cov=np.eye(3) * 36.0,
        n_iters=80_000,
        rng=np.random.default_rng(10),
    )
    thinned = result.chain[::80]
    for j in range(3):
        ks = stats.kstest(thinned[:, j], stats.expon(scale=10.0).cdf)
        assert ks.pvalue > 0.01


def test_chain_reproducible():
    model = ConstantObsSS()
    runs = []
    for _ in range(2):
        runs.append(pmcmc_run(
            loglik=lambda theta, rng: pf_loglik(model, 10, rng),
            log_prior=exp_log_prior,
            theta0=np.array([2.0]),
            proposal_cov=np.eye(1) * 0.5,
            n_iters=200,
            rng=np.random.default_rng(11),
        ))
    assert np.array_equal(runs[0].chain, runs[1].chain)
    assert np.array_equal(runs[0].logliks, runs[1].logliks)


def test_non_pd_covariance_rejected():
    with pytest.raises(ValueError):
        pmcmc_run(lambda t, r: 0.0, exp_log_prior, np.array([1.0, 1.0]),
                  np.array([[1.0, 2.0], [2.0, 1.0]]), 10, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# chain diagnostics

def test_batch_means_ess_iid_chain():
    chain = np.random.default_rng(12).normal(size=(10_000, 2))
    ess = batch_means_ess(chain)
    assert np.all(ess > 3000)


def test_batch_means_ess_correlated_chain():
    rng = np.random.default_rng(13)
    x = np.zeros(20_000)
    for t in range(1, x.size):
        x[t] = 0.99 * x[t - 1] + rng.standard_normal() * np.sqrt(1 - 0.99 ** 2)
    ess = batch_means_ess(x[:, None])
    assert ess[0] < 2000


def test_chain_mean_se_sane():
    chain = np.random.default_rng(14).normal(size=(40_000, 1))
    mean, se = chain_mean_se(chain)
    assert abs(mean[0]) < 4 * se[0] + 0.02
    assert 0.001 < se[0] < 0.02
