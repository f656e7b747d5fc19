"""Distilled importance sampling: train a flow proposal on tempered targets.

One iteration, with the proposal parameters phi* frozen throughout:

1. draw N points from q(.; phi*),
2. pick the next tempering value eps_t <= eps_{t-1} so the effective sample
   size stays at least M (bisection on eps),
3. compute importance weights against the unnormalised tempered target and
   clip them with the automatic threshold,
4. run B training batches: resample n points proportional to the clipped
   weights and take one Adam ascent step per batch on the weighted score
   gradient (S / (n N)) * sum_j grad log q(xi_j; phi).

Weights enter the gradient on the mantissa scale of
:class:`~disamp.montecarlo.LogWeights`; that multiplies the objective by a
positive constant fixed within the iteration (the objective already carries
an arbitrary unnormalised scale), and Adam is insensitive to it.

A proposal is anything with ``params`` (a ParamVector), ``sample(rng, n)``
returning an object with ``xi`` and ``log_q``, ``log_prob(xis)`` and
``grad_log_prob(xis, coeffs)``; ``RealNvp`` and the structured time-series
proposal both qualify.
"""

from __future__ import annotations

import abc
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .flow import FlowEvaluationError
from .montecarlo import (
    DegenerateSampleError,
    WeightedSample,
    compute_weights,
    ess,
    make_weighted_sample,
    resample,
    self_normalised_estimate,
)
from .nn import l1_penalty_grad

__all__ = [
    "TemperedTarget",
    "DisConfig",
    "TraceRow",
    "DisTrace",
    "Adam",
    "select_epsilon",
    "score_gradient",
    "resampled_score_gradient",
    "dis_iteration",
    "pretrain",
    "run",
    "DisRunError",
]


class DisRunError(RuntimeError):
    """Unrecoverable failure of the training loop (retries exhausted)."""


class TemperedTarget(abc.ABC):
    """A family of unnormalised log densities indexed by a tempering value.

    Smaller eps means less tempering; eps values are selected on
    [bisection_floor, eps_prev]. ``log_p_tilde_terms`` precomputes the
    eps-independent pieces for a batch so the eps-bisection can re-evaluate
    the density cheaply via ``combine``.
    """

    dim: int

    @abc.abstractmethod
    def log_p_tilde_terms(self, xis: np.ndarray):
        """Per-sample quantities from which log p_tilde(xi, eps) follows."""

    @abc.abstractmethod
    def combine(self, terms, eps: float) -> np.ndarray:
        """log p_tilde values at tempering eps from precomputed terms."""

    def log_p_tilde(self, xis: np.ndarray, eps: float) -> np.ndarray:
        return self.combine(self.log_p_tilde_terms(xis), eps)

    def bisection_floor(self, eps_prev: float) -> float:
        """Smallest eps the schedule may reach in one step (0 if exact)."""
        return 0.0

    @property
    def has_initial_sampler(self) -> bool:
        return False

    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Exact draws from the initial target, where available."""
        raise NotImplementedError("this target has no exact initial sampler")


@dataclass
class DisConfig:
    """Tuning constants for a run. n_sample/target_ess/batch_size are the
    importance-sample size, the ESS the eps schedule aims for, and the
    training batch size; batches per iteration defaults to target_ess //
    batch_size so one iteration consumes about one effective sample."""

    n_sample: int
    target_ess: int
    eps0: float
    batch_size: int = 100
    n_batches: int | None = None
    max_iters: int = 1000
    eps_target: float = 0.0
    max_seconds: float | None = None
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l1_strength: float = 0.0
    trunc_target: float = 0.1
    ess_safety_frac: float = 0.9
    max_retries: int = 3
    checkpoint_every: int = 0

    def __post_init__(self):
        if not (self.batch_size <= self.target_ess <= self.n_sample):
            raise ValueError("need batch_size <= target_ess <= n_sample")
        if self.n_batches is None:
            self.n_batches = max(1, self.target_ess // self.batch_size)
        if self.n_batches < 1:
            raise ValueError("n_batches must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TraceRow:
    """Per-iteration diagnostics. ``wall_s`` is kept out of the serialised
    form so traces from identically-seeded runs compare byte for byte."""

    t: int
    eps: float
    ess_prev: float
    ess: float
    log_omega: float
    max_norm_weight: float
    log_zhat: float
    elogq: float
    grad_norm: float
    skipped_batches: int = 0
    wall_s: float = 0.0

    DETERMINISTIC_FIELDS = ("t", "eps", "ess_prev", "ess", "log_omega",
                            "max_norm_weight", "log_zhat", "elogq", "grad_norm",
                            "skipped_batches")

    def to_json_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.DETERMINISTIC_FIELDS}


@dataclass
class DisTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        if self.rows and row.eps > self.rows[-1].eps + 1e-15:
            raise AssertionError("tempering value increased between iterations")
        self.rows.append(row)

    def eps_values(self) -> np.ndarray:
        return np.array([r.eps for r in self.rows])


class Adam:
    """Adam with bias correction; ``step`` returns the descent delta."""

    def __init__(self, n_params: int, step_size: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.step_size = step_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return -self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# eps selection

def select_epsilon(xis: np.ndarray, log_q: np.ndarray, target: TemperedTarget,
                   eps_prev: float, target_ess: float, terms=None,
                   tol_rel: float = 1e-6, max_steps: int = 100,
                   safety_frac: float = 0.9):
    """Choose the next tempering value by ESS bisection.

    If the current sample's ESS at eps_prev is already below the target the
    schedule holds (returns eps_prev). Otherwise bisection estimates the
    smallest eps in [floor, eps_prev] with ESS(eps) >= target_ess. ESS need
    not be monotone in eps, so the returned value is re-checked and the
    schedule holds if it delivers less than safety_frac * target_ess.

    Returns (eps_t, ess_at_eps_prev, ess_at_eps_t).
    """
    if terms is None:
        terms = target.log_p_tilde_terms(xis)

    def ess_at(e: float) -> float:
        lw = compute_weights(target.combine(terms, e), log_q)
        return ess(lw.mantissa).ess

    ess_prev = ess_at(eps_prev)
    if ess_prev < target_ess:
        return eps_prev, ess_prev, ess_prev

    lo = min(target.bisection_floor(eps_prev), eps_prev)
    if ess_at(lo) >= target_ess:
        eps_t = lo
    else:
        hi = eps_prev
        tol = tol_rel * (hi - lo)
        for _ in range(max_steps):
            if hi - lo <= tol:
                break
            mid = 0.5 * (lo + hi)
            if ess_at(mid) >= target_ess:
                hi = mid
            else:
                lo = mid
        eps_t = hi

    ess_new = ess_at(eps_t)
    if ess_new < safety_frac * target_ess:
        return eps_prev, ess_prev, ess_prev
    return eps_t, ess_prev, ess_new


# ---------------------------------------------------------------------------
# gradient estimators

def score_gradient(proposal, xis: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """(1/N) sum_i w_i grad log q(xi_i; phi) for a full weighted sample."""
    w = np.asarray(weights, dtype=np.float64)
    _, grad = proposal.grad_log_prob(xis, coeffs=w / w.size)
    return grad


def resampled_score_gradient(proposal, xis: np.ndarray, w_trunc: np.ndarray,
                             batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Resampling estimate of ``score_gradient(w_trunc)``.

    Draws ``batch_size`` points with replacement proportional to the clipped
    weights and weighs each gradient by S / (n N); unbiased for the clipped
    full-sample gradient over the resampling randomness.
    """
    w = np.asarray(w_trunc, dtype=np.float64)
    idx = resample(w, batch_size, rng)
    coeff = float(np.sum(w)) / (batch_size * w.size)
    _, grad = proposal.grad_log_prob(xis[idx], coeffs=np.full(batch_size, coeff))
    return grad


# ---------------------------------------------------------------------------
# iteration and driver

@dataclass
class IterationResult:
    eps: float
    row: TraceRow
    sample: WeightedSample


def dis_iteration(proposal, target: TemperedTarget, eps_prev: float,
                  config: DisConfig, rng: np.random.Generator,
                  optimizer: Adam, t: int = 0) -> IterationResult:
    """One full cycle: propose, select eps, weight, truncate, B batch updates.

    Weights and log q are computed once from the iteration-start parameters
    and stay fixed while the batches update phi.
    """
    started = time.perf_counter()
    drawn = proposal.sample(rng, config.n_sample)
    xis, log_q = drawn.xi, drawn.log_q

    terms = target.log_p_tilde_terms(xis)
    eps_t, ess_prev, ess_new = select_epsilon(
        xis, log_q, target, eps_prev, config.target_ess, terms=terms,
        safety_frac=config.ess_safety_frac)

    log_p = target.combine(terms, eps_t)
    sample = make_weighted_sample(xis, log_q, log_p, trunc_target=config.trunc_target)

    grad_norms = []
    skipped = 0
    for _ in range(config.n_batches):
        ascent = resampled_score_gradient(proposal, xis, sample.w_trunc,
                                          config.batch_size, rng)
        if config.l1_strength > 0.0:
            ascent = ascent - l1_penalty_grad(proposal.params, config.l1_strength)
        # a pathological resampled point can explode the score through the
        # exp factors of many couplings; applying such an update would brick
        # the optimizer state, so the batch is dropped instead
        if not np.all(np.isfinite(ascent)) or np.max(np.abs(ascent)) > 1e100:
            skipped += 1
            continue
        grad_norms.append(float(np.linalg.norm(ascent)))
        proposal.params.values += optimizer.step(-ascent)
    if skipped == config.n_batches:
        raise DegenerateSampleError("every training batch produced an unusable gradient")
    if not np.all(np.isfinite(proposal.params.values)):
        raise DisRunError("proposal parameters became non-finite during training")

    row = TraceRow(
        t=t,
        eps=eps_t,
        ess_prev=ess_prev,
        ess=ess_new,
        log_omega=sample.log_omega,
        max_norm_weight=sample.max_norm_trunc_weight,
        log_zhat=sample.log_zhat,
        elogq=self_normalised_estimate(sample.w_trunc, log_q),
        grad_norm=float(np.mean(grad_norms)),
        skipped_batches=skipped,
        wall_s=time.perf_counter() - started,
    )
    return IterationResult(eps=eps_t, row=row, sample=sample)


@dataclass
class PretrainResult:
    steps: int
    converged: bool
    ess_fraction: float


def pretrain(proposal, target: TemperedTarget, eps0: float, rng: np.random.Generator,
             n: int = 100, ess_threshold_fraction: float = 0.5, check_size: int = 1000,
             check_every: int = 10, max_steps: int = 2000, step_size: float = 1e-3,
             optimizer: Adam | None = None) -> PretrainResult:
    """Fit the proposal to the initial target by plain maximum likelihood.

    Repeats: draw n exact samples from p_{eps0}, ascend the mean score
    (1/n) sum grad log q. Every ``check_every`` steps an importance-sampling
    check of ``check_size`` proposal draws against p_{eps0} is run;
    training stops once its ESS reaches ess_threshold_fraction of the check
    size. Hitting max_steps first is reported, not raised.
    """
    if not target.has_initial_sampler:
        raise ValueError("pretraining needs a target with an exact initial sampler")
    opt = optimizer or Adam(proposal.params.size, step_size=step_size)

    def ess_fraction() -> float:
        drawn = proposal.sample(rng, check_size)
        lw = compute_weights(target.log_p_tilde(drawn.xi, eps0), drawn.log_q)
        return ess(lw.mantissa).ess / check_size

    frac = 0.0
    for step in range(max_steps + 1):
        if step % check_every == 0:
            frac = ess_fraction()
            if frac >= ess_threshold_fraction:
                return PretrainResult(steps=step, converged=True, ess_fraction=frac)
        if step == max_steps:
            break
        xs = target.sample_initial(rng, n)
        _, grad = proposal.grad_log_prob(xs, coeffs=np.full(xs.shape[0], 1.0 / xs.shape[0]))
        proposal.params.values += opt.step(-grad)
    return PretrainResult(steps=max_steps, converged=False, ess_fraction=frac)


@dataclass
class RunResult:
    trace: DisTrace
    final_sample: WeightedSample
    eps_final: float
    iterations: int
    stopped_on: str
    wall_s: float


def run(proposal, target: TemperedTarget, config: DisConfig,
        rng: np.random.Generator, trace_callback=None,
        checkpoint_callback=None) -> RunResult:
    """Iterate dis_iteration until the tempering target or a cap is reached.

    A degenerate iteration (all weights zero, or a flow evaluation failure)
    is retried with the tempering held at its previous value, at most
    ``config.max_retries`` times in a row; the failed attempt never touches
    the parameters. The returned final sample comes from one fresh
    importance-sampling pass with the final parameters at the final eps.
    """
    started = time.perf_counter()
    optimizer = Adam(proposal.params.size, step_size=config.step_size,
                     beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    trace = DisTrace()
    eps = config.eps0
    stopped_on = "max_iters"
    t = 0
    for t in range(1, config.max_iters + 1):
        retries = 0
        while True:
            try:
                result = dis_iteration(proposal, target, eps, config, rng, optimizer, t=t)
                break
            except (DegenerateSampleError, FlowEvaluationError) as err:
                retries += 1
                if retries > config.max_retries:
                    raise DisRunError(
                        f"iteration {t} failed {retries - 1} retries: {err}") from err
        eps = result.eps
        trace.append(result.row)
        if trace_callback is not None:
            trace_callback(result.row)
        if checkpoint_callback is not None and config.checkpoint_every > 0 \
                and t % config.checkpoint_every == 0:
            checkpoint_callback(t, proposal)
        if eps <= config.eps_target:
            stopped_on = "eps_target"
            break
        if config.max_seconds is not None and time.perf_counter() - started >= config.max_seconds:
            stopped_on = "max_seconds"
            break

    drawn = proposal.sample(rng, config.n_sample)
    final_sample = make_weighted_sample(
        drawn.xi, drawn.log_q, target.log_p_tilde(drawn.xi, eps),
        trunc_target=config.trunc_target)
    return RunResult(trace=trace, final_sample=final_sample, eps_final=eps,
                     iterations=t, stopped_on=stopped_on,
                     wall_s=time.perf_counter() - started)
