"""Lorenz-63 SDE with noisy, infrequent observations.

Latent dynamics (Euler-Maruyama, step dt, diffusion sqrt(10 dt)):

    x_{i+1} = x_i + alpha(x_i, theta) dt + sqrt(10 dt) eps_i
    alpha(x, theta) = (theta1 (x2 - x1),
                       theta2 x1 - x2 - x1 x3,
                       x1 x2 - theta3 x3)

Observations y_i ~ N(x_i, sigma^2 I) at a fixed subset of steps; sigma is
either a fourth inferred parameter or fixed by the experiment. Parameters
carry independent Exp(0.1) priors. Tempering raises the observation factor
to the power (1 - eps).

The proposal is structured rather than a black-box flow: a coupling flow
for theta (through a log link, so positivity holds with full support on the
unconstrained scale) times a learned one-step-ahead Gaussian transition

    x_{i+1} = x_i + [alpha(x_i, theta) + beta] dt + sqrt(gamma dt) eps_i

where (beta, gamma) come from a network fed the parameters, the current
step, the state, the drift, and the next observation (value and distance in
steps). gamma is kept positive by gamma = 10 softplus(eta) / log 2, which is
exactly 10 at eta = 0, so a near-zero network reproduces the unconditioned
dynamics. Paths whose coordinates pass 1000 in absolute value get zero
target weight; sampling freezes such paths in place (their recorded
proposal density is then irrelevant because their weight is exactly zero).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dis import TemperedTarget
from ..flow import FlowArchitecture, FlowSample, RealNvp
from ..nn import Mlp, ParamVector, init_near_zero

__all__ = [
    "LorenzConfig",
    "drift",
    "simulate_paths",
    "gamma_transform",
    "LorenzTarget",
    "LorenzProposal",
    "flow_architecture",
    "generate_dataset",
]

LOG_2PI = float(np.log(2.0 * np.pi))
LN2 = float(np.log(2.0))
TRUE_DRIFT_THETA = (10.0, 28.0, 8.0 / 3.0)
TRUE_SIGMA = 2.0


@dataclass(frozen=True)
class LorenzConfig:
    """Discretisation, observation schedule and priors for one instance."""

    n_steps: int = 100
    dt: float = 0.02
    x0: tuple[float, float, float] = (-30.0, 0.0, 30.0)
    obs_steps: tuple[int, ...] = (20, 40, 60, 80, 100)
    sigma: float | None = None  # None: observation scale is a 4th parameter
    prior_rate: float = 0.1
    diffusion: float = 10.0
    guard: float = 1000.0

    def __post_init__(self):
        if any(o < 1 or o > self.n_steps for o in self.obs_steps):
            raise ValueError("observation steps must lie in [1, n_steps]")

    @property
    def n_theta(self) -> int:
        return 3 if self.sigma is not None else 4

    @property
    def dim(self) -> int:
        return self.n_theta + 3 * self.n_steps


def drift(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Lorenz drift; x is (..., 3), theta (..., >=3) broadcasting over rows."""
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    t1, t2, t3 = theta[..., 0], theta[..., 1], theta[..., 2]
    return np.stack([t1 * (x2 - x1), t2 * x1 - x2 - x1 * x3, x1 * x2 - t3 * x3],
                    axis=-1)


def simulate_paths(theta: np.ndarray, config: LorenzConfig,
                   rng: np.random.Generator) -> np.ndarray:
    """Euler-Maruyama rollout of the unconditioned model, one row per theta."""
    theta = np.atleast_2d(theta)
    n = theta.shape[0]
    path = np.empty((n, config.n_steps + 1, 3))
    path[:, 0] = config.x0
    scale = np.sqrt(config.diffusion * config.dt)
    x = path[:, 0].copy()
    # extreme prior draws can blow past float range; such paths cross the
    # stability guard long before overflowing and all consumers discard them
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(config.n_steps):
            x = x + drift(x, theta) * config.dt + scale * rng.standard_normal((n, 3))
            path[:, i + 1] = x
    return path


def gamma_transform(eta: np.ndarray) -> np.ndarray:
    """Positive diffusion multiplier, exactly 10 at eta = 0."""
    return 10.0 * (np.logaddexp(0.0, eta) / LN2)


def _gamma_transform_deriv(eta: np.ndarray) -> np.ndarray:
    sigmoid = 0.5 * (1.0 + np.tanh(0.5 * eta))
    return 10.0 * sigmoid / LN2


def _obs_index_features(config: LorenzConfig, y_obs: np.ndarray):
    """Per-step (distance to next observation, its value); past the final
    observation the gap is zero and the value is the last observation."""
    gaps = np.zeros(config.n_steps)
    values = np.zeros((config.n_steps, 3))
    obs = sorted(config.obs_steps)
    lookup = {step: y_obs[j] for j, step in enumerate(config.obs_steps)}
    for i in range(config.n_steps):
        future = [o for o in obs if o > i]
        if future:
            gaps[i] = future[0] - i
            values[i] = lookup[future[0]]
        else:
            gaps[i] = 0.0
            values[i] = lookup[obs[-1]]
    return gaps, values


class LorenzTarget(TemperedTarget):
    """Tempered joint posterior over (theta, latent path)."""

    def __init__(self, config: LorenzConfig, y_obs: np.ndarray):
        self.config = config
        self.y_obs = np.asarray(y_obs, dtype=np.float64).reshape(len(config.obs_steps), 3)
        self.dim = config.dim

    def split(self, xis: np.ndarray):
        xis = np.atleast_2d(xis)
        k = self.config.n_theta
        theta = xis[:, :k]
        path = np.empty((xis.shape[0], self.config.n_steps + 1, 3))
        path[:, 0] = self.config.x0
        path[:, 1:] = xis[:, k:].reshape(xis.shape[0], self.config.n_steps, 3)
        return theta, path

    def log_p_tilde_terms(self, xis: np.ndarray):
        cfg = self.config
        theta, path = self.split(xis)
        valid = np.all(theta > 0.0, axis=1)
        safe_theta = np.where(valid[:, None], theta, 1.0)

        log_prior = np.where(
            valid,
            theta.shape[1] * np.log(cfg.prior_rate) - cfg.prior_rate * np.sum(safe_theta, axis=1),
            -np.inf)

        mean = path[:, :-1] + drift(path[:, :-1], safe_theta[:, None, :]) * cfg.dt
        resid = path[:, 1:] - mean
        var = cfg.diffusion * cfg.dt
        log_trans = np.sum(-1.5 * (LOG_2PI + np.log(var)) - np.sum(resid ** 2, axis=2) / (2 * var),
                           axis=1)

        tripped = np.any(np.abs(path) > cfg.guard, axis=(1, 2))
        fixed = np.where(valid & ~tripped, log_prior + log_trans, -np.inf)

        sigma = cfg.sigma if cfg.sigma is not None else safe_theta[:, 3]
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (xis.shape[0],))
        obs_states = path[:, list(cfg.obs_steps)]
        sq = np.sum((obs_states - self.y_obs[None]) ** 2, axis=(1, 2))
        n_obs = len(cfg.obs_steps)
        log_obs = (-1.5 * n_obs * LOG_2PI - 3.0 * n_obs * np.log(sigma)
                   - sq / (2.0 * sigma ** 2))
        return fixed, log_obs

    def combine(self, terms, eps: float) -> np.ndarray:
        if not 0.0 <= eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        fixed, log_obs = terms
        if eps == 1.0:
            return fixed.copy()
        return fixed + (1.0 - eps) * log_obs

    @property
    def has_initial_sampler(self) -> bool:
        return True

    def sample_initial(self, rng: np.random.Generator, n: int,
                       max_rounds: int = 100) -> np.ndarray:
        """Exact draws from prior x model (the eps = 1 target), rejecting the
        measure-zero-weight paths that cross the stability guard."""
        cfg = self.config
        k = cfg.n_theta
        out = np.empty((n, self.dim))
        need = np.arange(n)
        for _ in range(max_rounds):
            theta = rng.exponential(1.0 / cfg.prior_rate, size=(need.size, k))
            path = simulate_paths(theta, cfg, rng)
            with np.errstate(invalid="ignore"):
                ok = ~np.any((np.abs(path) > cfg.guard) | ~np.isfinite(path),
                             axis=(1, 2))
            rows = need[ok]
            out[rows, :k] = theta[ok]
            out[rows, k:] = path[ok, 1:].reshape(ok.sum(), -1)
            need = need[~ok]
            if need.size == 0:
                return out
        raise RuntimeError("could not draw guard-respecting prior paths")

    @property
    def report_names(self) -> list[str]:
        names = ["theta1", "theta2", "theta3"]
        if self.config.sigma is None:
            names.append("sigma")
        return names

    def report_values(self, xis: np.ndarray) -> np.ndarray:
        return np.atleast_2d(xis)[:, :self.config.n_theta]


def flow_architecture(n_theta: int, perm_seed: int = 0) -> FlowArchitecture:
    """8 coupling layers with random permutations, 3x30 ELU nets."""
    return FlowArchitecture(dim=n_theta, n_couplings=8, hidden=(30, 30, 30),
                            permutation="random", perm_seed=perm_seed)


class LorenzProposal:
    """theta-flow times a learned autoregressive one-step path proposal.

    xi rows are (theta, path flattened); theta is sampled through exp() of
    a coupling flow over the unconstrained scale (log-Jacobian included in
    log q). One shared step network maps (theta, i, x_i, alpha(x_i, theta),
    steps to next observation, next observation) to (beta, eta) per step.
    """

    STEP_OUT = 4

    def __init__(self, config: LorenzConfig, y_obs: np.ndarray,
                 theta_arch: FlowArchitecture | None = None,
                 step_hidden: tuple[int, ...] = (80, 80, 80)):
        self.config = config
        self.y_obs = np.asarray(y_obs, dtype=np.float64).reshape(len(config.obs_steps), 3)
        k = config.n_theta
        self.n_theta = k
        self.dim = config.dim
        arch = theta_arch or flow_architecture(k)
        if arch.dim != k:
            raise ValueError("theta flow dimension mismatch")
        self.feat_dim = k + 11
        step_dims = (self.feat_dim, *step_hidden, self.STEP_OUT)
        spec = RealNvp.param_spec(arch, prefix="theta.") + Mlp.param_spec(step_dims, "step.")
        self.params = ParamVector.allocate(spec)
        self.theta_flow = RealNvp(arch, self.params, prefix="theta.")
        self.step_net = Mlp(step_dims, self.params, "step.")
        self._gaps, self._next_obs = _obs_index_features(config, self.y_obs)
        # fixed per-feature scales so the net sees O(1) inputs; the raw
        # feature magnitudes differ by orders (drift vs step gap), which
        # cripples a shared per-coordinate learning rate
        self._feat_scale = np.concatenate([
            np.full(k, 1.0 / (1.0 / config.prior_rate)),          # parameters
            [1.0 / max(1.0, config.n_steps)],                     # current step
            np.full(3, 1.0 / 30.0),                               # state
            np.full(3, 1.0 / 300.0),                              # drift
            [1.0 / max(1.0, np.max(self._gaps))],                 # steps to next obs
            np.full(3, 1.0 / 30.0),                               # next obs value
        ])

    def init_near_identity(self, rng: np.random.Generator) -> None:
        init_near_zero(self.params, rng)

    # -- features -----------------------------------------------------------

    def _features(self, theta: np.ndarray, step: int, x: np.ndarray) -> np.ndarray:
        n = theta.shape[0]
        cols = [
            theta,
            np.full((n, 1), float(step)),
            x,
            drift(x, theta),
            np.full((n, 1), self._gaps[step]),
            np.broadcast_to(self._next_obs[step], (n, 3)),
        ]
        return np.concatenate(cols, axis=1) * self._feat_scale

    def _features_all_steps(self, theta: np.ndarray, path: np.ndarray) -> np.ndarray:
        """(n * n_steps, feat_dim) features for every transition of stored paths."""
        n = theta.shape[0]
        m = self.config.n_steps
        x_prev = path[:, :-1]  # (n, m, 3)
        al = drift(x_prev, theta[:, None, :])
        feats = np.concatenate([
            np.broadcast_to(theta[:, None, :], (n, m, self.n_theta)),
            np.broadcast_to(np.arange(m, dtype=np.float64)[None, :, None], (n, m, 1)),
            x_prev,
            al,
            np.broadcast_to(self._gaps[None, :, None], (n, m, 1)),
            np.broadcast_to(self._next_obs[None], (n, m, 3)),
        ], axis=2)
        return feats.reshape(n * m, self.feat_dim) * self._feat_scale

    # -- sampling -----------------------------------------------------------

    def sample(self, rng: np.random.Generator, n: int) -> FlowSample:
        cfg = self.config
        flow_draw = self.theta_flow.sample(rng, n)
        eta = flow_draw.xi
        theta = np.exp(eta)
        log_q = flow_draw.log_q - np.sum(eta, axis=1)

        path = np.empty((n, cfg.n_steps + 1, 3))
        path[:, 0] = cfg.x0
        x = path[:, 0].copy()
        tripped = np.zeros(n, dtype=bool)
        for i in range(cfg.n_steps):
            out = self.step_net.forward(self._features(theta, i, x))
            beta = out[:, :3]
            gamma = gamma_transform(out[:, 3])
            mean = x + (drift(x, theta) + beta) * cfg.dt
            noise = rng.standard_normal((n, 3))
            proposed = mean + np.sqrt(gamma * cfg.dt)[:, None] * noise
            step_lp = (-1.5 * (LOG_2PI + np.log(gamma * cfg.dt))
                       - 0.5 * np.sum(noise ** 2, axis=1))
            # frozen rows stop evolving and stop accumulating density; their
            # importance weight is exactly zero through the target guard
            x = np.where(tripped[:, None], x, proposed)
            log_q = log_q + np.where(tripped, 0.0, step_lp)
            path[:, i + 1] = x
            tripped |= np.any(np.abs(x) > cfg.guard, axis=1)
        xis = np.concatenate([theta, path[:, 1:].reshape(n, -1)], axis=1)
        return FlowSample(xi=xis, base=flow_draw.base, log_q=log_q)

    def sample_paths(self, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Conditional path rollout at fixed parameters (no freezing)."""
        cfg = self.config
        theta = np.atleast_2d(theta)
        n = theta.shape[0]
        path = np.empty((n, cfg.n_steps + 1, 3))
        path[:, 0] = cfg.x0
        x = path[:, 0].copy()
        for i in range(cfg.n_steps):
            out = self.step_net.forward(self._features(theta, i, x))
            gamma = gamma_transform(out[:, 3])
            mean = x + (drift(x, theta) + out[:, :3]) * cfg.dt
            x = mean + np.sqrt(gamma * cfg.dt)[:, None] * rng.standard_normal((n, 3))
            path[:, i + 1] = x
        return path

    # -- density ------------------------------------------------------------

    def _path_terms(self, theta: np.ndarray, path: np.ndarray):
        cfg = self.config
        n = theta.shape[0]
        m = cfg.n_steps
        feats = self._features_all_steps(theta, path)
        out, cache = self.step_net.forward_cached(feats)
        beta = out[:, :3].reshape(n, m, 3)
        eta_out = out[:, 3].reshape(n, m)
        gamma = gamma_transform(eta_out)
        x_prev = path[:, :-1]
        mean = x_prev + (drift(x_prev, theta[:, None, :]) + beta) * cfg.dt
        resid = path[:, 1:] - mean
        sq = np.sum(resid ** 2, axis=2)
        lp = np.sum(-1.5 * (LOG_2PI + np.log(gamma * cfg.dt)) - sq / (2.0 * gamma * cfg.dt),
                    axis=1)
        return lp, (cache, resid, gamma, eta_out, sq)

    def log_prob(self, xis: np.ndarray) -> np.ndarray:
        """Density of stored (theta, path) points; -inf off the theta support."""
        theta, path, valid = self._split_checked(xis)
        eta = np.log(np.where(valid[:, None], theta, 1.0))
        lp_theta = self.theta_flow.log_prob(eta) - np.sum(eta, axis=1)
        lp_path, _ = self._path_terms(np.where(valid[:, None], theta, 1.0), path)
        return np.where(valid, lp_theta + lp_path, -np.inf)

    def grad_log_prob(self, xis: np.ndarray, coeffs: np.ndarray | None = None,
                      per_sample: bool = False):
        """Unrolled backpropagation through the theta flow and every step.

        Points are fixed; gradients flow only into the parameters. Rows with
        nonpositive theta are outside the proposal support and rejected.
        """
        if per_sample:
            raise NotImplementedError("per-sample gradients are flow-only")
        cfg = self.config
        theta, path, valid = self._split_checked(xis)
        if not np.all(valid):
            raise ValueError("grad_log_prob needs theta > 0 rows")
        n = theta.shape[0]
        m = cfg.n_steps
        if coeffs is None:
            coeffs = np.ones(n)
        coeffs = np.asarray(coeffs, dtype=np.float64)

        eta = np.log(theta)
        lp_eta, grad = self.theta_flow.grad_log_prob(eta, coeffs=coeffs)
        lp_theta = lp_eta - np.sum(eta, axis=1)

        lp_path, (cache, resid, gamma, eta_out, sq) = self._path_terms(theta, path)
        c = coeffs[:, None]
        g_beta = resid / gamma[:, :, None] * c[:, :, None]  # d lp / d beta
        g_gamma = (-1.5 / gamma + sq / (2.0 * gamma ** 2 * cfg.dt)) * c
        g_eta = g_gamma * _gamma_transform_deriv(eta_out)
        out_grad = np.concatenate([g_beta.reshape(n * m, 3),
                                   g_eta.reshape(n * m, 1)], axis=1)
        self.step_net.backward_from_cache(cache, out_grad, grad)
        return lp_theta + lp_path, grad

    def _split_checked(self, xis: np.ndarray):
        xis = np.atleast_2d(np.asarray(xis, dtype=np.float64))
        k = self.n_theta
        theta = xis[:, :k]
        path = np.empty((xis.shape[0], self.config.n_steps + 1, 3))
        path[:, 0] = self.config.x0
        path[:, 1:] = xis[:, k:].reshape(xis.shape[0], self.config.n_steps, 3)
        valid = np.all(theta > 0.0, axis=1)
        return theta, path, valid


def generate_dataset(config: LorenzConfig, rng: np.random.Generator,
                     theta: tuple[float, float, float] = TRUE_DRIFT_THETA,
                     sigma_obs: float = TRUE_SIGMA):
    """One synthetic path plus noisy observations at the configured steps."""
    path = simulate_paths(np.asarray(theta, dtype=np.float64), config, rng)[0]
    obs_states = path[list(config.obs_steps)]
    y = obs_states + sigma_obs * rng.standard_normal(obs_states.shape)
    return y, path


# ---------------------------------------------------------------------------
# checkpointing

def save_proposal(path, prop: LorenzProposal) -> None:
    """Versioned checkpoint of the structured proposal (exact round trip)."""
    import json
    from dataclasses import asdict

    meta = {
        "format_version": 1,
        "kind": "lorenz_proposal",
        "config": asdict(prop.config),
        "theta_arch": json.loads(prop.theta_flow.arch.to_json()),
        "step_hidden": list(prop.step_net.dims[1:-1]),
    }
    np.savez(
        path,
        meta=np.array(json.dumps(meta, sort_keys=True)),
        y_obs=prop.y_obs,
        names=np.array([e.name for e in prop.params.entries]),
        lengths=np.array([e.length for e in prop.params.entries], dtype=np.int64),
        weight_flags=np.array([e.is_weight for e in prop.params.entries], dtype=bool),
        permutations=(np.stack(prop.theta_flow.permutations)
                      if prop.theta_flow.permutations
                      else np.zeros((0, prop.n_theta), dtype=np.int64)),
        values=prop.params.values,
    )


def load_proposal(path) -> LorenzProposal:
    import json

    from ..flow import FlowArchitecture

    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("kind") != "lorenz_proposal":
            raise ValueError(f"not a structured-proposal checkpoint: {meta.get('kind')}")
        cfg = meta["config"]
        cfg["x0"] = tuple(cfg["x0"])
        cfg["obs_steps"] = tuple(cfg["obs_steps"])
        config = LorenzConfig(**cfg)
        arch = FlowArchitecture.from_json(json.dumps(meta["theta_arch"]))
        prop = LorenzProposal(config, data["y_obs"], theta_arch=arch,
                              step_hidden=tuple(meta["step_hidden"]))
        expect = [e.name for e in prop.params.entries]
        if [str(n) for n in data["names"]] != expect:
            raise ValueError("checkpoint layout does not match the rebuilt proposal")
        prop.params.values[:] = data["values"]
        perms = [p for p in data["permutations"]]
        prop.theta_flow.permutations = [np.asarray(p, dtype=np.int64) for p in perms]
        for layer, p in zip((l for l in prop.theta_flow.layers
                             if hasattr(l, "perm")), perms):
            layer.perm = np.asarray(p, dtype=np.int64)
            layer.inv_perm = np.argsort(layer.perm)
        return prop
