"""Real NVP normalizing flows over R^D.

A flow is a stack of affine coupling layers separated by fixed permutations,
over a standard normal base. The three operations the training loop needs:

* ``sample``: draw from the flow (base draws kept alongside),
* ``log_prob``: exact density via the inverse pass,
* ``grad_log_prob``: gradient of log q w.r.t. the flow parameters at fixed
  points (the points themselves are treated as constants).

Scale outputs of the coupling nets are soft-clamped with s*tanh(sigma/s)
before exponentiation so a half-trained net cannot overflow exp; at
near-zero initialisation the clamp is inactive to ~1e-15.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .nn import Mlp, ParamVector, init_near_zero

__all__ = [
    "FlowArchitecture",
    "CouplingLayer",
    "PermutationLayer",
    "RealNvp",
    "FlowEvaluationError",
    "init_identity",
    "save_checkpoint",
    "load_checkpoint",
]

LOG_2PI = float(np.log(2.0 * np.pi))


class FlowEvaluationError(RuntimeError):
    """Non-finite intermediate during a density evaluation."""

    def __init__(self, layer_index: int, message: str = ""):
        self.layer_index = layer_index
        super().__init__(message or f"non-finite values at layer {layer_index}")


@dataclass(frozen=True)
class FlowArchitecture:
    """Static description of a coupling flow.

    ``n_couplings`` coupling layers are separated by ``n_couplings - 1``
    fixed permutations ("reverse" order-reversals, or "random" draws from
    ``perm_seed``; a permutation adjacent to the isotropic base would be
    inert, so none is appended). Every coupling net uses the same hidden
    widths with ELU activations.
    """

    dim: int
    n_couplings: int
    hidden: tuple[int, ...]
    permutation: str = "reverse"
    perm_seed: int | None = None
    clamp: float = 10.0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("coupling flows need dim >= 2")
        if self.permutation not in ("reverse", "random"):
            raise ValueError(f"unknown permutation kind {self.permutation!r}")
        if self.permutation == "random" and self.perm_seed is None:
            raise ValueError("random permutations require perm_seed")

    @property
    def split(self) -> int:
        return self.dim // 2

    def net_dims(self) -> tuple[int, ...]:
        return (self.split, *self.hidden, self.dim - self.split)

    def to_json(self) -> str:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "FlowArchitecture":
        d = json.loads(s)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class FlowSample:
    """Draws from a flow with their base-noise and exact log-density."""

    xi: np.ndarray
    base: np.ndarray
    log_q: np.ndarray


def _std_normal_logpdf(z: np.ndarray) -> np.ndarray:
    return -0.5 * z.shape[1] * LOG_2PI - 0.5 * np.sum(z * z, axis=1)


class CouplingLayer:
    """Affine coupling: copy the first d coordinates, shift/scale the rest.

    forward(u): v[:d] = u[:d]; v[d:] = mu + exp(sigma) * u[d:], with
    mu = f_mu(u[:d]) and sigma = f_sigma(u[:d]) (sigma soft-clamped).
    log|det J_forward| = sum(sigma).
    """

    def __init__(self, dim: int, f_mu: Mlp, f_sigma: Mlp, clamp: float = 10.0):
        self.dim = dim
        self.split = dim // 2
        self.f_mu = f_mu
        self.f_sigma = f_sigma
        self.clamp = clamp

    def _mu_sigma(self, head: np.ndarray):
        mu = self.f_mu.forward(head)
        raw = self.f_sigma.forward(head)
        sig = self.clamp * np.tanh(raw / self.clamp)
        return mu, sig

    def forward(self, u: np.ndarray):
        d = self.split
        mu, sig = self._mu_sigma(u[:, :d])
        v = u.copy()
        v[:, d:] = mu + np.exp(sig) * u[:, d:]
        return v, np.sum(sig, axis=1)

    def inverse(self, v: np.ndarray):
        u, _, logdet = self._inverse_impl(v)
        return u, logdet

    def _inverse_impl(self, v: np.ndarray):
        d = self.split
        head = v[:, :d]
        (mu, mu_cache) = self.f_mu.forward_cached(head)
        (raw, sig_cache) = self.f_sigma.forward_cached(head)
        t = np.tanh(raw / self.clamp)
        sig = self.clamp * t
        u = v.copy()
        u[:, d:] = (v[:, d:] - mu) * np.exp(-sig)
        cache = (head, mu_cache, sig_cache, t, sig, u[:, d:].copy())
        return u, cache, -np.sum(sig, axis=1)

    def inverse_backward(self, g_u: np.ndarray, cache, coeffs: np.ndarray,
                         grad_out: np.ndarray | None, per_sample: bool = False):
        """Backprop through the inverse map plus its log-det contribution.

        ``g_u`` is d(objective)/d(u). The layer's -sum(sigma) log-det term is
        seeded here with weight ``coeffs`` per sample. Returns
        d(objective)/d(v) (and, per-sample, this layer's parameter grads).
        """
        d = self.split
        head, mu_cache, sig_cache, t, sig, u_tail = cache
        exp_neg = np.exp(-sig)
        g_tail = g_u[:, d:]
        g_mu = -g_tail * exp_neg
        g_sig = -g_tail * u_tail - coeffs[:, None]
        g_raw = g_sig * (1.0 - t * t)  # soft-clamp derivative
        g_v = np.empty_like(g_u)
        g_v[:, d:] = g_tail * exp_neg
        if per_sample:
            per_mu, gin_mu = self.f_mu.backward_from_cache(mu_cache, g_mu, None, per_sample=True)
            per_sig, gin_sig = self.f_sigma.backward_from_cache(sig_cache, g_raw, None,
                                                                per_sample=True)
            g_v[:, :d] = g_u[:, :d] + gin_mu + gin_sig
            return g_v, (per_mu, per_sig)
        gin_mu = self.f_mu.backward_from_cache(mu_cache, g_mu, grad_out)
        gin_sig = self.f_sigma.backward_from_cache(sig_cache, g_raw, grad_out)
        g_v[:, :d] = g_u[:, :d] + gin_mu + gin_sig
        return g_v, None


class PermutationLayer:
    """Fixed coordinate permutation; volume preserving, never trained."""

    def __init__(self, perm: np.ndarray):
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(perm.size)):
            raise ValueError("not a permutation")
        self.perm = perm
        self.inv_perm = np.argsort(perm)

    def forward(self, u: np.ndarray):
        return u[:, self.perm], np.zeros(u.shape[0])

    def inverse(self, v: np.ndarray):
        return v[:, self.inv_perm], np.zeros(v.shape[0])

    def inverse_backward(self, g_u: np.ndarray):
        # u = v[:, inv_perm]  =>  dv = du routed back through the same gather
        g_v = np.empty_like(g_u)
        g_v[:, self.inv_perm] = g_u
        return g_v


def _build_permutations(arch: FlowArchitecture) -> list[np.ndarray]:
    n = arch.n_couplings - 1
    if arch.permutation == "reverse":
        return [np.arange(arch.dim)[::-1].copy() for _ in range(n)]
    prng = np.random.default_rng(arch.perm_seed)
    return [prng.permutation(arch.dim) for _ in range(n)]


class RealNvp:
    """Coupling-flow density with full support on R^dim.

    Parameters for all coupling nets live in one ParamVector (possibly
    shared with other components); net ``i`` uses slices named
    ``{prefix}c{i}.mu.*`` and ``{prefix}c{i}.sig.*``.
    """

    def __init__(self, arch: FlowArchitecture, params: ParamVector, prefix: str = "",
                 permutations: list[np.ndarray] | None = None):
        self.arch = arch
        self.params = params
        self.prefix = prefix
        dims = arch.net_dims()
        perms = permutations if permutations is not None else _build_permutations(arch)
        if len(perms) != arch.n_couplings - 1:
            raise ValueError("wrong number of permutations")
        self.permutations = [np.asarray(p, dtype=np.int64) for p in perms]
        self.layers: list[CouplingLayer | PermutationLayer] = []
        self.couplings: list[CouplingLayer] = []
        for i in range(arch.n_couplings):
            if i > 0:
                self.layers.append(PermutationLayer(self.permutations[i - 1]))
            f_mu = Mlp(dims, params, f"{prefix}c{i}.mu.")
            f_sig = Mlp(dims, params, f"{prefix}c{i}.sig.")
            layer = CouplingLayer(arch.dim, f_mu, f_sig, clamp=arch.clamp)
            self.layers.append(layer)
            self.couplings.append(layer)

    @staticmethod
    def param_spec(arch: FlowArchitecture, prefix: str = "") -> list[tuple[str, int, bool]]:
        dims = arch.net_dims()
        spec = []
        for i in range(arch.n_couplings):
            spec += Mlp.param_spec(dims, f"{prefix}c{i}.mu.")
            spec += Mlp.param_spec(dims, f"{prefix}c{i}.sig.")
        return spec

    @classmethod
    def create(cls, arch: FlowArchitecture) -> "RealNvp":
        return cls(arch, ParamVector.allocate(cls.param_spec(arch)))

    @property
    def dim(self) -> int:
        return self.arch.dim

    # -- sampling -----------------------------------------------------------

    def sample(self, rng: np.random.Generator, n: int) -> FlowSample:
        """n i.i.d. draws xi = T(z), z ~ N(0, I), with exact log q(xi).

        log q comes from the forward-pass log-determinants, so no inverse
        pass is needed for a flow's own samples.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        z = rng.standard_normal((n, self.dim))
        h = z.copy()
        logdet = np.zeros(n)
        for layer in self.layers:
            h, ld = layer.forward(h)
            logdet += ld
        log_q = _std_normal_logpdf(z) - logdet
        return FlowSample(xi=h, base=z, log_q=log_q)

    def forward(self, z: np.ndarray):
        """Transform base points; returns (xi, total forward log-det)."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        h = z.copy()
        logdet = np.zeros(h.shape[0])
        for layer in self.layers:
            h, ld = layer.forward(h)
            logdet += ld
        return h, logdet

    def inverse(self, xi: np.ndarray):
        """Map points back to base space; returns (z, total inverse log-det)."""
        h = np.atleast_2d(np.asarray(xi, dtype=np.float64))
        h = h.copy()
        logdet = np.zeros(h.shape[0])
        for layer in reversed(self.layers):
            h, ld = layer.inverse(h)
            logdet += ld
        return h, logdet

    # -- density ------------------------------------------------------------

    def log_prob(self, xi: np.ndarray) -> np.ndarray | float:
        """Exact log q(xi) by the inverse pass; finite for all finite xi."""
        arr = np.asarray(xi, dtype=np.float64)
        single = arr.ndim == 1
        h = np.atleast_2d(arr).copy()
        if not np.all(np.isfinite(h)):
            raise ValueError("xi must be finite")
        logdet = np.zeros(h.shape[0])
        for idx, layer in enumerate(reversed(self.layers)):
            h, ld = layer.inverse(h)
            if not (np.all(np.isfinite(h)) and np.all(np.isfinite(ld))):
                raise FlowEvaluationError(len(self.layers) - 1 - idx)
            logdet += ld
        out = _std_normal_logpdf(h) + logdet
        return float(out[0]) if single else out

    def grad_log_prob(self, xi: np.ndarray, coeffs: np.ndarray | None = None,
                      per_sample: bool = False):
        """log q values and the gradient of sum_i coeffs_i log q(xi_i; phi).

        The points are constants; only flow parameters receive gradients.
        With ``per_sample=True`` returns an (n, n_params) matrix of
        unweighted per-point gradients instead of the weighted sum.
        """
        xis = np.atleast_2d(np.asarray(xi, dtype=np.float64))
        n = xis.shape[0]
        if coeffs is None:
            coeffs = np.ones(n)
        coeffs = np.asarray(coeffs, dtype=np.float64)

        h = xis.copy()
        records = []
        for idx, layer in enumerate(reversed(self.layers)):
            if isinstance(layer, CouplingLayer):
                h, cache, ld = layer._inverse_impl(h)
            else:
                h, ld = layer.inverse(h)
                cache = None
            if not np.all(np.isfinite(h)):
                raise FlowEvaluationError(len(self.layers) - 1 - idx)
            records.append((layer, cache, ld))
        z = h
        log_q = _std_normal_logpdf(z) + sum(r[2] for r in records)

        if per_sample:
            ones = np.ones(n)
            per = np.zeros((n, self.params.size))
            g = -z
            for layer, cache, _ in reversed(records):
                if isinstance(layer, CouplingLayer):
                    g, (per_mu, per_sig) = layer.inverse_backward(g, cache, ones, None,
                                                                  per_sample=True)
                    mu = layer.f_mu
                    sig = layer.f_sigma
                    per[:, mu.offset_start:mu.offset_stop] += per_mu
                    per[:, sig.offset_start:sig.offset_stop] += per_sig
                else:
                    g = layer.inverse_backward(g)
            return log_q, per

        grad = np.zeros(self.params.size)
        g = -z * coeffs[:, None]
        for layer, cache, _ in reversed(records):
            if isinstance(layer, CouplingLayer):
                g, _ = layer.inverse_backward(g, cache, coeffs, grad)
            else:
                g = layer.inverse_backward(g)
        return log_q, grad


def init_identity(arch: FlowArchitecture, rng: np.random.Generator) -> RealNvp:
    """Flow whose couplings start as near-identity maps (q ~= N(0, I))."""
    flow = RealNvp.create(arch)
    init_near_zero(flow.params, rng)
    return flow


# ---------------------------------------------------------------------------
# checkpointing

CHECKPOINT_VERSION = 1


def save_checkpoint(path, flow: RealNvp, extra_meta: dict | None = None) -> None:
    """Versioned checkpoint: architecture, layout, permutations, values."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "realnvp",
        "arch": json.loads(flow.arch.to_json()),
        "prefix": flow.prefix,
    }
    if extra_meta:
        meta["extra"] = extra_meta
    names = [e.name for e in flow.params.entries]
    np.savez(
        path,
        meta=np.array(json.dumps(meta, sort_keys=True)),
        names=np.array(names),
        offsets=np.array([e.offset for e in flow.params.entries], dtype=np.int64),
        lengths=np.array([e.length for e in flow.params.entries], dtype=np.int64),
        weight_flags=np.array([e.is_weight for e in flow.params.entries], dtype=bool),
        permutations=(np.stack(flow.permutations)
                      if flow.permutations else np.zeros((0, flow.dim), dtype=np.int64)),
        values=flow.params.values,
    )


def load_checkpoint(path) -> RealNvp:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        if meta.get("kind") != "realnvp":
            raise ValueError(f"not a flow checkpoint: kind={meta.get('kind')}")
        arch = FlowArchitecture.from_json(json.dumps(meta["arch"]))
        spec = [(str(n), int(l), bool(w))
                for n, l, w in zip(data["names"], data["lengths"], data["weight_flags"])]
        params = ParamVector.allocate(spec)
        params.values[:] = data["values"]
        perms = [p for p in data["permutations"]]
        return RealNvp(arch, params, prefix=meta.get("prefix", ""), permutations=perms)
