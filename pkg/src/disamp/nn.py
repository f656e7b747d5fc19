"""Small dense networks with hand-written reverse-mode gradients.

Everything is float64 numpy. Parameters live in a single flat vector
(`ParamVector`) shared by all networks of a model, so one optimizer step
updates every component and gradients are accumulated into one flat array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ParamVector",
    "DenseLayer",
    "Mlp",
    "mlp_forward",
    "mlp_backward",
    "init_near_zero",
    "l1_penalty_grad",
]


# ---------------------------------------------------------------------------
# activations

def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_deriv(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_deriv(x):
    # sigmoid, computed without overflow on large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _identity(x):
    return x


def _one(x):
    return np.ones_like(x)


ACTIVATIONS = {
    "elu": (_elu, _elu_deriv),
    "softplus": (_softplus, _softplus_deriv),
    "identity": (_identity, _one),
}


# ---------------------------------------------------------------------------
# flat parameter storage

@dataclass(frozen=True)
class ParamSlice:
    name: str
    offset: int
    length: int
    is_weight: bool


class ParamVector:
    """Flat float64 vector with a named, non-overlapping slice layout.

    Slices tile [0, size) in declaration order. `view` returns writable
    views, so edits through a view are visible in `values` and vice versa.
    """

    def __init__(self, entries: list[ParamSlice], values: np.ndarray):
        self.entries = list(entries)
        self.values = values
        self._index = {e.name: e for e in self.entries}
        expect = 0
        for e in self.entries:
            if e.offset != expect:
                raise ValueError(f"slice {e.name!r} not contiguous at {expect}")
            expect += e.length
        if values.shape != (expect,) or values.dtype != np.float64:
            raise ValueError("values must be a float64 vector matching the layout")

    @classmethod
    def allocate(cls, spec: list[tuple[str, int, bool]]) -> "ParamVector":
        """Build a zeroed vector from (name, length, is_weight) entries."""
        entries = []
        offset = 0
        for name, length, is_weight in spec:
            entries.append(ParamSlice(name, offset, length, is_weight))
            offset += length
        return cls(entries, np.zeros(offset))

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def layout(self) -> dict[str, tuple[int, int]]:
        return {e.name: (e.offset, e.length) for e in self.entries}

    def slice_entry(self, name: str) -> ParamSlice:
        return self._index[name]

    def view(self, name: str) -> np.ndarray:
        e = self._index[name]
        return self.values[e.offset:e.offset + e.length]

    def weight_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        for e in self.entries:
            if e.is_weight:
                mask[e.offset:e.offset + e.length] = True
        return mask

    def unpack(self) -> dict[str, np.ndarray]:
        """Named views of every slice (mutating them mutates `values`)."""
        return {e.name: self.view(e.name) for e in self.entries}

    def pack(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        """Inverse of `unpack`: reassemble a flat vector from named parts."""
        out = np.empty(self.size)
        for e in self.entries:
            part = np.asarray(parts[e.name], dtype=np.float64).ravel()
            if part.size != e.length:
                raise ValueError(f"part {e.name!r} has length {part.size}, expected {e.length}")
            out[e.offset:e.offset + e.length] = part
        return out

    def copy_values(self) -> np.ndarray:
        return self.values.copy()

    def set_values(self, values: np.ndarray) -> None:
        self.values[:] = values


# ---------------------------------------------------------------------------
# layers and networks

class DenseLayer:
    """y = act(W x + b) with W of shape (out_dim, in_dim)."""

    def __init__(self, weights: np.ndarray, biases: np.ndarray, activation: str):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if weights.ndim != 2 or biases.shape != (weights.shape[0],):
            raise ValueError("inconsistent weight/bias shapes")
        self.weights = weights
        self.biases = biases
        self.activation = activation

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        act, _ = ACTIVATIONS[self.activation]
        return act(x @ self.weights.T + self.biases)


class Mlp:
    """Feed-forward stack over a shared ParamVector.

    `dims` chains layer sizes, e.g. (2, 10, 10, 1). Hidden layers use
    `hidden_activation`, the last layer `output_activation`. Weight and
    bias arrays are views into `params`, named `{prefix}l{i}.w` / `.b`.
    """

    def __init__(self, dims, params: ParamVector, prefix: str = "",
                 hidden_activation: str = "elu", output_activation: str = "identity"):
        dims = tuple(int(d) for d in dims)
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        self.dims = dims
        self.prefix = prefix
        self.params = params
        self.layers: list[DenseLayer] = []
        self._offsets: list[tuple[int, int]] = []  # (w_offset, b_offset) per layer
        n_layers = len(dims) - 1
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            w_entry = params.slice_entry(f"{prefix}l{i}.w")
            b_entry = params.slice_entry(f"{prefix}l{i}.b")
            w = params.view(w_entry.name).reshape(dout, din)
            b = params.view(b_entry.name)
            act = output_activation if i == n_layers - 1 else hidden_activation
            self.layers.append(DenseLayer(w, b, act))
            self._offsets.append((w_entry.offset, b_entry.offset))
        self.offset_start = self._offsets[0][0]
        self.offset_stop = self._offsets[-1][1] + dims[-1]

    @staticmethod
    def param_spec(dims, prefix: str = "") -> list[tuple[str, int, bool]]:
        spec = []
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            spec.append((f"{prefix}l{i}.w", din * dout, True))
            spec.append((f"{prefix}l{i}.b", dout, False))
        return spec

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    @property
    def n_params(self) -> int:
        return self.offset_stop - self.offset_start

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.input_dim:
            raise ValueError(f"input dim {h.shape[1]} != {self.input_dim}")
        for layer in self.layers:
            h = layer.forward(h)
        return h[0] if single else h

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping per-layer inputs and pre-activations."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim == 1:
            h = h[None, :]
        if h.shape[1] != self.input_dim:
            raise ValueError(f"input dim {h.shape[1]} != {self.input_dim}")
        cache = []
        for layer in self.layers:
            pre = h @ layer.weights.T + layer.biases
            cache.append((h, pre))
            h = ACTIVATIONS[layer.activation][0](pre)
        return h, cache

    def backward_from_cache(self, cache, out_grad: np.ndarray, grad_out: np.ndarray | None,
                            per_sample: bool = False):
        """Backpropagate `out_grad` (n, out_dim) through a cached forward pass.

        Summed mode accumulates parameter gradients (summed over the batch)
        into the flat array `grad_out` at this net's offsets and returns the
        input gradient (n, in_dim). Per-sample mode instead returns
        (per_sample_grads (n, n_params), input_grad).
        """
        g = np.asarray(out_grad, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        n = g.shape[0]
        per = np.zeros((n, self.n_params)) if per_sample else None
        base = self.offset_start
        for layer, (x_in, pre), (w_off, b_off) in zip(
                reversed(self.layers), reversed(cache), reversed(self._offsets)):
            dact = ACTIVATIONS[layer.activation][1](pre)
            gz = g * dact
            if per_sample:
                gw = np.einsum("no,ni->noi", gz, x_in).reshape(n, -1)
                per[:, w_off - base:w_off - base + gw.shape[1]] += gw
                per[:, b_off - base:b_off - base + layer.out_dim] += gz
            else:
                gw = gz.T @ x_in  # (out, in), summed over batch
                grad_out[w_off:w_off + gw.size] += gw.ravel()
                grad_out[b_off:b_off + layer.out_dim] += gz.sum(axis=0)
            g = gz @ layer.weights
        if per_sample:
            return per, g
        return g


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Deterministic forward pass; accepts a vector or an (n, in_dim) batch."""
    return net.forward(x)


def mlp_backward(net: Mlp, x: np.ndarray, out_grad: np.ndarray):
    """Exact gradients of out_grad . output w.r.t. parameters and input.

    Returns (param_grad, input_grad) where param_grad is the flat gradient
    over this net's own slice of the parameter vector, ordered
    (l0.w, l0.b, l1.w, ...), and input_grad matches the rank of `x`.
    Batched inputs accumulate parameter gradients over rows.
    """
    single = np.asarray(x).ndim == 1
    _, cache = net.forward_cached(x)
    grad = np.zeros(net.params.size)
    gin = net.backward_from_cache(cache, out_grad, grad)
    pgrad = grad[net.offset_start:net.offset_stop].copy()
    return pgrad, (gin[0] if single else gin)


# ---------------------------------------------------------------------------
# initialisation and regularisation

def truncated_normal(shape, rng: np.random.Generator, sd: float = 0.001,
                     num_sd: float = 2.0) -> np.ndarray:
    """N(0, sd^2) draws, resampled until within num_sd standard deviations."""
    out = rng.normal(0.0, sd, size=shape)
    bad = np.abs(out) > num_sd * sd
    while bad.any():
        out[bad] = rng.normal(0.0, sd, size=int(bad.sum()))
        bad = np.abs(out) > num_sd * sd
    return out


def init_near_zero(params: ParamVector, rng: np.random.Generator,
                   sd: float = 0.001) -> None:
    """Set biases to exactly zero and weights to small truncated normals."""
    for e in params.entries:
        v = params.view(e.name)
        if e.is_weight:
            v[:] = truncated_normal(e.length, rng, sd=sd)
        else:
            v[:] = 0.0


def l1_penalty_grad(params: ParamVector, strength: float = 1e-4) -> np.ndarray:
    """Subgradient of strength * sum |w| over weight slices only.

    Biases contribute zero. sign(0) = 0, so exactly-zero weights are left
    alone by the penalty.
    """
    if not np.isfinite(strength) or strength < 0:
        raise ValueError("strength must be finite and >= 0")
    grad = np.zeros(params.size)
    if strength == 0.0:
        return grad
    mask = params.weight_mask()
    grad[mask] = strength * np.sign(params.values[mask])
    return grad
