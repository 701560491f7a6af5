"""Dense-network numeric core.

Fixed-architecture MLPs stored as flat float64 parameter vectors, with
exact reverse-mode gradients w.r.t. parameters and inputs, a manual Adam
optimizer, and a central-difference gradient oracle. Everything is double
precision; the verification suites rely on tight tolerances.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up with the declared layers."""


@dataclass
class NetworkParams:
    """Flat parameter vector for an MLP, plus layer-shape metadata.

    values holds, per layer, the weight matrix (in*out, row-major) followed
    by the bias (out). Consecutive layer shapes must compose.
    """

    layer_shapes: list[tuple[int, int]]
    activations: list[str]
    values: np.ndarray

    def __post_init__(self):
        if len(self.activations) != len(self.layer_shapes):
            raise ShapeError("one activation tag per layer required")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ShapeError(f"unknown activation {act!r}")
        for (_, out_prev), (in_next, _) in zip(self.layer_shapes, self.layer_shapes[1:]):
            if out_prev != in_next:
                raise ShapeError(
                    f"layer shapes do not compose: out={out_prev} vs next in={in_next}"
                )
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != (self.n_params,):
            raise ShapeError(
                f"expected {self.n_params} parameter values, got {self.values.shape}"
            )

    @property
    def n_params(self) -> int:
        return sum(d_in * d_out + d_out for d_in, d_out in self.layer_shapes)

    @property
    def in_dim(self) -> int:
        return self.layer_shapes[0][0]

    @property
    def out_dim(self) -> int:
        return self.layer_shapes[-1][1]

    def layer_views(self):
        """Per-layer (weight, bias) views into the flat value buffer."""
        out = []
        ofs = 0
        for d_in, d_out in self.layer_shapes:
            w = self.values[ofs : ofs + d_in * d_out].reshape(d_in, d_out)
            ofs += d_in * d_out
            b = self.values[ofs : ofs + d_out]
            ofs += d_out
            out.append((w, b))
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams(list(self.layer_shapes), list(self.activations), self.values.copy())

    def with_values(self, values: np.ndarray) -> "NetworkParams":
        return NetworkParams(list(self.layer_shapes), list(self.activations), np.asarray(values))


@dataclass
class GradVector:
    values: np.ndarray
    wrt: str  # "parameters" or "inputs"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.wrt not in ("parameters", "inputs"):
            raise ValueError(f"bad wrt tag {self.wrt!r}")


def init_network(dims, activations, rng) -> NetworkParams:
    """Create an MLP with layer widths `dims` (e.g. [2, 32, 32, 1]).

    Weights and biases are drawn uniformly from [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    """
    shapes = list(zip(dims[:-1], dims[1:]))
    chunks = []
    for d_in, d_out in shapes:
        bound = 1.0 / np.sqrt(d_in)
        chunks.append(rng.uniform(-bound, bound, size=d_in * d_out + d_out))
    return NetworkParams(shapes, list(activations), np.concatenate(chunks))


def _apply_activation(z, act):
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    return z


def _activation_deriv(z, post, act):
    # ReLU subgradient at exactly 0 is 0 by convention.
    if act == "relu":
        return (z > 0.0).astype(np.float64)
    if act == "tanh":
        return 1.0 - post * post
    return np.ones_like(z)


def forward(net: NetworkParams, x) -> np.ndarray:
    """Evaluate the network. Accepts a single input vector or an (n, in) batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[-1] != net.in_dim:
        raise ShapeError(f"input dim {X.shape[-1]} != first layer in-dim {net.in_dim}")
    for (w, b), act in zip(net.layer_views(), net.activations):
        X = _apply_activation(X @ w + b, act)
    return X[0] if single else X


def forward_cached(net: NetworkParams, X):
    """Batched forward keeping pre/post-activation caches for backprop."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise ShapeError(f"expected (n, {net.in_dim}) input, got {X.shape}")
    pre, post = [], [X]
    for (w, b), act in zip(net.layer_views(), net.activations):
        z = post[-1] @ w + b
        pre.append(z)
        post.append(_apply_activation(z, act))
    return post[-1], (pre, post)


def backprop(net: NetworkParams, cache, upstream):
    """Reverse pass for the scalar sum_i upstream_i . f(x_i).

    Returns (flat parameter gradient, input gradient with the batch shape).
    """
    pre, post = cache
    delta = np.asarray(upstream, dtype=np.float64)
    if delta.shape != pre[-1].shape:
        raise ShapeError(f"upstream shape {delta.shape} != output shape {pre[-1].shape}")
    views = net.layer_views()
    pieces = [None] * len(views)
    for i in range(len(views) - 1, -1, -1):
        w, _ = views[i]
        delta = delta * _activation_deriv(pre[i], post[i + 1], net.activations[i])
        gw = post[i].T @ delta
        gb = delta.sum(axis=0)
        pieces[i] = np.concatenate([gw.ravel(), gb])
        delta = delta @ w.T
    return np.concatenate(pieces), delta


def grad_params(net: NetworkParams, x, upstream) -> GradVector:
    """Exact gradient of upstream . forward(net, x) w.r.t. the flat parameters."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    U = upstream[None, :] if single else upstream
    _, cache = forward_cached(net, X)
    g, _ = backprop(net, cache, U)
    return GradVector(g, "parameters")


def grad_input(net: NetworkParams, x, upstream) -> GradVector:
    """Exact gradient of upstream . forward(net, x) w.r.t. the input entries."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    U = upstream[None, :] if single else upstream
    _, cache = forward_cached(net, X)
    _, gx = backprop(net, cache, U)
    return GradVector(gx[0] if single else gx, "inputs")


@dataclass
class AdamState:
    rate: float
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_net(cls, net: NetworkParams, rate: float, **kw) -> "AdamState":
        n = net.n_params
        return cls(rate=rate, first_moment=np.zeros(n), second_moment=np.zeros(n), **kw)


def adam_step(state: AdamState, net: NetworkParams, grad, direction: str = "descent"):
    """One Adam update with bias correction, in place. Returns (net, state)."""
    g = grad.values if isinstance(grad, GradVector) else np.asarray(grad, dtype=np.float64)
    if isinstance(grad, GradVector) and grad.wrt != "parameters":
        raise ValueError("adam_step requires a parameter gradient")
    if g.shape != net.values.shape:
        raise ShapeError(f"gradient length {g.shape} != parameter length {net.values.shape}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient entries in adam_step")
    if direction not in ("ascent", "descent"):
        raise ValueError(f"bad direction {direction!r}")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    state.first_moment *= b1
    state.first_moment += (1.0 - b1) * g
    state.second_moment *= b2
    state.second_moment += (1.0 - b2) * g * g
    m_hat = state.first_moment / (1.0 - b1 ** state.step_count)
    v_hat = state.second_moment / (1.0 - b2 ** state.step_count)
    delta = state.rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    if direction == "ascent":
        net.values += delta
    else:
        net.values -= delta
    return net, state


def finite_diff_grad(f, point, h: float) -> GradVector:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    point = np.array(point, dtype=np.float64)
    g = np.empty_like(point)
    for i in range(point.size):
        orig = point[i]
        point[i] = orig + h
        f_plus = f(point)
        point[i] = orig - h
        f_minus = f(point)
        point[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        g[i] = (f_plus - f_minus) / (2.0 * h)
    return GradVector(g, "parameters")


_MAGIC = b"DPGM"
_VERSION = 1


def save_params(net: NetworkParams, path) -> None:
    """Little-endian binary snapshot: magic, version, layer count, shapes,
    activation codes, then the raw doubles."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(net.layer_shapes)))
        for d_in, d_out in net.layer_shapes:
            fh.write(struct.pack("<II", d_in, d_out))
        for act in net.activations:
            fh.write(struct.pack("<I", _ACT_CODE[act]))
        fh.write(net.values.astype("<f8").tobytes())


def load_params(path) -> NetworkParams:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a parameter snapshot (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        (n_layers,) = struct.unpack("<I", fh.read(4))
        shapes = [struct.unpack("<II", fh.read(8)) for _ in range(n_layers)]
        acts = [ACTIVATIONS[struct.unpack("<I", fh.read(4))[0]] for _ in range(n_layers)]
        n = sum(i * o + o for i, o in shapes)
        values = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
    return NetworkParams([tuple(s) for s in shapes], acts, values)
