"""Minimal differentiable-computation engine for small dense networks.

Float64 numpy arrays wrapped in tape-recorded ``Var`` nodes give exact
reverse-mode gradients for the handful of primitives the losses need:
affine maps, relu/tanh/silu, inverted dropout (mask held constant),
softmax / log-softmax, Gumbel-softmax with frozen noise, sums and
elementwise arithmetic. No graph compiler, no GPU — just enough to train
the velocity field and the mode/weight/dual predictors deterministically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Var",
    "ShapeError",
    "NonFiniteError",
    "MlpParams",
    "MlpVars",
    "OptState",
    "init_mlp",
    "mlp_forward",
    "value_and_grads",
    "softmax",
    "log_softmax",
    "gumbel_softmax",
    "sample_gumbel",
    "opt_step",
]


class ShapeError(ValueError):
    """Raised when array shapes do not chain consistently."""


class NonFiniteError(FloatingPointError):
    """Raised when a non-finite value reaches a place that must stay finite."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A float64 array plus the tape hooks to backprop through it."""

    __slots__ = ("data", "grad", "_parents", "_vjp", "requires_grad")

    def __init__(self, data, parents=(), vjp=None, requires_grad=True):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    # -- graph construction ------------------------------------------------

    def __add__(self, other):
        other = as_var(other)
        out = Var(self.data + other.data, (self, other))
        out._vjp = lambda g: (_unbroadcast(g, self.data.shape), _unbroadcast(g, other.data.shape))
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Var(-self.data, (self,))
        out._vjp = lambda g: (-g,)
        return out

    def __sub__(self, other):
        other = as_var(other)
        out = Var(self.data - other.data, (self, other))
        out._vjp = lambda g: (_unbroadcast(g, self.data.shape), _unbroadcast(-g, other.data.shape))
        return out

    def __rsub__(self, other):
        return as_var(other) - self

    def __mul__(self, other):
        other = as_var(other)
        out = Var(self.data * other.data, (self, other))
        out._vjp = lambda g: (
            _unbroadcast(g * other.data, self.data.shape),
            _unbroadcast(g * self.data, other.data.shape),
        )
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not a supported primitive")
        return self * (1.0 / float(other))

    def __matmul__(self, other):
        other = as_var(other)
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        out = Var(a @ b, (self, other))

        def vjp(g):
            if a.ndim == 1 and b.ndim == 1:          # dot product
                return g * b, g * a
            if a.ndim == 1:                          # (k,) @ (k,m) -> (m,)
                return g @ b.T, np.outer(a, g)
            if b.ndim == 1:                          # (n,k) @ (k,) -> (n,)
                return np.outer(g, b), a.T @ g
            return g @ b.T, a.T @ g                  # (n,k) @ (k,m)

        out._vjp = vjp
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        out = Var(self.data.reshape(shape), (self,))
        out._vjp = lambda g: (g.reshape(self.data.shape),)
        return out

    def sum(self, axis=None, keepdims=False):
        out = Var(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def vjp(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.data.shape).copy(),)

        out._vjp = vjp
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / n

    def relu(self):
        out = Var(np.maximum(self.data, 0.0), (self,))
        out._vjp = lambda g: (g * (self.data > 0.0),)
        return out

    def tanh(self):
        t = np.tanh(self.data)
        out = Var(t, (self,))
        out._vjp = lambda g: (g * (1.0 - t * t),)
        return out

    def silu(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        out = Var(self.data * s, (self,))
        out._vjp = lambda g: (g * (s * (1.0 + self.data * (1.0 - s))),)
        return out

    def exp(self):
        e = np.exp(self.data)
        out = Var(e, (self,))
        out._vjp = lambda g: (g * e,)
        return out

    def log(self):
        out = Var(np.log(self.data), (self,))
        out._vjp = lambda g: (g / self.data,)
        return out

    # -- backprop ----------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        order, seen = [], set()

        def topo(v):
            if id(v) in seen:
                return
            seen.add(id(v))
            for p in v._parents:
                topo(p)
            order.append(v)

        topo(self)
        for v in order:
            v.grad = None
        self.grad = np.ones_like(self.data)
        for v in reversed(order):
            if v._vjp is None or v.grad is None:
                continue
            for parent, g in zip(v._parents, v._vjp(v.grad)):
                if not parent.requires_grad and not parent._parents:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(x, requires_grad=False)


def softmax(x, axis: int = -1):
    """Stable softmax; works on ndarrays and on Vars (with gradient)."""
    if not isinstance(x, Var):
        z = np.asarray(x, dtype=np.float64)
        z = z - z.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)
    s = softmax(x.data, axis=axis)
    out = Var(s, (x,))
    out._vjp = lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return out


def log_softmax(x, axis: int = -1):
    if not isinstance(x, Var):
        z = np.asarray(x, dtype=np.float64)
        z = z - z.max(axis=axis, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    ls = log_softmax(x.data, axis=axis)
    s = np.exp(ls)
    out = Var(ls, (x,))
    out._vjp = lambda g: (g - s * g.sum(axis=axis, keepdims=True),)
    return out


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    return rng.gumbel(size=shape)


def gumbel_softmax(logits, temperature: float, rng: np.random.Generator = None, noise=None):
    """Relaxed one-hot draw: softmax((logits + gumbel) / temperature).

    The noise is treated as a constant of the draw, so gradients flow to
    the logits only. Pass `noise` to pin the perturbation (e.g. for
    finite-difference checks); otherwise it is drawn from `rng`.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    raw = logits.data if isinstance(logits, Var) else np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise NonFiniteError("gumbel_softmax: logits contain non-finite entries")
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax needs an rng when noise is not given")
        noise = sample_gumbel(raw.shape, rng)
    if isinstance(logits, Var):
        return softmax((logits + as_var(noise)) / temperature)
    return softmax((raw + noise) / temperature)


# -- dense networks ---------------------------------------------------------

_ACTIVATIONS = ("relu", "tanh", "silu")


@dataclass
class MlpParams:
    """Stacked dense layers: weights[k] has shape (layer_sizes[k+1], layer_sizes[k])."""

    layer_sizes: list
    weights: list
    biases: list
    activation: str = "relu"
    dropout_rate: float = 0.0
    train_mode: bool = False

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0,1), got {self.dropout_rate}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("weights/biases must hold one entry per layer transition")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_sizes[k + 1], self.layer_sizes[k])
            if w.shape != want:
                raise ShapeError(f"layer {k} weight shape {w.shape} != {want}")
            if b.shape != (self.layer_sizes[k + 1],):
                raise ShapeError(f"layer {k} bias shape {b.shape} != {(self.layer_sizes[k + 1],)}")

    @property
    def in_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_size(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.dropout_rate,
            self.train_mode,
        )

    def to_json(self) -> dict:
        return {
            "layer_sizes": [int(n) for n in self.layer_sizes],
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "activation": self.activation,
            "dropout_rate": self.dropout_rate,
        }

    @staticmethod
    def from_json(obj: dict) -> "MlpParams":
        return MlpParams(
            list(obj["layer_sizes"]),
            [np.asarray(w, dtype=np.float64) for w in obj["weights"]],
            [np.asarray(b, dtype=np.float64) for b in obj["biases"]],
            obj.get("activation", "relu"),
            float(obj.get("dropout_rate", 0.0)),
        )


def init_mlp(layer_sizes, activation="relu", dropout_rate=0.0, rng=None, scale=None) -> MlpParams:
    """He-style initialisation; `scale` overrides the per-layer std."""
    rng = rng or np.random.default_rng(0)
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        std = scale if scale is not None else np.sqrt(2.0 / n_in)
        weights.append(rng.normal(0.0, std, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpParams(list(layer_sizes), weights, biases, activation, dropout_rate, False)


def _dropout_masks(params: MlpParams, rng) -> list:
    """One inverted-dropout mask per hidden layer; None when inactive."""
    n_hidden = len(params.weights) - 1
    if not params.train_mode or params.dropout_rate == 0.0 or n_hidden == 0:
        return [None] * n_hidden
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = 1.0 - params.dropout_rate
    return [
        (rng.random(params.layer_sizes[k + 1]) < keep).astype(np.float64) / keep
        for k in range(n_hidden)
    ]


def _check_input(params: MlpParams, x: np.ndarray):
    if x.shape[-1] != params.in_size:
        raise ShapeError(f"input size {x.shape[-1]} != first layer size {params.in_size}")


def mlp_forward(params: MlpParams, x, rng=None) -> np.ndarray:
    """Plain numpy forward pass; deterministic unless train-mode dropout is live."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(params, x)
    masks = _dropout_masks(params, rng)
    act = {"relu": lambda h: np.maximum(h, 0.0),
           "tanh": np.tanh,
           "silu": lambda h: h / (1.0 + np.exp(-h))}[params.activation]
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if k < last:
            h = act(h)
            if masks[k] is not None:
                h = h * masks[k]
    return h


class MlpVars:
    """Tape-side view of an MlpParams: same forward, gradients on every entry."""

    def __init__(self, params: MlpParams):
        self.params = params
        self.weights = [Var(w) for w in params.weights]
        self.biases = [Var(b) for b in params.biases]

    def forward(self, x, rng=None) -> Var:
        params = self.params
        xd = x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64)
        _check_input(params, xd)
        masks = _dropout_masks(params, rng)
        h = as_var(x)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            wt = Var(w.data.T, (w,))
            wt._vjp = lambda g: (g.T,)
            h = h @ wt + b
            if k < last:
                h = getattr(h, params.activation)()
                if masks[k] is not None:
                    h = h * as_var(masks[k])
        return h

    def variables(self):
        out = []
        for k in range(len(self.weights)):
            out.append((f"layer{k}.weight", self.weights[k]))
            out.append((f"layer{k}.bias", self.biases[k]))
        return out

    def grads(self):
        return [
            (name, np.zeros_like(v.data) if v.grad is None else v.grad)
            for name, v in self.variables()
        ]


def value_and_grads(loss: Var, variables) -> tuple:
    """Backprop `loss` and collect gradients for `variables` (list of Vars)."""
    loss.backward()
    grads = [np.zeros_like(v.data) if v.grad is None else v.grad for v in variables]
    return float(loss.data), grads


# -- optimizer ---------------------------------------------------------------


@dataclass
class OptState:
    """SGD or adaptive-moment accumulator state over a flat parameter list."""

    method: str = "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def ensure_shapes(self, params):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        for acc, p in zip(self.m, params):
            if acc.shape != p.shape:
                raise ShapeError("optimizer state shape does not mirror parameters")

    def to_json(self) -> dict:
        return {
            "method": self.method, "lr": self.lr, "beta1": self.beta1,
            "beta2": self.beta2, "eps": self.eps, "step": self.step,
            "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v],
        }

    @staticmethod
    def from_json(obj: dict) -> "OptState":
        st = OptState(obj["method"], obj["lr"], obj["beta1"], obj["beta2"], obj["eps"], obj["step"])
        st.m = [np.asarray(a, dtype=np.float64) for a in obj["m"]]
        st.v = [np.asarray(a, dtype=np.float64) for a in obj["v"]]
        return st


def opt_step(params, grads, state: OptState, names=None):
    """One update over a flat list of arrays; returns the new list.

    SGD applies exactly `p - lr*g`; adam uses bias-corrected moments.
    A non-finite gradient rejects the whole step and names the offender.
    """
    names = names or [f"param{k}" for k in range(len(params))]
    for name, g in zip(names, grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}; step rejected")
    state.ensure_shapes(params)
    if state.method == "sgd":
        return [p - state.lr * g for p, g in zip(params, grads)]
    if state.method == "adam":
        state.step += 1
        t = state.step
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
            state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
            mhat = state.m[k] / (1.0 - state.beta1 ** t)
            vhat = state.v[k] / (1.0 - state.beta2 ** t)
            out.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
        return out
    raise ValueError(f"unknown optimizer method {state.method!r}")


def dumps_params(params: MlpParams) -> str:
    return json.dumps(params.to_json())
