"""Conditional velocity field, training losses, and ODE sampling.

The velocity net consumes [state, t, descriptor] as one flat vector and
returns a displacement per unit time. Losses regress it onto paired
displacements along linear interpolants; pairing always comes from the
exact mini-batch assignment. Integration is deterministic Euler or
classic RK4 with a fixed step count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import BasePredictor, relaxed_sample_graph
from .nn import (
    MlpParams,
    MlpVars,
    NonFiniteError,
    ShapeError,
    Var,
    as_var,
    log_softmax,
    mlp_forward,
    value_and_grads,
)
from .ot import assignment_pairing, Pairing

__all__ = [
    "VelocityField",
    "IntegratorConfig",
    "interpolate",
    "velocity_eval",
    "loss_ot",
    "loss_geo",
    "loss_cfm_baseline",
    "integrate",
]


@dataclass
class VelocityField:
    """MLP over state (+) time (+) descriptor -> state-space velocity."""

    net: MlpParams
    state_dim: int
    descriptor_dim: int

    def __post_init__(self):
        if self.net.in_size != self.state_dim + 1 + self.descriptor_dim:
            raise ShapeError("velocity net input must be state_dim + 1 + descriptor_dim")
        if self.net.out_size != self.state_dim:
            raise ShapeError("velocity net output must match the state dimension")

    def to_json(self) -> dict:
        obj = self.net.to_json()
        obj["state_dim"] = self.state_dim
        obj["descriptor_dim"] = self.descriptor_dim
        return obj

    @staticmethod
    def from_json(obj: dict) -> "VelocityField":
        return VelocityField(
            net=MlpParams.from_json(obj),
            state_dim=int(obj["state_dim"]),
            descriptor_dim=int(obj["descriptor_dim"]),
        )


@dataclass
class IntegratorConfig:
    method: str = "rk4"
    steps: int = 100

    def __post_init__(self):
        if self.method not in ("euler", "rk4"):
            raise ValueError(f"unknown integrator {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def interpolate(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """Exact convex combination (1-t) x0 + t x1."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0,1], got {t}")
    return (1.0 - t) * x0 + t * x1


def _time_column(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        col = np.full((n, 1), float(t))
    elif t.shape == (n,):
        col = t[:, None]
    else:
        raise ShapeError(f"t must be a scalar or length-{n} vector, got shape {t.shape}")
    if col.min() < 0.0 or col.max() > 1.0:
        raise ValueError("t values must lie in [0,1]")
    return col


def _stack_inputs(X: np.ndarray, t, y: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    cols = [X, _time_column(t, n)]
    if y.size:
        cols.append(np.broadcast_to(y, (n, y.size)))
    return np.concatenate(cols, axis=1)


_EVAL_BLOCK = 256


def _stable_forward(net: MlpParams, X: np.ndarray) -> np.ndarray:
    """Eval-mode forward in fixed-size padded blocks.

    Every gemm sees the same (block, features) shape regardless of how
    many points the caller batched together, so each row's output is
    bitwise independent of its batch — the integrator's batching
    invariance rests on this.
    """
    n, d = X.shape
    nb = -(-n // _EVAL_BLOCK)
    h = np.zeros((nb * _EVAL_BLOCK, d))
    h[:n] = X
    act = {"relu": lambda z: np.maximum(z, 0.0),
           "tanh": np.tanh,
           "silu": lambda z: z / (1.0 + np.exp(-z))}[net.activation]
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = np.matmul(h.reshape(nb, _EVAL_BLOCK, h.shape[1]), w.T).reshape(nb * _EVAL_BLOCK, -1)
        h += b
        if k < last:
            h = act(h)
    return h[:n]


def velocity_eval(v: VelocityField, X: np.ndarray, t: float, y: np.ndarray, rng=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inputs = _stack_inputs(X, t, y)
    if rng is None and not v.net.train_mode:
        return _stable_forward(v.net, inputs)
    return mlp_forward(v.net, inputs, rng)


def _squared_residual_loss(out: Var, disp: np.ndarray) -> Var:
    r = out - as_var(disp)
    return (r * r).sum(axis=1).mean()


def loss_ot(
    v: VelocityField,
    base_samples: np.ndarray,
    target_samples: np.ndarray,
    tau: Pairing,
    t: float,
    y: np.ndarray,
    rng=None,
):
    """Velocity regression onto paired displacements at the interpolant.

    Base samples are constants on this path: only the velocity net
    receives gradients. Returns (loss, [(name, grad)]).
    """
    x0 = np.asarray(base_samples, dtype=np.float64)
    x1 = np.asarray(target_samples, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError("base and target batches must have identical shape")
    matched = x1[tau.tau]
    tcol = _time_column(t, x0.shape[0])
    xt = (1.0 - tcol) * x0 + tcol * matched
    disp = matched - x0
    nv = MlpVars(v.net)
    out = nv.forward(_stack_inputs(xt, t, np.asarray(y, dtype=np.float64)), rng)
    loss = _squared_residual_loss(out, disp)
    value, _ = value_and_grads(loss, [var for _, var in nv.variables()])
    return value, [(f"velocity.{name}", g) for name, g in nv.grads()]


def loss_cfm_baseline(
    v: VelocityField,
    target_samples: np.ndarray,
    t: float,
    y: np.ndarray,
    rng: np.random.Generator,
    pairing: str = "independent",
    base_samples: np.ndarray = None,
):
    """Fixed standard-normal base; independent coupling by default."""
    x1 = np.asarray(target_samples, dtype=np.float64)
    x0 = rng.standard_normal(x1.shape) if base_samples is None else np.asarray(base_samples)
    if pairing == "ot":
        tau = assignment_pairing(x0, x1)
    elif pairing == "independent":
        tau = Pairing(np.arange(x1.shape[0]))
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    return loss_ot(v, x0, x1, tau, t, y, rng)


def loss_geo(
    bp: BasePredictor,
    target_samples: np.ndarray,
    y: np.ndarray,
    temperature: float,
    rng: np.random.Generator,
):
    """Mean squared paired distance between relaxed base draws and targets.

    Gradients reach the weight head and the mode head (or the free mode
    table); the pairing is recomputed on the drawn values and treated as
    a constant of the draw. Returns (loss, [(name, grad)]).
    """
    x1 = np.asarray(target_samples, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x1.shape[0]

    wv = MlpVars(bp.weight_head)
    logits = wv.forward(y, rng)
    logp = log_softmax(logits)

    variables = [(f"base.weight_head.{name}", var) for name, var in wv.variables()]
    if bp.mode_source == "free_parameters":
        theta = Var(bp.theta_table)
        variables.append(("base.theta_table", theta))
    else:
        mv = MlpVars(bp.mode_head)
        theta = mv.forward(y, rng).reshape(bp.n_modes, bp.dim)
        variables.extend((f"base.mode_head.{name}", var) for name, var in mv.variables())

    x0 = relaxed_sample_graph(theta, logp, bp.sigma2, n, temperature, rng)
    tau = assignment_pairing(x0.data, x1)
    loss = _squared_residual_loss(x0, x1[tau.tau])
    value, grads = value_and_grads(loss, [var for _, var in variables])
    return value, [(name, g) for (name, _), g in zip(variables, grads)]


def integrate(
    v: VelocityField,
    x0: np.ndarray,
    y: np.ndarray,
    cfg: IntegratorConfig = None,
    t0: float = 0.0,
    t1: float = 1.0,
) -> np.ndarray:
    """Deterministic trajectory endpoint of dx/dt = v(x, t; y)."""
    cfg = cfg or IntegratorConfig()
    x = np.array(x0, dtype=np.float64, copy=True)
    y = np.asarray(y, dtype=np.float64)
    h = (t1 - t0) / cfg.steps
    f = lambda state, tt: velocity_eval(v, state, tt, y)
    # divergence is detected by the finiteness check, not by float warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(cfg.steps):
            t = t0 + k * h
            if cfg.method == "euler":
                x = x + h * f(x, t)
            else:
                k1 = f(x, t)
                k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
                k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
                k4 = f(x + h * k3, t + h)
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(f"integration produced non-finite state at step {k}")
    return x
