"""Descriptor-conditioned Gaussian-mixture base distribution.

Mode locations come either from a prediction head applied to the
descriptor or from a directly learnable table (one row per training
condition, the synthetic-benchmark variant); mixture weights always come
from a softmax head, so they live on the simplex by construction. Two
sampling paths: hard ancestral sampling for inference, and a
Gumbel-softmax relaxation whose draws stay differentiable with respect
to the mode locations and the weight logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    MlpParams,
    MlpVars,
    ShapeError,
    Var,
    as_var,
    gumbel_softmax,
    log_softmax,
    mlp_forward,
    sample_gumbel,
    softmax,
)

__all__ = [
    "GmmParams",
    "BasePredictor",
    "predict_base",
    "sample_hard",
    "sample_relaxed",
    "relaxed_sample_graph",
]


@dataclass
class GmmParams:
    """I mode locations, simplex weights, one shared isotropic variance."""

    theta: np.ndarray
    p: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.theta.ndim != 2:
            raise ShapeError("theta must be an I x D matrix")
        if self.p.shape != (self.theta.shape[0],):
            raise ShapeError("weight vector length must match the mode count")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta entries must be finite")
        if np.any(self.p < 0) or abs(self.p.sum() - 1.0) > 1e-9:
            raise ValueError("p must be a simplex vector (nonnegative, sum 1 within 1e-9)")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    @property
    def n_modes(self) -> int:
        return self.theta.shape[0]

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    def to_json(self) -> dict:
        return {"theta": self.theta.tolist(), "p": self.p.tolist(), "sigma2": self.sigma2}

    @staticmethod
    def from_json(obj: dict) -> "GmmParams":
        return GmmParams(np.asarray(obj["theta"]), np.asarray(obj["p"]), float(obj["sigma2"]))


@dataclass
class BasePredictor:
    """Heads producing GmmParams from a descriptor.

    mode_source "predicted" runs mode_head and reshapes its output to
    (I, D); "free_parameters" ignores the descriptor and uses theta_table
    directly. The weight head always maps descriptor -> I logits.
    """

    weight_head: MlpParams
    sigma2: float
    mode_source: str = "predicted"
    mode_head: MlpParams = None
    theta_table: np.ndarray = None
    n_modes: int = 0
    dim: int = 0

    def __post_init__(self):
        if self.mode_source not in ("predicted", "free_parameters"):
            raise ValueError(f"unknown mode_source {self.mode_source!r}")
        if self.mode_source == "predicted":
            if self.mode_head is None:
                raise ValueError("predicted mode_source needs a mode_head")
            if self.mode_head.out_size != self.n_modes * self.dim:
                raise ShapeError("mode_head output size must be I*D")
        else:
            if self.theta_table is None:
                raise ValueError("free_parameters mode_source needs a theta_table")
            self.theta_table = np.asarray(self.theta_table, dtype=np.float64)
            if self.theta_table.shape != (self.n_modes, self.dim):
                raise ShapeError("theta_table must be I x D")
        if self.weight_head.out_size != self.n_modes:
            raise ShapeError("weight_head output size must be I")

    def to_json(self) -> dict:
        obj = {
            "mode_source": self.mode_source,
            "sigma2": self.sigma2,
            "n_modes": self.n_modes,
            "dim": self.dim,
            "weight_head": self.weight_head.to_json(),
            "theta": None if self.theta_table is None else self.theta_table.tolist(),
            "mode_head": None if self.mode_head is None else self.mode_head.to_json(),
        }
        return obj

    @staticmethod
    def from_json(obj: dict) -> "BasePredictor":
        return BasePredictor(
            weight_head=MlpParams.from_json(obj["weight_head"]),
            sigma2=float(obj["sigma2"]),
            mode_source=obj["mode_source"],
            mode_head=None if obj["mode_head"] is None else MlpParams.from_json(obj["mode_head"]),
            theta_table=None if obj["theta"] is None else np.asarray(obj["theta"]),
            n_modes=int(obj["n_modes"]),
            dim=int(obj["dim"]),
        )


def predict_base(bp: BasePredictor, y: np.ndarray, train_mode: bool = False, rng=None) -> GmmParams:
    """Run the heads on one descriptor; deterministic when train_mode is off."""
    y = np.asarray(y, dtype=np.float64)
    bp.weight_head.train_mode = train_mode
    logits = mlp_forward(bp.weight_head, y, rng)
    p = softmax(logits)
    if bp.mode_source == "free_parameters":
        theta = bp.theta_table
    else:
        bp.mode_head.train_mode = train_mode
        theta = mlp_forward(bp.mode_head, y, rng).reshape(bp.n_modes, bp.dim)
    return GmmParams(theta=theta, p=p, sigma2=bp.sigma2)


def sample_hard(g: GmmParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Ancestral GMM sampling: pick a component, add isotropic noise."""
    if n < 1:
        raise ValueError("need at least one sample")
    comps = rng.choice(g.n_modes, size=n, p=g.p / g.p.sum())
    eps = rng.standard_normal((n, g.dim))
    return g.theta[comps] + np.sqrt(g.sigma2) * eps


def relaxed_sample_graph(
    theta,
    logp,
    sigma2: float,
    n: int,
    temperature: float,
    rng: np.random.Generator = None,
    gumbel: np.ndarray = None,
    eps: np.ndarray = None,
) -> Var:
    """Differentiable relaxed draw: x_s = sum_i w_si (theta_i + sigma eps_si).

    theta and logp may be Vars (gradients flow to them) or plain arrays.
    The per-sample mixing weights are Gumbel-softmax draws from logp at
    the given temperature; gumbel/eps can be pinned for shared-noise and
    finite-difference comparisons.
    """
    theta = as_var(theta) if not isinstance(theta, Var) else theta
    logp = as_var(logp) if not isinstance(logp, Var) else logp
    I, D = theta.data.shape
    if gumbel is None:
        gumbel = sample_gumbel((n, I), rng)
    if eps is None:
        eps = rng.standard_normal((n, I, D))
    w = gumbel_softmax(logp, temperature, noise=gumbel)  # (n, I) via broadcast noise
    centers = w @ theta
    jitter = (w.reshape(n, I, 1) * as_var(eps)).sum(axis=1)
    return centers + np.sqrt(sigma2) * jitter


def sample_relaxed(g: GmmParams, n: int, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """Array-level relaxed sampling; converges to sample_hard as temperature -> 0."""
    logp = log_softmax(np.log(np.maximum(g.p, 1e-300)))
    out = relaxed_sample_graph(g.theta, logp, g.sigma2, n, temperature, rng)
    return out.data
