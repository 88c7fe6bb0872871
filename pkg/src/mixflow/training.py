"""End-to-end training: planner, alternating updates, checkpoints, selection.

The planner splits training into a warm-up (velocity field only), an
alternating period (one base update after every `flow_steps_per_base_step`
velocity updates), and a cool-down (velocity only, head dropout disabled).
Every random draw — population order, batches, dropout masks, Gumbel
noise, base draws — is a pure function of (seed, epoch, iteration), so
two runs with the same config produce bitwise-identical trajectories.
Model selection follows validation W2 averaged over conditions.
"""

from __future__ import annotations

import copy
import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .base import BasePredictor, predict_base, relaxed_sample_graph, sample_hard
from .data import Population, condition_rng
from .flow import IntegratorConfig, VelocityField, integrate, loss_cfm_baseline, loss_geo, loss_ot
from .metrics import report
from .nn import MlpParams, NonFiniteError, OptState, init_mlp, log_softmax, mlp_forward, opt_step
from .ot import assignment_pairing

__all__ = [
    "TrainingPlan",
    "PlannerDecision",
    "RunConfig",
    "Model",
    "planner_next",
    "train_iteration",
    "fit",
    "FitResult",
    "TrainerState",
    "init_model",
    "generate_samples",
    "checkpoint_to_json",
    "checkpoint_from_json",
]


@dataclass
class TrainingPlan:
    warmup_epochs: int
    alternating_epochs: int
    cooldown_epochs: int
    flow_steps_per_base_step: int = 4

    def __post_init__(self):
        counts = (self.warmup_epochs, self.alternating_epochs, self.cooldown_epochs)
        if any(c < 0 for c in counts) or sum(counts) == 0:
            raise ValueError("periods must be nonnegative with at least one nonzero")
        if self.flow_steps_per_base_step < 1:
            raise ValueError("flow_steps_per_base_step must be >= 1")

    @property
    def total_epochs(self) -> int:
        return self.warmup_epochs + self.alternating_epochs + self.cooldown_epochs


@dataclass
class PlannerDecision:
    mode_train: str  # "velocity_field" | "base_distribution"
    flag_settoeval_H: bool


def planner_next(plan: TrainingPlan, epoch: int, iteration: int) -> PlannerDecision:
    """Per-iteration update target and head-dropout flag.

    Warm-up: always the velocity field, dropout live. Alternating: the
    base gets every (k+1)-th iteration, dropout live. Cool-down: velocity
    field only with head dropout disabled.
    """
    if not 0 <= epoch < plan.total_epochs:
        raise ValueError(f"epoch {epoch} outside the schedule of {plan.total_epochs}")
    if epoch < plan.warmup_epochs:
        return PlannerDecision("velocity_field", False)
    if epoch < plan.warmup_epochs + plan.alternating_epochs:
        k = plan.flow_steps_per_base_step
        if iteration % (k + 1) == k:
            return PlannerDecision("base_distribution", False)
        return PlannerDecision("velocity_field", False)
    return PlannerDecision("velocity_field", True)


@dataclass
class RunConfig:
    model: str = "mixflow"  # or "cfm"
    batch_size: int = 256
    lr: float = 1e-3
    optimizer: str = "adam"  # "sgd" is the plain-gradient-descent variant
    epochs: int = 100
    warmup_frac: float = 0.2
    cooldown_frac: float = 0.2
    flow_steps_per_base_step: int = 4
    v_hidden: tuple = (128, 128)
    p_hidden: tuple = (64,)
    theta_hidden: tuple = (64,)
    n_modes: int = 0  # 0 -> one mode per training condition
    sigma2: float = 1e-2
    mode_source: str = "free_parameters"
    head_dropout: float = 0.1
    temperature_start: float = 1.0
    temperature_end: float = 0.1
    integrator: str = "rk4"
    integrator_steps: int = 100
    seed: int = 0
    val_every: int = 1
    val_samples: int = 1000
    checkpoint_dir: str = ""
    cfm_pairing: str = "independent"
    per_sample_t: bool = False
    share_pairing: bool = False

    def __post_init__(self):
        if self.model not in ("mixflow", "cfm"):
            raise ValueError(f"unknown model {self.model!r}")
        for name in ("batch_size", "epochs", "val_every", "val_samples", "integrator_steps"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ValueError(f"{name} must be positive")
        if self.warmup_frac < 0.0 or self.cooldown_frac < 0.0:
            raise ValueError("phase fractions must be nonnegative")
        if self.warmup_frac + self.cooldown_frac > 1.0 + 1e-12:
            raise ValueError("warmup_frac + cooldown_frac must not exceed 1")

    def plan(self) -> TrainingPlan:
        if self.model == "cfm" or self.epochs == 0:
            return TrainingPlan(max(self.epochs, 1), 0, 0, self.flow_steps_per_base_step)
        warm = int(round(self.warmup_frac * self.epochs))
        cool = int(round(self.cooldown_frac * self.epochs))
        alt = max(self.epochs - warm - cool, 0)
        if warm + alt + cool == 0:
            warm = self.epochs
        return TrainingPlan(warm, alt, cool, self.flow_steps_per_base_step)

    def integrator_config(self) -> IntegratorConfig:
        return IntegratorConfig(self.integrator, self.integrator_steps)

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["v_hidden"] = list(self.v_hidden)
        obj["p_hidden"] = list(self.p_hidden)
        obj["theta_hidden"] = list(self.theta_hidden)
        return obj

    @staticmethod
    def from_json(obj: dict) -> "RunConfig":
        known = {f for f in RunConfig.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        kwargs = dict(obj)
        for key in ("v_hidden", "p_hidden", "theta_hidden"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return RunConfig(**kwargs)


@dataclass
class Model:
    kind: str
    velocity: VelocityField
    base: BasePredictor = None

    def copy(self) -> "Model":
        return copy.deepcopy(self)


def init_model(config: RunConfig, train_pops) -> Model:
    rng = np.random.default_rng([config.seed, 0xC0FFEE])
    dim = train_pops[0].samples.shape[1]
    ddim = len(train_pops[0].descriptor)
    vnet = init_mlp(
        [dim + 1 + ddim, *config.v_hidden, dim], activation="silu", dropout_rate=0.0, rng=rng
    )
    velocity = VelocityField(net=vnet, state_dim=dim, descriptor_dim=ddim)
    if config.model == "cfm":
        return Model("cfm", velocity, None)
    n_modes = config.n_modes if config.n_modes > 0 else len(train_pops)
    weight_head = init_mlp(
        [ddim, *config.p_hidden, n_modes], "relu", config.head_dropout, rng, scale=0.1
    )
    if config.mode_source == "free_parameters":
        # one row per assigned condition, seeded from a single drawn sample;
        # extra cycles (more modes than conditions) draw distinct samples
        theta = np.zeros((n_modes, dim))
        for i in range(n_modes):
            pop = train_pops[i % len(train_pops)]
            cycle = i // len(train_pops)
            key = (config.seed, pop.condition_id, 0xA11) if cycle == 0 else (
                config.seed, pop.condition_id, 0xA11, cycle)
            pick = condition_rng(*key)
            theta[i] = pop.samples[pick.integers(len(pop.samples))]
        base = BasePredictor(
            weight_head=weight_head,
            sigma2=config.sigma2,
            mode_source="free_parameters",
            theta_table=theta,
            n_modes=n_modes,
            dim=dim,
        )
    else:
        mode_head = init_mlp(
            [ddim, *config.theta_hidden, n_modes * dim], "relu", config.head_dropout, rng, scale=0.1
        )
        base = BasePredictor(
            weight_head=weight_head,
            sigma2=config.sigma2,
            mode_source="predicted",
            mode_head=mode_head,
            n_modes=n_modes,
            dim=dim,
        )
    return Model("mixflow", velocity, base)


# -- parameter registry -------------------------------------------------------


def _mlp_entries(prefix: str, params: MlpParams):
    for k in range(len(params.weights)):
        yield f"{prefix}.layer{k}.weight", ("w", params, k)
        yield f"{prefix}.layer{k}.bias", ("b", params, k)


def _param_registry(model: Model, group: str) -> dict:
    entries = {}
    if group == "velocity_field":
        entries.update(_mlp_entries("velocity", model.velocity.net))
    else:
        entries.update(_mlp_entries("base.weight_head", model.base.weight_head))
        if model.base.mode_source == "free_parameters":
            entries["base.theta_table"] = ("t", model.base, None)
        else:
            entries.update(_mlp_entries("base.mode_head", model.base.mode_head))
    return entries


def _get_param(entry):
    kind, owner, k = entry
    if kind == "w":
        return owner.weights[k]
    if kind == "b":
        return owner.biases[k]
    return owner.theta_table


def _set_param(entry, value):
    kind, owner, k = entry
    if kind == "w":
        owner.weights[k] = value
    elif kind == "b":
        owner.biases[k] = value
    else:
        owner.theta_table = value


@dataclass
class TrainerState:
    model: Model
    config: RunConfig
    opt_velocity: OptState
    opt_base: OptState
    epoch: int = 0
    iteration: int = 0


def _iteration_rng(config: RunConfig, epoch: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, epoch, iteration])


def _temperature(config: RunConfig, plan: TrainingPlan, epoch: int) -> float:
    if plan.alternating_epochs == 0 or epoch < plan.warmup_epochs:
        return config.temperature_start
    progress = (epoch - plan.warmup_epochs) / plan.alternating_epochs
    progress = min(max(progress, 0.0), 1.0)
    ratio = config.temperature_end / config.temperature_start
    return float(config.temperature_start * ratio**progress)


def _draw_batch(pop: Population, size: int, rng) -> np.ndarray:
    n = len(pop.samples)
    if n >= size:
        idx = rng.choice(n, size=size, replace=False)
    else:
        idx = rng.choice(n, size=size, replace=True)
    return pop.samples[idx]


def train_iteration(state: TrainerState, decision: PlannerDecision, pop: Population) -> float:
    """One update of exactly one parameter group; returns the loss value."""
    config = state.config
    model = state.model
    rng = _iteration_rng(config, state.epoch, state.iteration)
    x1 = _draw_batch(pop, config.batch_size, rng)
    y = pop.descriptor
    t = rng.uniform(0.0, 1.0, size=len(x1)) if config.per_sample_t else float(rng.uniform())

    if model.kind == "cfm":
        value, grads = loss_cfm_baseline(
            model.velocity, x1, t, y, rng, pairing=config.cfm_pairing
        )
        group = "velocity_field"
    else:
        train_heads = not decision.flag_settoeval_H
        model.base.weight_head.train_mode = train_heads
        if model.base.mode_head is not None:
            model.base.mode_head.train_mode = train_heads
        temperature = _temperature(config, config.plan(), state.epoch)
        if decision.mode_train == "velocity_field":
            group = "velocity_field"
            if config.share_pairing:
                x0 = _relaxed_values(model.base, y, len(x1), temperature, rng)
            else:
                gmm = predict_base(model.base, y, train_heads, rng)
                x0 = sample_hard(gmm, len(x1), rng)
            tau = assignment_pairing(x0, x1)
            value, grads = loss_ot(model.velocity, x0, x1, tau, t, y, rng)
        elif decision.mode_train == "base_distribution":
            group = "base_distribution"
            value, grads = loss_geo(model.base, x1, y, temperature, rng)
        else:
            raise ValueError(f"unknown mode_train {decision.mode_train!r}")

    registry = _param_registry(model, group)
    opt = state.opt_velocity if group == "velocity_field" else state.opt_base
    names = [name for name, _ in grads]
    missing = [n for n in names if n not in registry]
    if missing:
        raise KeyError(f"gradients for unregistered parameters: {missing}")
    arrays = [_get_param(registry[n]) for n in names]
    new_arrays = opt_step(arrays, [g for _, g in grads], opt, names)
    for name, arr in zip(names, new_arrays):
        _set_param(registry[name], arr)
    state.iteration += 1
    return value


def _relaxed_values(bp: BasePredictor, y, n: int, temperature: float, rng) -> np.ndarray:
    logits = mlp_forward(bp.weight_head, np.asarray(y, dtype=np.float64), rng)
    logp = log_softmax(logits)
    theta = (
        bp.theta_table
        if bp.mode_source == "free_parameters"
        else mlp_forward(bp.mode_head, np.asarray(y, dtype=np.float64), rng).reshape(bp.n_modes, bp.dim)
    )
    return relaxed_sample_graph(theta, logp, bp.sigma2, n, temperature, rng).data


# -- sampling and evaluation ---------------------------------------------------


def generate_samples(
    model: Model,
    y: np.ndarray,
    n: int,
    integrator: IntegratorConfig,
    seed: int = 0,
    snapshots=(1.0,),
) -> dict:
    """Deterministic generation: base draw then segment-wise integration."""
    rng = np.random.default_rng([seed, 0x5A11])
    y = np.asarray(y, dtype=np.float64)
    if model.kind == "cfm":
        x = rng.standard_normal((n, model.velocity.state_dim))
    else:
        gmm = predict_base(model.base, y, train_mode=False)
        x = sample_hard(gmm, n, rng)
    snapshots = sorted(set(float(s) for s in snapshots))
    out = {}
    t_prev = 0.0
    for t_snap in snapshots:
        if t_snap < 0.0 or t_snap > 1.0:
            raise ValueError("snapshot times must lie in [0,1]")
        if t_snap > t_prev:
            steps = max(1, int(round(integrator.steps * (t_snap - t_prev))))
            x = integrate(
                model.velocity, x, y, IntegratorConfig(integrator.method, steps), t_prev, t_snap
            )
            t_prev = t_snap
        out[t_snap] = x.copy()
    return out


def _validation_rows(model: Model, config: RunConfig, val_pops, val_targets, epoch: int):
    rows = []
    for pop in val_pops:
        gen = generate_samples(
            model,
            pop.descriptor,
            config.val_samples,
            config.integrator_config(),
            seed=_val_seed(config, pop.condition_id),
        )[1.0]
        rep = report(gen, val_targets[pop.condition_id], seed=config.seed)
        rows.append(
            {
                "epoch": epoch,
                "condition_id": pop.condition_id,
                "mmd": rep.mmd,
                "w1": rep.w1,
                "w2": rep.w2,
                "ed": rep.ed,
            }
        )
    return rows


def _val_seed(config: RunConfig, condition_id: str) -> int:
    return (config.seed * 2654435761 + zlib.crc32(condition_id.encode())) & 0xFFFFFFFF


@dataclass
class FitResult:
    best_checkpoint: dict
    last_checkpoint: dict
    log: list
    best_epoch: int
    best_w2: float


def checkpoint_to_json(model: Model, config: RunConfig, state: TrainerState = None, epoch: int = 0) -> dict:
    return {
        "config": config.to_json(),
        "velocity": model.velocity.to_json(),
        "base": None if model.base is None else model.base.to_json(),
        "opt_state": None
        if state is None
        else {"velocity": state.opt_velocity.to_json(), "base": state.opt_base.to_json()},
        "epoch": epoch,
        "rng_state": {"seed": config.seed, "epoch": epoch, "iteration": 0 if state is None else state.iteration},
    }


def checkpoint_from_json(obj: dict):
    config = RunConfig.from_json(obj["config"])
    velocity = VelocityField.from_json(obj["velocity"])
    base = None if obj.get("base") is None else BasePredictor.from_json(obj["base"])
    model = Model(config.model, velocity, base)
    return model, config


def fit(config: RunConfig, train_pops, val_pops) -> FitResult:
    """Full training with per-epoch validation and best-W2 selection.

    One epoch = one iteration per training condition, with the condition
    drawn uniformly per iteration. On a non-finite loss the run aborts and
    returns the last good checkpoint. The metric log holds one row per
    (validation epoch, condition).
    """
    if not train_pops:
        raise ValueError("training set must be nonempty")
    model = init_model(config, train_pops)
    state = TrainerState(
        model=model,
        config=config,
        opt_velocity=OptState(config.optimizer, lr=config.lr),
        opt_base=OptState(config.optimizer, lr=config.lr),
    )
    plan = config.plan()
    val_targets = {
        pop.condition_id: pop.samples[
            condition_rng(config.seed, pop.condition_id, 0xE7A1).choice(
                len(pop.samples),
                size=min(len(pop.samples), config.val_samples),
                replace=False,
            )
        ]
        for pop in val_pops
    }
    log = []
    best = (float("inf"), -1, model.copy(), None)  # (w2, epoch, model, opt snapshot)

    if config.epochs == 0:
        ckpt = checkpoint_to_json(model, config, state, 0)
        return _finish(FitResult(ckpt, ckpt, [], -1, float("nan")), config)

    epoch = 0
    try:
        for epoch in range(config.epochs):
            state.epoch = epoch
            order_rng = _iteration_rng(config, epoch, 0xFFFF)
            for _ in range(len(train_pops)):
                decision = planner_next(plan, epoch, state.iteration)
                pop = train_pops[order_rng.integers(len(train_pops))]
                train_iteration(state, decision, pop)
            if val_pops and (epoch % config.val_every == 0 or epoch == config.epochs - 1):
                rows = _validation_rows(model, config, val_pops, val_targets, epoch)
                log.extend(rows)
                mean_w2 = float(np.mean([r["w2"] for r in rows]))
                if mean_w2 < best[0]:
                    best = (mean_w2, epoch, model.copy(), None)
    except NonFiniteError:
        last = checkpoint_to_json(best[2] if best[1] >= 0 else model, config, state, epoch)
        return _finish(FitResult(last, last, log, best[1], best[0]), config)

    last_ckpt = checkpoint_to_json(model, config, state, config.epochs - 1)
    if best[1] >= 0:
        best_ckpt = checkpoint_to_json(best[2], config, state, best[1])
        best_ckpt["epoch"] = best[1]
    else:
        best_ckpt = last_ckpt
    return _finish(FitResult(best_ckpt, last_ckpt, log, best[1], best[0]), config)


def _finish(result: FitResult, config: RunConfig) -> FitResult:
    if config.checkpoint_dir:
        out = Path(config.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "best.json", "w") as fh:
            json.dump(result.best_checkpoint, fh)
        with open(out / "last.json", "w") as fh:
            json.dump(result.last_checkpoint, fh)
        with open(out / "metrics.csv", "w") as fh:
            fh.write("epoch,condition_id,mmd,w1,w2,ed\n")
            for r in result.log:
                fh.write(
                    f"{r['epoch']},{r['condition_id']},{r['mmd']!r},{r['w1']!r},{r['w2']!r},{r['ed']!r}\n"
                )
    return result
