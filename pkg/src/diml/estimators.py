"""Mechanism estimators fitted by minimising the unrolled trajectory likelihood."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tape as tp
from .dynamics import LearnerParams, Trajectory
from .errors import DomainError, ShapeError
from .likelihood import LikelihoodConfig, dataset_objective, mean_nll
from .mechanisms import (
    TABULATION_CAP,
    CongestionMechanism,
    GameShape,
    Mechanism,
    PublicGoodsMechanism,
    random_tabular_mechanism,
)

log = logging.getLogger(__name__)

Q0_KEY = "_q_init"
LOG_BETA_KEY = "_log_beta"
CSV_COLUMNS = ("epoch", "train_nll", "heldout_nll", "diff_mse", "cfkl_params", "wallclock_s")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 8
    likelihood: LikelihoodConfig = field(default_factory=LikelihoodConfig)
    betas: tuple[float, float] = (0.9, 0.999)
    estimate_beta: bool = False
    seed: int = 0
    eval_every: int = 10
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"moment decays must lie in [0, 1), got {self.betas}")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and eval_every >= 1 are required")


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def optimizer_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
                   lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8
                   ) -> tuple[dict[str, np.ndarray], AdamState]:
    """Adam update with bias-corrected moments; returns new arrays, leaves inputs untouched."""
    b1, b2 = betas
    t = state.t + 1
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(m_out, v_out, t)


# ---------------------------------------------------------------- fitting

@dataclass
class FitResult:
    mechanism: Mechanism
    loss_history: list[float]
    records: list[dict[str, float]]
    epoch_wallclock: list[float]
    config: TrainConfig
    beta: float
    q_init: np.ndarray | None = None
    name: str = "diml"

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records], dtype=np.float64)

    @property
    def final(self) -> dict[str, float]:
        return self.records[-1]


def _split_params(values: Mapping[str, np.ndarray], mech_names: Sequence[str]):
    return {k: values[k] for k in mech_names}


def fit(
    template: Mechanism,
    train: Sequence[Trajectory],
    heldout: Sequence[Trajectory],
    cfg: TrainConfig,
    evaluator: Callable[[Mechanism], Mapping[str, float]] | None = None,
    name: str = "diml",
    progress: Callable[[dict], None] | None = None,
) -> FitResult:
    """Minimise summed trajectory NLL + penalties over the template's parameters with Adam."""
    if not train:
        raise ValueError("no training trajectories")
    for t in list(train) + list(heldout):
        if t.n != template.shape.n or t.actions.max() >= template.shape.k:
            raise ShapeError(
                f"trajectory shape (n={t.n}, max action {t.actions.max()}) does not fit "
                f"mechanism shape (n={template.shape.n}, k={template.shape.k})"
            )
    lcfg = cfg.likelihood
    n, k = template.shape.n, template.shape.k
    mech_names = list(template.params)
    values = {name_: v.copy() for name_, v in template.params.items()}
    if lcfg.q_init == "learnable":
        values[Q0_KEY] = np.zeros((n, k))
    if cfg.estimate_beta:
        values[LOG_BETA_KEY] = np.array(math.log(lcfg.learner.beta))

    def snapshot(vals):
        mech = template.with_params(_split_params(vals, mech_names))
        q0 = vals.get(Q0_KEY)
        beta = float(np.exp(vals[LOG_BETA_KEY])) if LOG_BETA_KEY in vals else lcfg.learner.beta
        return mech, q0, beta

    records: list[dict[str, float]] = []
    wall: list[float] = []
    losses: list[float] = []
    elapsed = 0.0

    def evaluate(epoch: int):
        mech, q0, beta = snapshot(values)
        row = {
            "epoch": epoch,
            "train_nll": mean_nll(mech, train, lcfg, q0, beta),
            "heldout_nll": mean_nll(mech, heldout, lcfg, q0, beta) if heldout else float("nan"),
            "diff_mse": float("nan"),
            "cfkl_params": float("nan"),
            "wallclock_s": elapsed,
        }
        if evaluator is not None:
            row.update(evaluator(mech))
        records.append(row)
        if progress is not None:
            progress({"estimator": name, **row})

    evaluate(0)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    M = len(train)
    for epoch in range(1, cfg.epochs + 1):
        start_time = time.perf_counter()
        order = rng.permutation(M)
        total = 0.0
        for start in range(0, M, cfg.batch_size):
            batch = [train[j] for j in order[start:start + cfg.batch_size]]
            tape = tp.Tape()
            P = {key: tape.param(v, name=key) for key, v in values.items()}
            beta = tp.exp(P[LOG_BETA_KEY]) if cfg.estimate_beta else None
            obj = dataset_objective(template, batch, lcfg, {key: P[key] for key in mech_names}, P.get(Q0_KEY), beta)
            value = obj.item()
            if not math.isfinite(value):
                raise DomainError(f"{name}: objective became non-finite at epoch {epoch}")
            grads = tape.backward(obj)
            grads = {key: grads[P[key]] for key in values}
            tape.release()
            values, state = optimizer_step(values, grads, state, cfg.lr, cfg.betas, cfg.adam_eps)
            total += value
        if not all(np.all(np.isfinite(v)) for v in values.values()):
            raise DomainError(f"{name}: parameters became non-finite at epoch {epoch}")
        losses.append(total / M)
        wall.append(time.perf_counter() - start_time)
        elapsed += wall[-1]
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            evaluate(epoch)
        log.debug("%s epoch %d loss %.4f", name, epoch, losses[-1])

    mech, q0, beta = snapshot(values)
    return FitResult(mech, losses, records, wall, cfg, beta, q0, name)


def fit_diml(train, heldout, template: Mechanism, cfg: TrainConfig, evaluator=None, progress=None) -> FitResult:
    return fit(template, train, heldout, cfg, evaluator, "diml", progress)


def fit_diml_wrong(train, heldout, template: Mechanism, cfg: TrainConfig, wrong: LearnerParams, evaluator=None,
                   progress=None) -> FitResult:
    """DIML with deliberately misspecified learner hyperparameters in the likelihood."""
    cfg = replace(cfg, likelihood=replace(cfg.likelihood, learner=wrong))
    return fit(template, train, heldout, cfg, evaluator, "diml-wrong", progress)


def fit_tabular_mle(train, heldout, shape: GameShape, cfg: TrainConfig, evaluator=None, init_seed: int = 0,
                    init_scale: float = 0.5, cap: int = TABULATION_CAP, progress=None) -> FitResult:
    template = random_tabular_mechanism(shape, seed=init_seed, scale=init_scale, cap=cap)
    return fit(template, train, heldout, cfg, evaluator, "tabular", progress)


STRUCT_FAMILIES = ("congestion", "public_goods")


def struct_template(family: str, shape: GameShape) -> Mechanism:
    if family == "congestion":
        return CongestionMechanism(shape, {"b": np.zeros(shape.k), "kappa": np.float64(0.0)})
    if family == "public_goods":
        return PublicGoodsMechanism(shape, {"gamma": np.float64(0.0), "cost": np.float64(0.0)})
    raise ValueError(f"unknown structural family {family!r}; expected one of {STRUCT_FAMILIES}")


def fit_struct_mle(train, heldout, family: str, shape: GameShape, cfg: TrainConfig, evaluator=None,
                   progress=None) -> FitResult:
    return fit(struct_template(family, shape), train, heldout, cfg, evaluator, "struct", progress)


def smoothed(values: Sequence[float], window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")
