"""Unrolled trajectory likelihood under logit-Q dynamics.

Scores are replayed along the observed actions: at every step each agent's
score row moves toward the counterfactual payoffs imputed by the candidate
mechanism, and the next observed action is scored under the induced logit
policy. The first joint action of a trajectory is conditioned on, never scored.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tape as tp
from .dynamics import LearnerParams, Trajectory, logit_policy
from .errors import DomainError, ShapeError
from .mechanisms import Mechanism, check_joint
from .tape import Tensor


@dataclass(frozen=True)
class LikelihoodConfig:
    learner: LearnerParams = field(default_factory=LearnerParams)
    q_init: str = "zeros"              # "zeros" | "learnable"
    truncation: int = 0                # 0 disables truncated backprop
    lambda_budget: float = 1e-3
    lambda_magnitude: float = 1e-4

    def __post_init__(self):
        if self.q_init not in ("zeros", "learnable"):
            raise ValueError(f"q_init must be 'zeros' or 'learnable', got {self.q_init!r}")
        if self.truncation < 0:
            raise ValueError("truncation window must be >= 0")
        if self.lambda_budget < 0 or self.lambda_magnitude < 0:
            raise ValueError("regularisation weights must be non-negative")


def build_counterfactual_tensor(m: Mechanism, a_obs, P: Mapping[str, Tensor] | None = None) -> Tensor:
    """n x k payoffs: row i holds agent i's payoff for each own action, opponents fixed at ``a_obs``."""
    a_obs = check_joint(m.shape, a_obs)
    if a_obs.ndim != 1:
        raise ShapeError("build_counterfactual_tensor takes a single joint action")
    return m.counterfactual(P, a_obs[None]).reshape(m.shape.n, m.shape.k)


def _stack(trajs: Sequence[Trajectory]) -> np.ndarray:
    return np.stack([t.actions for t in trajs])


def batch_nll(
    m: Mechanism,
    actions: np.ndarray,
    cfg: LikelihoodConfig,
    P: Mapping[str, Tensor] | None = None,
    q0: Tensor | np.ndarray | None = None,
    beta: Tensor | float | None = None,
) -> Tensor:
    """Per-trajectory negative log-likelihood for equal-length trajectories (B, T, n) -> (B,)."""
    actions = check_joint(m.shape, actions)
    B, T, n = actions.shape
    k = m.shape.k
    if T < 2:
        raise ShapeError("trajectories need at least two steps")
    if cfg.truncation and cfg.truncation > T - 1:
        raise ValueError(f"truncation window {cfg.truncation} exceeds T-1 = {T - 1}")
    learner = cfg.learner
    if beta is None:
        beta = learner.beta
    if q0 is None:
        q0 = np.zeros((n, k))
    prev = actions[:, :-1].transpose(1, 0, 2).reshape(-1, n)            # time-major
    nxt = actions[:, 1:].transpose(1, 0, 2)                             # (T-1, B, n)
    U = tp.reshape(m.counterfactual(P, prev), (T - 1, B, n, k))
    Q = tp.ewma_scan(U, q0, learner.alpha, cfg.truncation)
    probs = tp.pick(logit_policy(Q, beta, learner.epsilon), nxt)
    try:
        logp = tp.log(probs)
    except DomainError:
        raise DomainError(
            "an observed action has zero probability under the model; use an exploration rate epsilon > 0"
        ) from None
    return tp.neg(tp.sum(logp, axis=(0, 2)))


def trajectory_nll(m: Mechanism, traj: Trajectory, cfg: LikelihoodConfig, P=None, q0=None, beta=None) -> Tensor:
    return tp.sum(batch_nll(m, traj.actions[None], cfg, P, q0, beta))


def replay_scores(m: Mechanism, traj: Trajectory, cfg: LikelihoodConfig) -> np.ndarray:
    """Scores Q(2..T) reached by replaying the observed actions, shape (T-1, n, k)."""
    T, n = traj.actions.shape
    U = m.counterfactual(None, traj.actions[:-1]).value
    return tp.ewma_scan(U, np.zeros((n, m.shape.k)), cfg.learner.alpha).value


def regularizers(m: Mechanism, rows: np.ndarray, P=None) -> tuple[Tensor, Tensor]:
    """(mean (sum_i r_i)^2, mean r_i^2) over the given joint actions."""
    if P is None:
        P = m.consts()
    r = m.payoff_rows(P, rows)
    budget = tp.mean(tp.square(tp.sum(r, axis=1)))
    magnitude = tp.mean(tp.square(r))
    return budget, magnitude


def dataset_objective(
    m: Mechanism,
    trajs: Sequence[Trajectory],
    cfg: LikelihoodConfig,
    P=None,
    q0=None,
    beta=None,
) -> Tensor:
    """Sum of trajectory NLLs plus the budget and magnitude penalties on visited joint actions."""
    if not trajs:
        raise ValueError("empty minibatch")
    groups: "OrderedDict[int, list[Trajectory]]" = OrderedDict()
    for t in trajs:
        groups.setdefault(t.T, []).append(t)
    total = None
    for group in groups.values():
        part = tp.sum(batch_nll(m, _stack(group), cfg, P, q0, beta))
        total = part if total is None else tp.add(total, part)
    if cfg.lambda_budget or cfg.lambda_magnitude:
        rows = np.concatenate([t.actions for t in trajs])
        budget, magnitude = regularizers(m, rows, P)
        if cfg.lambda_budget:
            total = tp.add(total, tp.scale(budget, cfg.lambda_budget))
        if cfg.lambda_magnitude:
            total = tp.add(total, tp.scale(magnitude, cfg.lambda_magnitude))
    return total


def mean_nll(m: Mechanism, trajs: Sequence[Trajectory], cfg: LikelihoodConfig, q0=None, beta=None,
             chunk: int = 16) -> float:
    """Average per-trajectory NLL without building a gradient graph."""
    total = 0.0
    for start in range(0, len(trajs), chunk):
        part = trajs[start:start + chunk]
        groups: dict[int, list[Trajectory]] = {}
        for t in part:
            groups.setdefault(t.T, []).append(t)
        for group in groups.values():
            total += float(batch_nll(m, _stack(group), cfg, None, q0, beta).value.sum())
    return total / len(trajs)


def uniform_nll(T: int, n: int, k: int) -> float:
    return (T - 1) * n * float(np.log(k))
