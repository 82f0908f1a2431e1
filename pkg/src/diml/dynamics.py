"""Logit-Q learners: policy, score update and the trajectory simulator."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import tape as tp
from .errors import ShapeError
from .mechanisms import GameShape, Mechanism
from .tape import Tensor


@dataclass(frozen=True)
class LearnerParams:
    alpha: float = 0.1
    beta: float = 3.0
    epsilon: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"learning rate alpha must lie in (0, 1], got {self.alpha}")
        if not self.beta > 0.0:
            raise ValueError(f"inverse temperature beta must be positive, got {self.beta}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"exploration rate epsilon must lie in [0, 1), got {self.epsilon}")

    def replace(self, **changes) -> "LearnerParams":
        return LearnerParams(**{**asdict(self), **changes})


def logit_policy(q, beta, epsilon: float) -> Tensor:
    """(1 - eps) * softmax(beta * q) + eps / k over the last axis.

    ``beta`` may be a float or a scalar tensor (when it is being estimated).
    Both the simulator and the likelihood go through this function.
    """
    q = q if isinstance(q, Tensor) else Tensor(np.asarray(q, dtype=np.float64))
    k = q.shape[-1]
    p = tp.softmax_rows(tp.mul(q, beta))
    if epsilon == 0.0:
        return p
    return tp.add(tp.scale(p, 1.0 - epsilon), epsilon / k)


def policy_from_q(q_row, params: LearnerParams) -> np.ndarray:
    return logit_policy(q_row, params.beta, params.epsilon).value


def q_update(q_row, u_row, alpha: float) -> np.ndarray:
    return tp.ewma_step(np.asarray(q_row, dtype=np.float64), np.asarray(u_row, dtype=np.float64), alpha)


def inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Categorical draw per row of ``probs`` from uniforms ``u`` (same leading shape)."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[..., None] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_action(probs, rng: np.random.Generator) -> int:
    probs = np.asarray(probs, dtype=np.float64)
    return int(inverse_cdf(probs, np.asarray(rng.random()))[()])


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for trajectory ``index`` of a dataset drawn with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


@dataclass
class Trajectory:
    actions: np.ndarray                       # (T, n) int64
    meta: dict[str, Any] = field(default_factory=dict)
    q_history: np.ndarray | None = None       # (T, n, k) scores used to draw each step (debug)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.actions.ndim != 2 or self.actions.shape[0] < 2:
            raise ShapeError(f"trajectory needs shape [T >= 2, n], got {list(self.actions.shape)}")

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    @property
    def n(self) -> int:
        return self.actions.shape[1]


def simulate(
    m: Mechanism,
    params: LearnerParams,
    T: int,
    n_traj: int,
    seed: int,
    q_init: np.ndarray | None = None,
    record_q: bool = False,
    first_index: int = 0,
    meta: dict | None = None,
) -> list[Trajectory]:
    """Roll out ``n_traj`` independent learning trajectories of length ``T``.

    Trajectory ``j`` draws its uniforms from ``trajectory_rng(seed, first_index + j)``,
    so a trajectory does not depend on how many others are simulated with it.
    All trajectories are advanced together as a batch.
    """
    if T < 2:
        raise ShapeError(f"trajectories need T >= 2 steps, got {T}")
    shape: GameShape = m.shape
    n, k = shape.n, shape.k
    uniforms = np.stack([trajectory_rng(seed, first_index + j).random((T, n)) for j in range(n_traj)])
    q = np.zeros((n_traj, n, k)) if q_init is None else np.broadcast_to(np.asarray(q_init, float), (n_traj, n, k)).copy()
    actions = np.empty((n_traj, T, n), dtype=np.int64)
    qs = np.empty((n_traj, T, n, k)) if record_q else None
    P = m.consts()
    for t in range(T):
        if record_q:
            qs[:, t] = q
        probs = logit_policy(q, params.beta, params.epsilon).value
        actions[:, t] = inverse_cdf(probs, uniforms[:, t])
        if t + 1 < T:
            u = m.counterfactual(P, actions[:, t]).value
            q = q_update(q, u, params.alpha)
    base_meta = {
        "n": n,
        "k": k,
        "T": T,
        "generator": asdict(params),
        "mechanism": {"kind": m.kind, "seed": m.seed},
        "q_init": "zeros" if q_init is None else np.asarray(q_init, float).tolist(),
        "seed": seed,
    }
    base_meta.update(meta or {})
    return [
        Trajectory(actions[j], {**base_meta, "index": first_index + j}, None if qs is None else qs[j])
        for j in range(n_traj)
    ]


# ---------------------------------------------------------------- file format

def save_trajectory(traj: Trajectory, path) -> Path:
    """First line: metadata object; then one JSON integer array per time step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(traj.meta, sort_keys=True)]
    lines.extend(json.dumps(row) for row in traj.actions.tolist())
    path.write_text("\n".join(lines) + "\n")
    return path


def load_trajectory(path) -> Trajectory:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 3:
        raise ShapeError(f"{path}: trajectory file needs a metadata line and at least two steps")
    meta = json.loads(lines[0])
    actions = np.array([json.loads(line) for line in lines[1:] if line.strip()], dtype=np.int64)
    return Trajectory(actions, meta)
