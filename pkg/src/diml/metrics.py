"""Recovery and counterfactual metrics, plus the logit identifiability oracle."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dynamics import LearnerParams, Trajectory, simulate
from .errors import DomainError, InfeasibleError, ShapeError
from .mechanisms import TABULATION_CAP, GameShape, Mechanism, action_counts

MODES = ("exact-joint", "count-key")


# ---------------------------------------------------------------- identifiability oracle

def logit_choice_probs(u, beta: float) -> np.ndarray:
    z = beta * np.asarray(u, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def recover_utilities_from_conditionals(p, beta: float) -> np.ndarray:
    """Invert a logit choice rule: centred utilities ``log(p) / beta``.

    Only differences are identified, so the result is normalised to sum to zero.
    """
    p = np.asarray(p, dtype=np.float64)
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if p.ndim != 1 or p.size < 2:
        raise ShapeError("expected a probability vector over at least two actions")
    if np.any(p <= 0):
        raise DomainError("choice probabilities must be strictly positive to recover utilities")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"choice probabilities must sum to 1, got {p.sum()}")
    u = np.log(p) / beta
    return u - u.mean()


# ---------------------------------------------------------------- payoff-difference error

@dataclass(frozen=True)
class ContextSample:
    agent: int
    opponents: tuple[int, ...]
    source: tuple[int, int] = (-1, -1)      # (trajectory, step)

    def profile(self, own: int = 0) -> np.ndarray:
        return np.array(self.opponents[: self.agent] + (own,) + self.opponents[self.agent:], dtype=np.int64)


def sample_contexts(trajs: Sequence[Trajectory], count: int, seed: int) -> list[ContextSample]:
    """Uniform (trajectory, step, agent) draws from held-out trajectories."""
    if not trajs:
        raise ValueError("no trajectories to sample contexts from")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        j = int(rng.integers(len(trajs)))
        t = int(rng.integers(trajs[j].T))
        i = int(rng.integers(trajs[j].n))
        row = trajs[j].actions[t].tolist()
        out.append(ContextSample(i, tuple(row[:i] + row[i + 1:]), (j, t)))
    return out


def all_contexts(shape: GameShape) -> list[ContextSample]:
    from .mechanisms import all_joint_actions

    opp = all_joint_actions(GameShape(shape.n - 1, shape.k)) if shape.n > 1 else np.zeros((1, 0), dtype=np.int64)
    return [ContextSample(i, tuple(int(x) for x in row)) for i in range(shape.n) for row in opp]


def utility_vectors(m: Mechanism, contexts: Sequence[ContextSample]) -> np.ndarray:
    """(C, k): agent's payoff for each own action with the context's opponents fixed."""
    k, n = m.shape.k, m.shape.n
    base = np.stack([c.profile() for c in contexts])                   # (C, n)
    agents = np.array([c.agent for c in contexts])
    rows = np.repeat(base[:, None, :], k, axis=1)                       # (C, k, n)
    rows[np.arange(len(contexts)), :, agents] = np.arange(k)
    flat_agents = np.repeat(agents, k)
    return m.coordinates(m.consts(), rows.reshape(-1, n), flat_agents).value.reshape(len(contexts), k)


def diff_mse(truth: Mechanism, est: Mechanism, contexts: Sequence[ContextSample], pairs_per_context: int = 8,
             seed: int = 0) -> float:
    """Mean squared error of payoff differences over contexts and uniformly drawn action pairs."""
    if not contexts:
        raise ValueError("diff_mse needs at least one context")
    if truth.shape != est.shape:
        raise ShapeError(f"mechanism shapes differ: {truth.shape} vs {est.shape}")
    rng = np.random.default_rng(seed)
    k = truth.shape.k
    pairs = rng.integers(0, k, size=(len(contexts), pairs_per_context, 2))
    return _pair_error(utility_vectors(truth, contexts), utility_vectors(est, contexts), pairs)


def _pair_error(u: np.ndarray, v: np.ndarray, pairs: np.ndarray) -> float:
    c = np.arange(u.shape[0])[:, None]
    du = u[c, pairs[..., 0]] - u[c, pairs[..., 1]]
    dv = v[c, pairs[..., 0]] - v[c, pairs[..., 1]]
    return float(np.mean((du - dv) ** 2))


# ---------------------------------------------------------------- empirical distributions / KL

@dataclass
class EmpiricalDistribution:
    counts: Counter = field(default_factory=Counter)
    pseudo_count: float = 1.0

    @property
    def total(self) -> int:
        return int(sum(self.counts.values()))

    def merge(self, other: "EmpiricalDistribution") -> "EmpiricalDistribution":
        return EmpiricalDistribution(self.counts + other.counts, self.pseudo_count)


def outcome_keys(actions: np.ndarray, mode: str, k: int) -> np.ndarray:
    if mode == "exact-joint":
        return np.asarray(actions, dtype=np.int64)
    if mode == "count-key":
        return action_counts(actions, k)
    raise ValueError(f"unknown key mode {mode!r}; expected one of {MODES}")


def empirical_joint_distribution(trajs: Iterable[Trajectory], mode: str, k: int,
                                 pseudo_count: float = 1.0) -> EmpiricalDistribution:
    """One sample per (trajectory, step); keys are joint-action tuples or action-count tuples."""
    trajs = list(trajs)
    if not trajs:
        return EmpiricalDistribution(Counter(), pseudo_count)
    keys = outcome_keys(np.concatenate([t.actions for t in trajs]), mode, k)
    uniq, cnt = np.unique(keys, axis=0, return_counts=True)
    return EmpiricalDistribution(Counter({tuple(int(x) for x in row): int(c) for row, c in zip(uniq, cnt)}),
                                 pseudo_count)


def kl_divergence(p: EmpiricalDistribution, q: EmpiricalDistribution, pseudo_count: float | None = None) -> float:
    """KL(p || q) after adding ``pseudo_count`` to every key in the union of both supports."""
    a = p.pseudo_count if pseudo_count is None else pseudo_count
    support = sorted(set(p.counts) | set(q.counts))
    if not support:
        return 0.0
    cp = np.array([p.counts.get(x, 0) for x in support], dtype=np.float64) + a
    cq = np.array([q.counts.get(x, 0) for x in support], dtype=np.float64) + a
    ps, qs = cp / cp.sum(), cq / cq.sum()
    return float(np.sum(ps * (np.log(ps) - np.log(qs))))


def cfkl_params(truth: Mechanism, est: Mechanism, intervened: LearnerParams, rollouts: int = 32,
                horizon: int = 200, mode: str = "exact-joint", seed: int = 0, est_seed: int | None = None,
                cap: int = TABULATION_CAP) -> float:
    """KL between joint-action distributions of learners run under the true and estimated mechanisms.

    Both rollout sets share ``seed`` unless ``est_seed`` is given, so identical
    mechanisms give identical rollouts.
    """
    if truth.shape != est.shape:
        raise ShapeError(f"mechanism shapes differ: {truth.shape} vs {est.shape}")
    if mode not in MODES:
        raise ValueError(f"unknown cfkl mode {mode!r}; expected one of {MODES}")
    if mode == "exact-joint" and truth.shape.n_joint > cap:
        raise InfeasibleError(
            f"{truth.shape.k}^{truth.shape.n} joint actions exceed the cap of {cap}; use mode 'count-key'"
        )
    k = truth.shape.k
    p = empirical_joint_distribution(simulate(truth, intervened, horizon, rollouts, seed), mode, k)
    q = empirical_joint_distribution(
        simulate(est, intervened, horizon, rollouts, seed if est_seed is None else est_seed), mode, k
    )
    return kl_divergence(p, q)


def default_cfkl_mode(shape: GameShape, cap: int = TABULATION_CAP) -> str:
    return "exact-joint" if shape.n_joint <= cap else "count-key"


@dataclass
class Evaluator:
    """Held-out evaluation against a known ground-truth mechanism."""

    truth: Mechanism
    contexts: list[ContextSample]
    intervened: LearnerParams
    pairs_per_context: int = 8
    rollouts: int = 32
    horizon: int = 200
    cfkl_mode: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.cfkl_mode is None:
            self.cfkl_mode = default_cfkl_mode(self.truth.shape)

    def __call__(self, est: Mechanism) -> dict[str, float]:
        return {
            "diff_mse": diff_mse(self.truth, est, self.contexts, self.pairs_per_context, self.seed),
            "cfkl_params": cfkl_params(self.truth, est, self.intervened, self.rollouts, self.horizon,
                                       self.cfkl_mode, self.seed),
        }
