"""Self-checks shared by the CLI (grad-check, theory-check) and the acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .dynamics import LearnerParams, simulate
from .estimators import LOG_BETA_KEY, Q0_KEY, TrainConfig, fit_tabular_mle
from .likelihood import LikelihoodConfig, dataset_objective
from .mechanisms import (
    GameShape,
    congestion_mechanism,
    public_goods_mechanism,
    random_count_neural_mechanism,
    random_neural_mechanism,
    random_tabular_mechanism,
)
from .metrics import all_contexts, diff_mse, logit_choice_probs, recover_utilities_from_conditionals


@dataclass
class CheckLine:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def render(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: {self.value:.3g} vs {self.threshold:.3g}{extra}"


# ---------------------------------------------------------------- finite differences

def _grad_families(shape: GameShape, seed: int):
    yield "neural", random_neural_mechanism(shape, widths=(6, 6), seed=seed, weight_scale=1.5)
    yield "count_neural", random_count_neural_mechanism(shape, widths=(6,), seed=seed, weight_scale=1.5)
    yield "tabular", random_tabular_mechanism(shape, seed=seed)
    rng = np.random.default_rng(seed)
    yield "congestion", congestion_mechanism(shape, rng.normal(size=shape.k), float(rng.uniform(0.1, 1.0)), True)
    yield "public_goods", public_goods_mechanism(shape, float(rng.uniform(0.5, 2)), float(rng.uniform(0.2, 1)), True)


def grad_check_suite(points: int = 10, n: int = 2, k: int = 2, T: int = 10, n_traj: int = 2, seed: int = 0,
                     h: float = 1e-4, tol: float = 1e-4) -> list[CheckLine]:
    """Compare analytic and central-difference gradients of the dataset objective.

    Each family is checked at ``points`` random parameter points. Every point also
    treats the initial scores and log inverse temperature as free parameters.
    """
    shape = GameShape(n, k)
    learner = LearnerParams(0.3, 2.0, 0.1)
    cfg = LikelihoodConfig(learner, q_init="learnable", lambda_budget=0.1, lambda_magnitude=0.01)
    worst: dict[str, float] = {}
    for p in range(points):
        point_seed = seed * 1000 + p
        rng = np.random.default_rng(point_seed)
        data_source = random_tabular_mechanism(shape, seed=point_seed + 7)
        trajs = simulate(data_source, learner, T, n_traj, point_seed)
        for family, mech in _grad_families(shape, point_seed):
            params = {name: v.copy() for name, v in mech.params.items()}
            params[Q0_KEY] = rng.normal(size=(n, k))
            params[LOG_BETA_KEY] = np.array(np.log(learner.beta) + rng.normal(scale=0.2))
            names = list(mech.params)

            def objective(tape, P, mech=mech, names=names):
                return dataset_objective(mech, trajs, cfg, {key: P[key] for key in names}, P[Q0_KEY],
                                         tp.exp(P[LOG_BETA_KEY]))

            report = tp.grad_check(objective, params, h=h, tol=tol, seed=point_seed)
            worst[family] = max(worst.get(family, 0.0), report.max_error)
    return [CheckLine(f"grad-check {family}", err, tol, err <= tol, f"{points} points, n={n} k={k} T={T}")
            for family, err in worst.items()]


# ---------------------------------------------------------------- identifiability oracle

def identifiability_check(beta: float = 2.0, k: int = 3, samples: int = 100_000, seeds: int = 5,
                          exact_tol: float = 1e-12, empirical_tol: float = 0.02) -> list[CheckLine]:
    """Recover centred utilities from exact and from sampled logit choice frequencies."""
    exact_errors, sample_errors = [], []
    for s in range(seeds):
        rng = np.random.default_rng(s)
        u = rng.normal(size=k)
        centred = u - u.mean()
        p = logit_choice_probs(u, beta)
        exact_errors.append(np.max(np.abs(recover_utilities_from_conditionals(p, beta) - centred)))
        freq = np.bincount(rng.choice(k, size=samples, p=p), minlength=k) / samples
        sample_errors.append(np.max(np.abs(recover_utilities_from_conditionals(freq, beta) - centred)))
    exact = float(np.max(exact_errors))
    med = float(np.median(sample_errors))
    return [
        CheckLine("identifiability exact", exact, exact_tol, exact <= exact_tol, f"max over {seeds} draws"),
        CheckLine("identifiability sampled", med, empirical_tol, med <= empirical_tol,
                  f"median over {seeds} seeds, N={samples}, beta={beta}, k={k}"),
    ]


# ---------------------------------------------------------------- consistency trend

@dataclass
class ConsistencyResult:
    sizes: tuple[int, ...]
    medians: list[float]
    init_median: float
    per_seed: dict[int, list[float]] = field(default_factory=dict)

    @property
    def decreasing(self) -> bool:
        return all(a > b for a, b in zip(self.medians, self.medians[1:]))

    @property
    def final_ratio(self) -> float:
        return self.medians[-1] / self.init_median


def consistency_trend(sizes=(10, 50, 250), seeds: int = 5, T: int = 200, n: int = 2, k: int = 3,
                      steps: int = 1000, lr: float = 0.05, truth_scale: float = 1.0,
                      learner: LearnerParams | None = None) -> ConsistencyResult:
    """Tabular MLE on a fixed small game with growing datasets.

    Each fit is full-batch Adam for ``steps`` updates from a random table, so
    the optimisation budget does not vary with the dataset size.
    """
    learner = learner or LearnerParams()
    shape = GameShape(n, k)
    truth = random_tabular_mechanism(shape, seed=12345, scale=truth_scale, trainable=False)
    contexts = all_contexts(shape)
    lcfg = LikelihoodConfig(learner, lambda_budget=0.0, lambda_magnitude=0.0)
    per_seed: dict[int, list[float]] = {}
    init_values = []
    for s in range(seeds):
        init = random_tabular_mechanism(shape, seed=1000 + s, scale=0.5)
        init_values.append(diff_mse(truth, init, contexts, seed=s))
        for M in sizes:
            train = simulate(truth, learner, T, M, seed=10_000 * (s + 1) + M)
            cfg = TrainConfig(lr=lr, epochs=steps, batch_size=M, likelihood=lcfg, seed=s, eval_every=steps)
            res = fit_tabular_mle(train, [], shape, cfg, init_seed=1000 + s, init_scale=0.5)
            per_seed.setdefault(M, []).append(diff_mse(truth, res.mechanism, contexts, seed=s))
    medians = [float(np.median(per_seed[M])) for M in sizes]
    return ConsistencyResult(tuple(sizes), medians, float(np.median(init_values)), per_seed)


def consistency_lines(res: ConsistencyResult, ratio_tol: float = 0.05) -> list[CheckLine]:
    trend = " > ".join(f"{m:.4g}" for m in res.medians)
    return [
        CheckLine("consistency trend strictly decreasing", float(res.decreasing), 1.0, res.decreasing,
                  f"median diff_mse over M={list(res.sizes)}: {trend}"),
        CheckLine("consistency final / init", res.final_ratio, ratio_tol, res.final_ratio <= ratio_tol,
                  f"init median {res.init_median:.4g}"),
    ]
