"""Payoff mechanisms: maps from a joint action to one payoff per agent.

Every mechanism writes its forward pass once, in terms of :mod:`diml.tape`
operations. Called with constant parameters it is an ordinary numpy function
(used by the simulator and the metrics); called with parameters bound to a
tape it is differentiable (used by the likelihood).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar, Mapping, Sequence

import numpy as np

from . import tape as tp
from .errors import ConfigError, InfeasibleError, ShapeError
from .tape import Tensor

TABULATION_CAP = 10**6


@dataclass(frozen=True)
class GameShape:
    n: int
    k: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ShapeError(f"agent count must be a positive integer, got {self.n}")
        if int(self.k) != self.k or self.k < 2:
            raise ShapeError(f"action count must be an integer >= 2, got {self.k}")

    @property
    def n_joint(self) -> int:
        return self.k**self.n


# ---------------------------------------------------------------- joint-action helpers

def check_joint(shape: GameShape, a) -> np.ndarray:
    arr = np.asarray(a)
    if arr.shape[-1:] != (shape.n,):
        raise ShapeError(f"joint action has shape {list(arr.shape)}, expected trailing axis {shape.n}")
    if arr.size and (arr.min() < 0 or arr.max() >= shape.k):
        raise IndexError(f"action index out of range [0, {shape.k})")
    return arr.astype(np.int64, copy=False)


def encode_joint(a, k: int) -> np.ndarray:
    """One-hot concatenation, agent-major: entry ``i*k + a[i]`` is 1."""
    a = np.asarray(a, dtype=np.int64)
    n = a.shape[-1]
    out = np.zeros(a.shape[:-1] + (n * k,))
    flat = out.reshape(-1, n * k)
    rows = a.reshape(-1, n)
    flat[np.arange(rows.shape[0])[:, None], np.arange(n) * k + rows] = 1.0
    return out


def decode_joint(x, k: int) -> np.ndarray:
    x = np.asarray(x)
    n = x.shape[-1] // k
    return x.reshape(x.shape[:-1] + (n, k)).argmax(axis=-1)


def joint_index(rows, k: int) -> np.ndarray:
    """Mixed-radix row index of each joint action (agent 0 most significant)."""
    rows = np.asarray(rows, dtype=np.int64)
    n = rows.shape[-1]
    weights = k ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return rows @ weights


def all_joint_actions(shape: GameShape, cap: int = TABULATION_CAP) -> np.ndarray:
    if shape.n_joint > cap:
        raise InfeasibleError(
            f"{shape.k}^{shape.n} joint actions exceed the enumeration cap of {cap}; "
            "tabular representations are only available for small games"
        )
    grids = np.indices((shape.k,) * shape.n).reshape(shape.n, -1).T
    return np.ascontiguousarray(grids, dtype=np.int64)


def action_counts(rows, k: int) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64)
    return (rows[..., None] == np.arange(k)).sum(axis=-2)


def count_others(a, i: int, k: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    counts = action_counts(a, k)
    counts[a[i]] -= 1
    return counts


def counterfactual_rows(observed: np.ndarray, k: int) -> np.ndarray:
    """(S, n) observed profiles -> (S, n, k, n): agent i's action replaced by each a."""
    S, n = observed.shape
    rows = np.broadcast_to(observed[:, None, None, :], (S, n, k, n)).copy()
    idx = np.arange(n)
    rows[:, idx, :, idx] = np.arange(k)
    return rows


def _onehot(idx, k: int) -> np.ndarray:
    return (np.asarray(idx)[..., None] == np.arange(k)).astype(np.float64)


# ---------------------------------------------------------------- base class

class Mechanism:
    kind: ClassVar[str] = ""

    def __init__(self, shape: GameShape, params: Mapping[str, np.ndarray], *, trainable: bool = True,
                 seed: int | None = None):
        self.shape = shape
        self.params = {name: np.array(v, dtype=np.float64) for name, v in params.items()}
        self.trainable = trainable
        self.seed = seed
        self.n_evaluations = 0
        self._validate()

    # subclasses -----------------------------------------------------------
    def _validate(self) -> None:
        pass

    def spec(self) -> dict:
        """Constructor arguments besides shape/params, for serialisation."""
        return {}

    def coordinates(self, P: Mapping[str, Tensor], rows: np.ndarray, agents: np.ndarray) -> Tensor:
        """Payoff of agent ``agents[r]`` at joint action ``rows[r]``; shape (N,)."""
        raise NotImplementedError

    def payoff_rows(self, P: Mapping[str, Tensor], rows: np.ndarray) -> Tensor:
        N, n = rows.shape
        agents = np.tile(np.arange(n), N)
        return self.coordinates(P, np.repeat(rows, n, axis=0), agents).reshape(N, n)

    def _counterfactual(self, P: Mapping[str, Tensor], observed: np.ndarray) -> Tensor:
        S, n = observed.shape
        k = self.shape.k
        rows = counterfactual_rows(observed, k).reshape(-1, n)
        agents = np.broadcast_to(np.arange(n)[None, :, None], (S, n, k)).reshape(-1)
        return self.coordinates(P, rows, agents).reshape(S, n, k)

    # shared ---------------------------------------------------------------
    def counterfactual(self, P: Mapping[str, Tensor] | None, observed) -> Tensor:
        """Counterfactual payoffs for a batch of observed profiles, shape (S, n, k).

        Entry ``[s, i, a]`` is agent i's payoff when it plays ``a`` and everybody
        else plays ``observed[s]``. Exactly S*n*k coordinate evaluations.
        """
        observed = check_joint(self.shape, observed)
        if observed.ndim == 1:
            observed = observed[None]
        if P is None:
            P = self.consts()
        self.n_evaluations += observed.shape[0] * self.shape.n * self.shape.k
        return self._counterfactual(P, observed)

    def bind(self, tape: tp.Tape, prefix: str = "") -> dict[str, Tensor]:
        return {name: tape.param(v, name=prefix + name) for name, v in self.params.items()}

    def consts(self) -> dict[str, Tensor]:
        return {name: Tensor(v) for name, v in self.params.items()}

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Mechanism":
        missing = set(self.params) ^ set(params)
        if missing:
            raise ShapeError(f"parameter names differ: {sorted(missing)}")
        return type(self)(self.shape, params, trainable=self.trainable, seed=self.seed, **self.spec())

    def copy(self) -> "Mechanism":
        return self.with_params({k: v.copy() for k, v in self.params.items()})

    def payoff(self, a) -> np.ndarray:
        a = check_joint(self.shape, a)
        return self.payoff_rows(self.consts(), a.reshape(1, -1)).value[0]

    def payoff_agent(self, i: int, a) -> float:
        a = check_joint(self.shape, a)
        if not 0 <= i < self.shape.n:
            raise IndexError(f"agent index {i} out of range [0, {self.shape.n})")
        return float(self.coordinates(self.consts(), a.reshape(1, -1), np.array([i])).value[0])

    def payoff_batch(self, rows) -> np.ndarray:
        rows = check_joint(self.shape, rows)
        return self.payoff_rows(self.consts(), rows.reshape(-1, self.shape.n)).value

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(n={self.shape.n}, k={self.shape.k}, params={self.num_parameters()})"


# ---------------------------------------------------------------- kinds

def _mlp(P: Mapping[str, Tensor], x, depth: int) -> Tensor:
    h = x
    for layer in range(depth - 1):
        h = tp.tanh(tp.affine(h, P[f"W{layer}"], P[f"b{layer}"]))
    return tp.affine(h, P[f"W{depth - 1}"], P[f"b{depth - 1}"])


def _mlp_params(rng: np.random.Generator, sizes: Sequence[int], weight_scale: float) -> dict[str, np.ndarray]:
    params = {}
    for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"W{layer}"] = rng.standard_normal((fan_in, fan_out)) * (weight_scale / np.sqrt(fan_in))
        params[f"b{layer}"] = np.zeros(fan_out)
    return params


class NeuralMechanism(Mechanism):
    """Fully connected tanh network on the one-hot joint action; one output per agent."""

    kind = "neural"

    def __init__(self, shape, params, *, trainable=True, seed=None, widths: Sequence[int] = (64, 64)):
        self.widths = tuple(int(w) for w in widths)
        super().__init__(shape, params, trainable=trainable, seed=seed)

    def spec(self):
        return {"widths": list(self.widths)}

    def _validate(self):
        sizes = [self.shape.n * self.shape.k, *self.widths, self.shape.n]
        for layer, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            W, b = self.params.get(f"W{layer}"), self.params.get(f"b{layer}")
            if W is None or b is None or W.shape != (fi, fo) or b.shape != (fo,):
                raise ShapeError(f"neural layer {layer} must be {fi}x{fo}")
        if len(self.params) != 2 * (len(sizes) - 1):
            raise ShapeError("unexpected extra neural parameters")

    @property
    def depth(self) -> int:
        return len(self.widths) + 1

    def payoff_rows(self, P, rows):
        return _mlp(P, encode_joint(rows, self.shape.k), self.depth)

    def coordinates(self, P, rows, agents):
        return tp.pick(self.payoff_rows(P, rows), agents)


class CountNeuralMechanism(Mechanism):
    """Anonymous mechanism: a shared network on (own action one-hot, others' counts / (n-1))."""

    kind = "count_neural"

    def __init__(self, shape, params, *, trainable=True, seed=None, widths: Sequence[int] = (64, 64)):
        self.widths = tuple(int(w) for w in widths)
        super().__init__(shape, params, trainable=trainable, seed=seed)

    def spec(self):
        return {"widths": list(self.widths)}

    def _validate(self):
        if self.shape.n < 2:
            raise ShapeError("count-based mechanisms need at least two agents")
        sizes = [2 * self.shape.k, *self.widths, 1]
        for layer, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            W, b = self.params.get(f"W{layer}"), self.params.get(f"b{layer}")
            if W is None or b is None or W.shape != (fi, fo) or b.shape != (fo,):
                raise ShapeError(f"count-neural layer {layer} must be {fi}x{fo}")

    @property
    def depth(self) -> int:
        return len(self.widths) + 1

    def _net(self, P, own_onehot: np.ndarray, others: np.ndarray) -> Tensor:
        x = np.concatenate([own_onehot, others / (self.shape.n - 1)], axis=-1)
        lead = x.shape[:-1]
        out = _mlp(P, x.reshape(-1, 2 * self.shape.k), self.depth)
        return out.reshape(lead)

    def coordinates(self, P, rows, agents):
        rows = np.asarray(rows)
        own = rows[np.arange(rows.shape[0]), agents]
        others = action_counts(rows, self.shape.k) - _onehot(own, self.shape.k)
        return self._net(P, _onehot(own, self.shape.k), others)

    def _by_own_action(self, P, counts: np.ndarray) -> Tensor:
        """Network value for every (profile, own action c, played action a); shape (S, k, k).

        Agents sharing an observed action see the same opponent counts, so each
        profile needs k*k network rows however many agents there are.
        """
        k = self.shape.k
        S = counts.shape[0]
        others = counts[:, None, :] - np.eye(k, dtype=counts.dtype)[None]      # (S, c, k)
        own = np.broadcast_to(np.eye(k), (S, k, k, k))                       # (S, c, a, k)
        others = np.broadcast_to(others[:, :, None, :], (S, k, k, k))
        return self._net(P, own, others)

    def payoff_rows(self, P, rows):
        rows = np.asarray(rows)
        N, n = rows.shape
        k = self.shape.k
        V = self._by_own_action(P, action_counts(rows, k))                   # (N, c, a)
        flat = tp.reshape(V, (-1,))
        base = np.arange(N)[:, None] * (k * k)
        return tp.gather(flat, base + rows * k + rows)

    def _counterfactual(self, P, observed):
        S, n = observed.shape
        k = self.shape.k
        V = self._by_own_action(P, action_counts(observed, k))               # (S, c, a)
        return tp.gather(tp.reshape(V, (S * k, k)), np.arange(S)[:, None] * k + observed, axis=0)


class TabularMechanism(Mechanism):
    """Free payoff table with one row per joint action (mixed-radix order)."""

    kind = "tabular"

    def _validate(self):
        table = self.params.get("table")
        if table is None or table.shape != (self.shape.n_joint, self.shape.n):
            raise ShapeError(f"tabular mechanism needs a table of shape [{self.shape.n_joint}, {self.shape.n}]")

    def coordinates(self, P, rows, agents):
        flat = tp.reshape(P["table"], (-1,))
        return tp.gather(flat, joint_index(rows, self.shape.k) * self.shape.n + agents)

    def payoff_rows(self, P, rows):
        return tp.gather(P["table"], joint_index(rows, self.shape.k), axis=0)


class CongestionMechanism(Mechanism):
    """u_i(a) = b[a_i] - kappa * #{j : a_j = a_i}, the agent itself included."""

    kind = "congestion"

    def _validate(self):
        if self.params.get("b") is None or self.params["b"].shape != (self.shape.k,):
            raise ShapeError(f"congestion base values must have length {self.shape.k}")
        if self.params.get("kappa") is None or self.params["kappa"].shape != ():
            raise ShapeError("congestion toll coefficient must be a scalar")

    def coordinates(self, P, rows, agents):
        rows = np.asarray(rows)
        own = rows[np.arange(rows.shape[0]), agents]
        load = (rows == own[:, None]).sum(axis=1).astype(np.float64)
        return tp.gather(P["b"], own) - P["kappa"] * load

    def _counterfactual(self, P, observed):
        k = self.shape.k
        others = action_counts(observed, k)[:, None, :] - _onehot(observed, k)
        load = (others + 1).astype(np.float64)
        return tp.gather(P["b"], np.broadcast_to(np.arange(k), load.shape)) - P["kappa"] * load


class PublicGoodsMechanism(Mechanism):
    """u_i(a) = gamma * log(1 + sum_j a_j) - cost * a_i, actions are contribution levels."""

    kind = "public_goods"

    def _validate(self):
        for name in ("gamma", "cost"):
            if self.params.get(name) is None or self.params[name].shape != ():
                raise ShapeError(f"public-goods parameter {name!r} must be a scalar")

    def coordinates(self, P, rows, agents):
        rows = np.asarray(rows)
        own = rows[np.arange(rows.shape[0]), agents].astype(np.float64)
        total = rows.sum(axis=1).astype(np.float64)
        return P["gamma"] * np.log1p(total) - P["cost"] * own

    def _counterfactual(self, P, observed):
        k = self.shape.k
        others = observed.sum(axis=1, keepdims=True) - observed              # (S, n)
        own = np.arange(k, dtype=np.float64)
        total = (others[:, :, None] + np.arange(k)).astype(np.float64)       # (S, n, k)
        return P["gamma"] * np.log1p(total) - P["cost"] * np.broadcast_to(own, total.shape)


KINDS: dict[str, type[Mechanism]] = {
    cls.kind: cls
    for cls in (NeuralMechanism, CountNeuralMechanism, TabularMechanism, CongestionMechanism, PublicGoodsMechanism)
}


# ---------------------------------------------------------------- constructors

def random_neural_mechanism(shape: GameShape, widths: Sequence[int] = (64, 64), seed: int = 0,
                            weight_scale: float = 1.0, trainable: bool = True) -> NeuralMechanism:
    rng = np.random.default_rng(seed)
    sizes = [shape.n * shape.k, *widths, shape.n]
    return NeuralMechanism(shape, _mlp_params(rng, sizes, weight_scale), trainable=trainable, seed=seed,
                           widths=widths)


def random_count_neural_mechanism(shape: GameShape, widths: Sequence[int] = (64, 64), seed: int = 0,
                                  weight_scale: float = 1.0, trainable: bool = True) -> CountNeuralMechanism:
    rng = np.random.default_rng(seed)
    sizes = [2 * shape.k, *widths, 1]
    return CountNeuralMechanism(shape, _mlp_params(rng, sizes, weight_scale), trainable=trainable, seed=seed,
                                widths=widths)


def random_tabular_mechanism(shape: GameShape, seed: int = 0, scale: float = 1.0, trainable: bool = True,
                             cap: int = TABULATION_CAP) -> TabularMechanism:
    if shape.n_joint > cap:
        raise InfeasibleError(
            f"a tabular mechanism for {shape.k}^{shape.n} joint actions exceeds the cap of {cap} rows"
        )
    rng = np.random.default_rng(seed)
    table = rng.standard_normal((shape.n_joint, shape.n)) * scale
    return TabularMechanism(shape, {"table": table}, trainable=trainable, seed=seed)


def tabular_from_table(shape: GameShape, table, trainable: bool = True) -> TabularMechanism:
    return TabularMechanism(shape, {"table": np.asarray(table, dtype=np.float64)}, trainable=trainable)


def congestion_mechanism(shape: GameShape, base, kappa: float, trainable: bool = False) -> CongestionMechanism:
    return CongestionMechanism(shape, {"b": np.asarray(base, dtype=np.float64), "kappa": np.float64(kappa)},
                               trainable=trainable)


def public_goods_mechanism(shape: GameShape, gamma: float, cost: float,
                           trainable: bool = False) -> PublicGoodsMechanism:
    return PublicGoodsMechanism(shape, {"gamma": np.float64(gamma), "cost": np.float64(cost)}, trainable=trainable)


def tabulate(m: Mechanism, cap: int = TABULATION_CAP) -> np.ndarray:
    """Full payoff table, one row per joint action in :func:`joint_index` order."""
    rows = all_joint_actions(m.shape, cap)
    return m.payoff_rows(m.consts(), rows).value


def budget_imbalance(m: Mechanism, joint_actions) -> float:
    """Mean over the given joint actions of (sum_i r_i)^2."""
    rows = check_joint(m.shape, joint_actions).reshape(-1, m.shape.n)
    r = m.payoff_rows(m.consts(), rows).value
    return float(np.mean(r.sum(axis=1) ** 2))


# ---------------------------------------------------------------- file format

FORMAT_VERSION = 1


def mechanism_to_dict(m: Mechanism, meta: Mapping | None = None) -> dict:
    return {
        "format": "diml-mechanism",
        "version": FORMAT_VERSION,
        "kind": m.kind,
        "shape": {"n": m.shape.n, "k": m.shape.k},
        "seed": m.seed,
        "trainable": m.trainable,
        "spec": m.spec(),
        "params": {
            name: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for name, v in m.params.items()
        },
        "meta": dict(meta or {}),
    }


def mechanism_from_dict(d: Mapping) -> Mechanism:
    try:
        cls = KINDS[d["kind"]]
        shape = GameShape(int(d["shape"]["n"]), int(d["shape"]["k"]))
        params = {
            name: np.array(p["data"], dtype=np.float64).reshape(p["shape"]) for name, p in d["params"].items()
        }
    except KeyError as exc:
        raise ConfigError(f"mechanism file is missing field {exc}") from None
    return cls(shape, params, trainable=bool(d.get("trainable", True)), seed=d.get("seed"), **d.get("spec", {}))


def save_mechanism(m: Mechanism, path, meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(mechanism_to_dict(m, meta), indent=1) + "\n")
    return path


def load_mechanism(path) -> Mechanism:
    return mechanism_from_dict(json.loads(Path(path).read_text()))
