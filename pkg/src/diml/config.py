"""Experiment configuration: YAML files with a strict schema, plus the built-in presets.

Unknown keys and ill-typed values are rejected with the file name, line number
and dotted field path, e.g. ``e1.yaml:7: generator.beta: must be positive``.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .dynamics import LearnerParams
from .errors import ConfigError
from .estimators import STRUCT_FAMILIES, TrainConfig
from .likelihood import LikelihoodConfig
from .mechanisms import KINDS, GameShape

ESTIMATORS = ("diml", "tabular", "struct", "diml-wrong")
PRESETS = ("e1", "e2", "e3", "e4")


@dataclass
class GameSection:
    n: int = 3
    k: int = 4

    def validate(self):
        GameShape(self.n, self.k)


@dataclass
class MechanismSection:
    kind: str = "neural"
    widths: list[int] = field(default_factory=lambda: [64, 64])
    weight_scale: float = 1.5
    table_scale: float = 1.0
    base: Optional[list[float]] = None
    kappa: float = 0.4
    gamma: float = 2.0
    cost: float = 1.0

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mechanism kind {self.kind!r}; expected one of {sorted(KINDS)}")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.weight_scale < 0:
            raise ValueError("weight_scale must be >= 0")
        if self.kappa < 0:
            raise ValueError("congestion kappa must be >= 0")
        if self.kind == "public_goods" and not (self.gamma > 0 and self.cost > 0):
            raise ValueError("public-goods gamma and cost must be positive")


@dataclass
class LearnerSection:
    alpha: float = 0.1
    beta: float = 3.0
    epsilon: float = 0.05

    def validate(self):
        self.params()

    def params(self) -> LearnerParams:
        return LearnerParams(self.alpha, self.beta, self.epsilon)


@dataclass
class DataSection:
    train_trajectories: int = 64
    horizon: int = 300
    heldout_fraction: float = 0.2

    def validate(self):
        if self.train_trajectories < 1:
            raise ValueError("train_trajectories must be >= 1")
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ValueError("heldout_fraction must lie in (0, 1)")

    @property
    def heldout_trajectories(self) -> int:
        f = self.heldout_fraction
        return max(1, int(round(self.train_trajectories * f / (1.0 - f))))


@dataclass
class EstimatorSection:
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 8
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    q_init: str = "zeros"
    truncation: int = 0
    lambda_budget: float = 1e-3
    lambda_magnitude: float = 1e-4
    estimate_beta: bool = False
    widths: list[int] = field(default_factory=lambda: [64, 64])
    init_scale: float = 1.0
    family: Optional[str] = None
    beta_factor: float = 2.0

    def validate(self):
        self.train_config(LearnerParams(), 0)
        if self.family is not None and self.family not in STRUCT_FAMILIES:
            raise ValueError(f"unknown structural family {self.family!r}; expected one of {STRUCT_FAMILIES}")
        if not self.beta_factor > 0:
            raise ValueError("beta_factor must be positive")
        if self.init_scale < 0:
            raise ValueError("init_scale must be >= 0")

    def train_config(self, learner: LearnerParams, seed: int, eval_every: int = 10) -> TrainConfig:
        if len(self.betas) != 2:
            raise ValueError("betas must hold two moment decays")
        lcfg = LikelihoodConfig(learner, self.q_init, self.truncation, self.lambda_budget, self.lambda_magnitude)
        return TrainConfig(self.lr, self.epochs, self.batch_size, lcfg, (float(self.betas[0]), float(self.betas[1])),
                           self.estimate_beta, seed, eval_every)


@dataclass
class EstimatorsSection:
    diml: Optional[EstimatorSection] = None
    tabular: Optional[EstimatorSection] = None
    struct: Optional[EstimatorSection] = None
    diml_wrong: Optional[EstimatorSection] = None

    def get(self, name: str) -> Optional[EstimatorSection]:
        return getattr(self, name.replace("-", "_"))

    def listed(self) -> list[str]:
        return [name for name in ESTIMATORS if self.get(name) is not None]


@dataclass
class MetricsSection:
    intervention: LearnerSection = field(default_factory=lambda: LearnerSection(0.2, 1.5, 0.1))
    cfkl_rollouts: int = 32
    cfkl_horizon: int = 200
    cfkl_mode: str = "auto"
    diff_contexts: int = 512
    diff_pairs: int = 8
    eval_every: int = 10

    def validate(self):
        if self.cfkl_mode not in ("auto", "exact-joint", "count-key"):
            raise ValueError("cfkl_mode must be auto, exact-joint or count-key")
        if min(self.cfkl_rollouts, self.cfkl_horizon - 1, self.diff_contexts, self.diff_pairs, self.eval_every) < 1:
            raise ValueError("metric sample sizes must be positive (cfkl_horizon >= 2)")


@dataclass
class ExperimentConfig:
    name: str = "custom"
    seed: int = 0
    game: GameSection = field(default_factory=GameSection)
    mechanism: MechanismSection = field(default_factory=MechanismSection)
    generator: LearnerSection = field(default_factory=LearnerSection)
    data: DataSection = field(default_factory=DataSection)
    estimators: EstimatorsSection = field(default_factory=EstimatorsSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    @property
    def shape(self) -> GameShape:
        return GameShape(self.game.n, self.game.k)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def validate(self):
        if self.mechanism.kind == "count_neural" and self.game.n < 2:
            raise ConfigError("count_neural mechanisms need n >= 2")
        if self.mechanism.kind == "congestion" and self.mechanism.base is not None \
                and len(self.mechanism.base) != self.game.k:
            raise ConfigError(f"mechanism.base must have k = {self.game.k} entries")


# ---------------------------------------------------------------- loading

def _fail(source: str, node: yaml.Node, path: str, msg: str):
    line = node.start_mark.line + 1
    where = f"{path}: " if path else ""
    raise ConfigError(f"{source}:{line}: {where}{msg}")


def _convert(tp_, node: yaml.Node, path: str, source: str, loader: yaml.SafeLoader):
    origin = typing.get_origin(tp_)
    args = typing.get_args(tp_)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if isinstance(node, yaml.ScalarNode) and node.tag == "tag:yaml.org,2002:null":
            return None
        return _convert(inner[0], node, path, source, loader)
    if dataclasses.is_dataclass(tp_):
        if not isinstance(node, yaml.MappingNode):
            _fail(source, node, path, "expected a mapping")
        return _build(tp_, node, path, source, loader)
    if origin is list:
        if not isinstance(node, yaml.SequenceNode):
            _fail(source, node, path, "expected a list")
        return [_convert(args[0], item, f"{path}[{j}]", source, loader) for j, item in enumerate(node.value)]
    if not isinstance(node, yaml.ScalarNode):
        _fail(source, node, path, f"expected a {tp_.__name__} value")
    value = loader.construct_object(node, deep=True)
    if tp_ is bool:
        if not isinstance(value, bool):
            _fail(source, node, path, f"expected true/false, got {value!r}")
        return value
    if tp_ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(source, node, path, f"expected an integer, got {value!r}")
        return value
    if tp_ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(source, node, path, f"expected a number, got {value!r}")
        return float(value)
    if tp_ is str:
        if not isinstance(value, str):
            _fail(source, node, path, f"expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported config field type {tp_}")


def _build(cls, node: yaml.MappingNode, path: str, source: str, loader: yaml.SafeLoader):
    hints = typing.get_type_hints(cls)
    kwargs: dict[str, Any] = {}
    for key_node, value_node in node.value:
        key = key_node.value
        sub = f"{path}.{key}" if path else key
        if key not in hints:
            _fail(source, key_node, sub, f"unknown key (allowed: {', '.join(hints)})")
        if key in kwargs:
            _fail(source, key_node, sub, "duplicate key")
        kwargs[key] = _convert(hints[key], value_node, sub, source, loader)
    obj = cls(**kwargs)
    if hasattr(obj, "validate"):
        try:
            obj.validate()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            _fail(source, node, path, str(exc))
    return obj


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    loader = yaml.SafeLoader(text)
    try:
        node = loader.get_single_node()
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f"{mark.line + 1}" if mark is not None else "?"
        raise ConfigError(f"{source}:{line}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
    try:
        if node is None:
            raise ConfigError(f"{source}:1: empty configuration")
        if not isinstance(node, yaml.MappingNode):
            _fail(source, node, "", "top level must be a mapping")
        return _build(ExperimentConfig, node, "", source, loader)
    finally:
        loader.dispose()


def load_config(path_or_preset: str, paper_scale: bool = False) -> ExperimentConfig:
    path = Path(path_or_preset)
    if path.is_file():
        return parse_config(path.read_text(), str(path))
    name = path_or_preset.lower().removesuffix("-desk")
    if name in PRESETS:
        return preset(name, paper_scale=paper_scale)
    raise ConfigError(f"{path_or_preset}: no such config file or preset (presets: {', '.join(PRESETS)})")


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_yaml())
    return path


# ---------------------------------------------------------------- presets

def _neural_estimators(widths=(64, 64), diml_epochs=60, tabular_epochs=60) -> EstimatorsSection:
    diml = EstimatorSection(lr=3e-3, epochs=diml_epochs, widths=list(widths))
    return EstimatorsSection(
        diml=diml,
        tabular=EstimatorSection(lr=1e-2, epochs=tabular_epochs, init_scale=0.5),
        diml_wrong=dataclasses.replace(diml, beta_factor=2.0),
    )


def preset(name: str, paper_scale: bool = False, seed: int = 0) -> ExperimentConfig:
    """Desk-scale versions of the four experiment families; ``paper_scale`` restores the larger shapes."""
    name = name.lower().removesuffix("-desk")
    if name == "e1":
        game = GameSection(4, 5) if paper_scale else GameSection(3, 4)
        cfg = ExperimentConfig(
            name="e1-paper" if paper_scale else "e1-desk",
            game=game,
            mechanism=MechanismSection(kind="neural", weight_scale=1.5),
            estimators=_neural_estimators(),
        )
    elif name in ("e2", "e3"):
        k = 7
        est = _neural_estimators(diml_epochs=40, tabular_epochs=40)
        if name == "e2":
            mech = MechanismSection(kind="congestion", base=[1.0 - 0.5 * a for a in range(k)], kappa=0.4)
            family = "congestion"
        else:
            mech = MechanismSection(kind="public_goods", gamma=2.0, cost=1.0)
            family = "public_goods"
        est.struct = EstimatorSection(lr=3e-2, epochs=300, family=family)
        cfg = ExperimentConfig(
            name=f"{name}-paper" if paper_scale else f"{name}-desk",
            game=GameSection(3, k),
            mechanism=mech,
            estimators=est,
        )
    elif name == "e4":
        game = GameSection(300, 10) if paper_scale else GameSection(40, 10)
        diml = EstimatorSection(lr=3e-3, epochs=30)
        cfg = ExperimentConfig(
            name="e4-paper" if paper_scale else "e4-desk",
            game=game,
            mechanism=MechanismSection(kind="count_neural", weight_scale=1.5),
            data=DataSection(train_trajectories=32, horizon=200),
            estimators=EstimatorsSection(diml=diml, diml_wrong=dataclasses.replace(diml, beta_factor=2.0)),
            metrics=MetricsSection(eval_every=5),
        )
    else:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
    cfg.seed = seed
    return cfg


def jsonable(obj):
    """Recursively convert numpy scalars/arrays for json.dumps."""
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
