"""Dataset and fit artefacts on disk, and the end-to-end experiment pipeline."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ESTIMATORS, PRESETS, EstimatorSection, ExperimentConfig, jsonable, preset
from .dynamics import LearnerParams, Trajectory, load_trajectory, save_trajectory, simulate
from .errors import ConfigError, InfeasibleError, ShapeError
from .estimators import (
    CSV_COLUMNS,
    FitResult,
    fit_diml,
    fit_diml_wrong,
    fit_struct_mle,
    fit_tabular_mle,
)
from .likelihood import LikelihoodConfig, mean_nll
from .mechanisms import (
    GameShape,
    Mechanism,
    congestion_mechanism,
    load_mechanism,
    public_goods_mechanism,
    random_count_neural_mechanism,
    random_neural_mechanism,
    random_tabular_mechanism,
    save_mechanism,
)
from .metrics import MODES, Evaluator, cfkl_params, default_cfkl_mode, diff_mse, sample_contexts

log = logging.getLogger(__name__)

SEED_PURPOSES = ("mechanism", "data", "contexts", "cfkl", "init", "shuffle")
PRESET_STREAMS = {name: j + 1 for j, name in enumerate(PRESETS)}


def stream_of(cfg: ExperimentConfig) -> int:
    return PRESET_STREAMS.get(cfg.name.split("-")[0], 0)


def derive_seeds(master: int, stream: int = 0) -> dict[str, int]:
    """Per-purpose seeds spawned from the master seed; each preset gets its own stream."""
    root = np.random.SeedSequence(entropy=master, spawn_key=(stream,))
    return {p: int(c.generate_state(1, np.uint32)[0]) for p, c in zip(SEED_PURPOSES, root.spawn(len(SEED_PURPOSES)))}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(jsonable(obj), indent=1, sort_keys=True) + "\n")


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise ConfigError(f"{directory}: no manifest.json found")
    return json.loads(path.read_text())


# ---------------------------------------------------------------- ground truth and datasets

def build_truth(cfg: ExperimentConfig, seed: int) -> Mechanism:
    shape, m = cfg.shape, cfg.mechanism
    if m.kind == "neural":
        return random_neural_mechanism(shape, tuple(m.widths), seed, m.weight_scale, trainable=False)
    if m.kind == "count_neural":
        return random_count_neural_mechanism(shape, tuple(m.widths), seed, m.weight_scale, trainable=False)
    if m.kind == "tabular":
        return random_tabular_mechanism(shape, seed, m.table_scale, trainable=False)
    if m.kind == "congestion":
        base = m.base if m.base is not None else [1.0 - 0.5 * a for a in range(shape.k)]
        return congestion_mechanism(shape, base, m.kappa)
    if m.kind == "public_goods":
        return public_goods_mechanism(shape, m.gamma, m.cost)
    raise ConfigError(f"unknown mechanism kind {m.kind!r}")


@dataclass
class Dataset:
    config: ExperimentConfig
    seeds: dict[str, int]
    truth: Mechanism
    train: list[Trajectory]
    heldout: list[Trajectory]


def make_dataset(cfg: ExperimentConfig) -> Dataset:
    cfg.validate()
    seeds = derive_seeds(cfg.seed, stream_of(cfg))
    truth = build_truth(cfg, seeds["mechanism"])
    learner = cfg.generator.params()
    M, H, T = cfg.data.train_trajectories, cfg.data.heldout_trajectories, cfg.data.horizon
    trajs = simulate(truth, learner, T, M + H, seeds["data"])
    return Dataset(cfg, seeds, truth, trajs[:M], trajs[M:])


def save_dataset(ds: Dataset, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_mechanism(ds.truth, out / "truth.json", {"role": "ground truth"})
    files = {}
    for split, trajs in (("train", ds.train), ("heldout", ds.heldout)):
        names = []
        for j, t in enumerate(trajs):
            name = f"{split}/traj_{j:05d}.jsonl"
            save_trajectory(t, out / name)
            names.append(name)
        files[split] = names
    _write_json(out / "manifest.json", {
        "kind": "dataset",
        "tool_version": __version__,
        "config": ds.config.to_dict(),
        "seeds": {"master": ds.config.seed, "stream": stream_of(ds.config), **ds.seeds},
        "shape": {"n": ds.truth.shape.n, "k": ds.truth.shape.k},
        "truth": "truth.json",
        "files": files,
    })
    (out / "config.yaml").write_text(ds.config.to_yaml())
    return out


def load_dataset(directory) -> tuple[dict, Mechanism | None, list[Trajectory], list[Trajectory]]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    truth_path = directory / manifest.get("truth", "truth.json")
    truth = load_mechanism(truth_path) if truth_path.is_file() else None
    files = manifest.get("files", {})
    train = [load_trajectory(directory / f) for f in files.get("train", [])]
    heldout = [load_trajectory(directory / f) for f in files.get("heldout", [])]
    if not train:
        raise ConfigError(f"{directory}: dataset has no training trajectories")
    return manifest, truth, train, heldout


# ---------------------------------------------------------------- fitting

def make_evaluator(cfg: ExperimentConfig, truth: Mechanism | None, heldout: Sequence[Trajectory],
                   seeds: dict[str, int]) -> Evaluator | None:
    if truth is None or not heldout:
        return None
    mcfg = cfg.metrics
    mode = default_cfkl_mode(truth.shape) if mcfg.cfkl_mode == "auto" else mcfg.cfkl_mode
    contexts = sample_contexts(heldout, mcfg.diff_contexts, seeds["contexts"])
    return Evaluator(truth, contexts, mcfg.intervention.params(), mcfg.diff_pairs, mcfg.cfkl_rollouts,
                     mcfg.cfkl_horizon, mode, seeds["cfkl"])


def neural_template(cfg: ExperimentConfig, est: EstimatorSection, seed: int) -> Mechanism:
    """DIML uses the count-based network on anonymous games and the full-profile network otherwise."""
    if cfg.mechanism.kind == "count_neural":
        return random_count_neural_mechanism(cfg.shape, tuple(est.widths), seed, est.init_scale)
    return random_neural_mechanism(cfg.shape, tuple(est.widths), seed, est.init_scale)


def wrong_learner(learner: LearnerParams, est: EstimatorSection) -> LearnerParams:
    return learner.replace(beta=learner.beta * est.beta_factor)


def default_section(name: str, cfg: ExperimentConfig) -> EstimatorSection:
    est = cfg.estimators.get(name)
    if est is not None:
        return est
    if name == "struct":
        return EstimatorSection(lr=3e-2, epochs=300)
    if name == "tabular":
        return EstimatorSection(lr=1e-2, init_scale=0.5)
    return EstimatorSection(lr=3e-3)


def run_fit(name: str, cfg: ExperimentConfig, train, heldout, truth: Mechanism | None, seeds: dict[str, int],
            progress=None) -> tuple[FitResult, dict]:
    """Fit one estimator; returns the result and the echo written to its manifest."""
    if name not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {name!r}; expected one of {ESTIMATORS}")
    est = default_section(name, cfg)
    learner = cfg.generator.params()
    tcfg = est.train_config(learner, seeds["shuffle"], cfg.metrics.eval_every)
    evaluator = make_evaluator(cfg, truth, heldout, seeds)
    echo = {"estimator": name, "section": asdict(est), "likelihood_learner": asdict(learner)}
    if name == "diml":
        res = fit_diml(train, heldout, neural_template(cfg, est, seeds["init"]), tcfg, evaluator, progress)
    elif name == "diml-wrong":
        wrong = wrong_learner(learner, est)
        echo["likelihood_learner"] = asdict(wrong)
        echo["beta_factor"] = est.beta_factor
        res = fit_diml_wrong(train, heldout, neural_template(cfg, est, seeds["init"]), tcfg, wrong, evaluator,
                             progress)
    elif name == "tabular":
        res = fit_tabular_mle(train, heldout, cfg.shape, tcfg, evaluator, seeds["init"], est.init_scale,
                              progress=progress)
    else:
        family = est.family or cfg.mechanism.kind
        if family not in ("congestion", "public_goods"):
            raise ConfigError(f"struct estimator needs a structural family; mechanism kind is {cfg.mechanism.kind!r}")
        echo["family"] = family
        res = fit_struct_mle(train, heldout, family, cfg.shape, tcfg, evaluator, progress)
    return res, echo


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def metrics_csv(res: FitResult, record_wallclock: bool = False) -> str:
    """Learning curve as CSV text. ``wallclock_s`` is left blank unless requested, keeping reruns byte-identical."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in res.records:
        row = [str(int(r["epoch"]))] + [_fmt(r[c]) for c in CSV_COLUMNS[1:-1]]
        row.append(_fmt(r["wallclock_s"]) if record_wallclock else "")
        w.writerow(row)
    return buf.getvalue()


def save_fit(res: FitResult, out, manifest: dict, record_wallclock: bool = False) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"estimator": res.name, "beta": res.beta,
            "q_init": None if res.q_init is None else np.asarray(res.q_init).tolist()}
    save_mechanism(res.mechanism, out / "mechanism.json", meta)
    (out / "metrics.csv").write_text(metrics_csv(res, record_wallclock))
    lines = ["epoch,epoch_seconds,train_loss"]
    lines += [f"{e},{repr(s)},{repr(l)}" for e, (s, l) in enumerate(zip(res.epoch_wallclock, res.loss_history), 1)]
    (out / "timing.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "manifest.json", {"kind": "fit", "tool_version": __version__, **manifest})
    return out


def fit_from_dir(data_dir, name: str, cfg: ExperimentConfig, out, record_wallclock: bool = False,
                 progress=None) -> FitResult:
    data_manifest, truth, train, heldout = load_dataset(data_dir)
    shape = GameShape(*(int(data_manifest["shape"][x]) for x in ("n", "k")))
    if shape != cfg.shape:
        raise ShapeError(f"config game shape (n={cfg.game.n}, k={cfg.game.k}) does not match the dataset "
                         f"(n={shape.n}, k={shape.k})")
    seeds = derive_seeds(cfg.seed, stream_of(cfg))
    res, echo = run_fit(name, cfg, train, heldout, truth, seeds, progress)
    save_fit(res, out, {
        "config": cfg.to_dict(),
        "seeds": {"master": cfg.seed, "stream": stream_of(cfg), **seeds},
        "data": {"path": str(data_dir), "seeds": data_manifest.get("seeds")},
        **echo,
    }, record_wallclock)
    return res


# ---------------------------------------------------------------- evaluation

EVAL_COLUMNS = ("diff_mse", "cfkl_exact_joint", "cfkl_count_key", "heldout_nll")


def evaluate_mechanisms(truth: Mechanism, est: Mechanism, heldout: Sequence[Trajectory], cfg: ExperimentConfig,
                        learner: LearnerParams | None = None, q0=None, beta=None) -> dict[str, float]:
    """diff_mse, cfkl in every feasible key mode, and held-out NLL of ``est``."""
    if truth.shape != est.shape:
        raise ShapeError(f"mechanism shapes differ: {truth.shape} vs {est.shape}")
    seeds = derive_seeds(cfg.seed, stream_of(cfg))
    m = cfg.metrics
    out = {c: float("nan") for c in EVAL_COLUMNS}
    if heldout:
        contexts = sample_contexts(heldout, m.diff_contexts, seeds["contexts"])
        out["diff_mse"] = diff_mse(truth, est, contexts, m.diff_pairs, seeds["cfkl"])
        lcfg = LikelihoodConfig(learner or cfg.generator.params())
        out["heldout_nll"] = mean_nll(est, heldout, lcfg, q0, beta)
    for mode in MODES:
        try:
            out["cfkl_" + mode.replace("-", "_")] = cfkl_params(
                truth, est, m.intervention.params(), m.cfkl_rollouts, m.cfkl_horizon, mode, seeds["cfkl"])
        except InfeasibleError as exc:
            log.info("skipping %s: %s", mode, exc)
    return out


def evaluation_csv(row: dict[str, float]) -> str:
    return ",".join(EVAL_COLUMNS) + "\n" + ",".join(_fmt(row[c]) for c in EVAL_COLUMNS) + "\n"


# ---------------------------------------------------------------- pipeline

@dataclass
class ExperimentOutcome:
    config: ExperimentConfig
    results: dict[str, FitResult]
    skipped: dict[str, str]
    out: Path


def applicable(cfg: ExperimentConfig) -> tuple[list[str], dict[str, str]]:
    run, skipped = [], {}
    for name in cfg.estimators.listed():
        if name == "tabular" and cfg.shape.n_joint > 10**6:
            skipped[name] = f"{cfg.shape.k}^{cfg.shape.n} joint actions exceed the tabulation cap"
        else:
            run.append(name)
    return run, skipped


def run_experiment(cfg: ExperimentConfig, out, workers: int = 1, record_wallclock: bool = False,
                   progress=None) -> ExperimentOutcome:
    out = Path(out)
    ds = make_dataset(cfg)
    save_dataset(ds, out / "data")
    names, skipped = applicable(cfg)
    for name, why in skipped.items():
        log.warning("%s: omitted (%s)", name, why)

    def job(name):
        return name, run_fit(name, cfg, ds.train, ds.heldout, ds.truth, ds.seeds, progress)

    if workers > 1 and len(names) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            finished = list(pool.map(job, names))
    else:
        finished = [job(name) for name in names]
    results = {}
    for name, (res, echo) in finished:
        save_fit(res, out / name, {
            "config": cfg.to_dict(),
            "seeds": {"master": cfg.seed, "stream": stream_of(cfg), **ds.seeds},
            "data": {"path": "../data"},
            **echo,
        }, record_wallclock)
        results[name] = res
    _write_json(out / "manifest.json", {
        "kind": "experiment",
        "tool_version": __version__,
        "config": cfg.to_dict(),
        "seeds": {"master": cfg.seed, "stream": stream_of(cfg), **ds.seeds},
        "estimators": names,
        "omitted": skipped,
    })
    (out / "summary.csv").write_text(summary_csv(results))
    return ExperimentOutcome(cfg, results, skipped, out)


def summary_csv(results: dict[str, FitResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("estimator", "epochs", "train_nll", "heldout_nll", "diff_mse", "cfkl_params"))
    for name, res in results.items():
        f = res.final
        w.writerow((name, int(f["epoch"]), *(_fmt(f[c]) for c in ("train_nll", "heldout_nll", "diff_mse",
                                                                  "cfkl_params"))))
    return buf.getvalue()


def preset_configs(which: str, paper_scale: bool = False, seed: int = 0) -> list[ExperimentConfig]:
    names = PRESETS if which == "all" else (which,)
    return [preset(n, paper_scale, seed) for n in names]
