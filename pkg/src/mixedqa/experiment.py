"""The full comparison protocol: every objective across seeds and the alpha grid.

One experiment trains the fine-only baseline, the ceiling (coarse split with its
hidden spans promoted to fine labels) and each coarse-using objective at every
alpha, picks alpha per (objective, seed) on dev Fine-F1, then evaluates on the
test split and analyzes predictive distributions on the coarse split.

Everything written to the output directory is a deterministic function of the
configuration; timings only go to the log.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import DatasetBundle, GenConfig
from .evaluate import (
    Measurement, UndefinedGainError, analyze_predictive, evaluate_fine, evaluate_passage_given, gain,
    promote_hidden, report, summarize,
)
from .model import save_params
from .objectives import ALPHA_GRID, Objective
from .training import RunRecord, TrainConfig, select_best, train, write_run

log = logging.getLogger(__name__)

COARSE_OBJECTIVES = ("mtl", "mml", "pd-xent", "pd-err2")
SECTIONS = ("gen", "train", "experiment", "data_dir", "output_dir")


class ConfigKeyError(ValueError):
    """Unknown or malformed configuration key; ``key`` names the offender."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ExperimentOptions:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    alphas: tuple[float, ...] = ALPHA_GRID
    objectives: tuple[str, ...] = COARSE_OBJECTIVES
    condition: str = "fine+coarse"
    jobs: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentOptions = field(default_factory=ExperimentOptions)
    data_dir: str | None = None
    output_dir: str | None = None

    def to_dict(self) -> dict:
        exp = dataclasses.asdict(self.experiment)
        exp = {k: list(v) if isinstance(v, tuple) else v for k, v in exp.items()}
        return {"gen": dataclasses.asdict(self.gen), "train": self.train.to_dict(), "experiment": exp,
                "data_dir": self.data_dir, "output_dir": self.output_dir}


def _section(cls, values: Any, name: str):
    if not isinstance(values, dict):
        raise ConfigKeyError(name, "expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigKeyError(f"{name}.{key}", "unknown key")
    kwargs = {}
    for key, value in values.items():
        if key == "objective":
            try:
                value = Objective.parse(value)
            except ValueError as err:
                raise ConfigKeyError(f"{name}.{key}", str(err)) from None
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigKeyError(name, str(err)) from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config, rejecting unknown keys at every level."""
    if not isinstance(raw, dict):
        raise ConfigKeyError("<root>", "expected a mapping")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigKeyError(key, "unknown key")
    gen = _section(GenConfig, raw.get("gen", {}), "gen")
    train_cfg = _section(TrainConfig, raw.get("train", {}), "train")
    opts = _section(ExperimentOptions, raw.get("experiment", {}), "experiment")
    for name in opts.objectives:
        try:
            if not Objective.parse(name).uses_coarse:
                raise ValueError(f"{name!r} does not use the coarse split")
        except ValueError as err:
            raise ConfigKeyError("experiment.objectives", str(err)) from None
    if not opts.seeds or not opts.alphas:
        raise ConfigKeyError("experiment", "seeds and alphas must be non-empty")
    for key in ("data_dir", "output_dir"):
        if raw.get(key) is not None and not isinstance(raw[key], str):
            raise ConfigKeyError(key, "expected a path string")
    return ExperimentConfig(gen, train_cfg, opts, raw.get("data_dir"), raw.get("output_dir"))


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigKeyError(str(path), f"not valid JSON ({err})") from None
    return config_from_dict(raw)


def dump_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# cells
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    model: str          # supervised, ceiling, or a coarse objective name
    seed: int
    alpha: float | None

    @property
    def path(self) -> str:
        tail = f"seed{self.seed}" if self.alpha is None else f"seed{self.seed}/alpha{self.alpha!r}"
        return f"runs/{self.model}/{tail}"


def plan(config: ExperimentConfig) -> list[Cell]:
    cells = []
    for seed in config.experiment.seeds:
        cells.append(Cell("supervised", seed, None))
        cells.append(Cell("ceiling", seed, None))
        for name in config.experiment.objectives:
            for a in config.experiment.alphas:
                cells.append(Cell(Objective.parse(name).name, seed, float(a)))
    return cells


def _cell_config(config: ExperimentConfig, cell: Cell) -> TrainConfig:
    if cell.model in ("supervised", "ceiling"):
        return dataclasses.replace(config.train, objective=Objective("supervised"), alpha=0.0, seed=cell.seed)
    return dataclasses.replace(config.train, objective=Objective.parse(cell.model), alpha=cell.alpha,
                               seed=cell.seed)


def _run_cell(args):
    config, cell, bundle = args
    data = promote_hidden(bundle) if cell.model == "ceiling" else bundle
    try:
        record, params = train(_cell_config(config, cell), data, dev=bundle.dev_fine)
    except Exception as err:   # recorded in the failure manifest, not fatal to the experiment
        return cell, None, None, f"{type(err).__name__}: {err}\n{traceback.format_exc(limit=3)}"
    log.info("cell %s best_dev_f1=%.4f best_step=%d (%.1fs)", cell.path, record.best_dev_f1,
             record.best_step, record.wall_clock)
    return cell, record, params, None


# ----------------------------------------------------------------------------
# driver
# ----------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    measurements: list[Measurement]
    selected_alpha: dict[str, dict[int, float]]
    failures: list[dict]
    means: dict[str, float]
    stds: dict[str, float]
    gains: dict[str, float | None]


MODEL_ORDER = ("supervised", "mtl", "mml", "pd-xent", "pd-err2", "ceiling")


def run_experiment(config: ExperimentConfig, bundle: DatasetBundle, out_dir, jobs: int | None = None) -> ExperimentResult:
    """Train every cell, select alpha on dev, evaluate, and write the three tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(config.to_dict(), out / "config.json")
    jobs = config.experiment.jobs if jobs is None else jobs
    cells = plan(config)
    work = [(config, c, bundle) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, work))
    else:
        results = [_run_cell(w) for w in work]

    failures, done = [], {}
    for cell, record, params, error in results:
        if error is not None:
            log.error("cell %s failed: %s", cell.path, error.splitlines()[0])
            failures.append({"cell": cell.path, "error": error.splitlines()[0]})
            continue
        write_run(record, out / cell.path)
        done[cell] = (record, params)

    # alpha selection per (model, seed)
    chosen: dict[tuple[str, int], tuple[RunRecord, Any]] = {}
    selected_alpha: dict[str, dict[int, float]] = {}
    for (model, seed) in sorted({(c.model, c.seed) for c in cells}):
        runs = [(c, done[c]) for c in cells if c.model == model and c.seed == seed and c in done]
        if not runs:
            continue
        i = select_best([r for _, (r, _) in runs])
        chosen[(model, seed)] = runs[i][1]
        if runs[i][0].alpha is not None:
            selected_alpha.setdefault(model, {})[seed] = runs[i][0].alpha

    L = config.train.max_span_len
    condition = config.experiment.condition
    measurements = []
    for (model, seed), (record, params) in sorted(chosen.items(), key=lambda kv: (_rank(kv[0][0]), kv[0][1])):
        save_params(params, out / "models" / model / f"seed{seed}.ckpt")
        measurements.append(Measurement(condition, model, seed, "fine_f1", evaluate_fine(params, bundle.test_fine, L)))
        measurements.append(Measurement(condition, model, seed, "passage_f1",
                                        evaluate_passage_given(params, bundle.test_fine, L)))
        if model != "ceiling" and bundle.coarse_train:
            res = analyze_predictive(params, bundle.coarse_train, L)
            for metric in ("entropy", "xent_gold", "err2_gold", "passage_mrr"):
                measurements.append(Measurement(condition, model, seed, metric, getattr(res, metric)))

    result = summarize_experiment(measurements, selected_alpha, failures)
    write_reports(result, out)
    return result


def _rank(model: str) -> int:
    return MODEL_ORDER.index(model) if model in MODEL_ORDER else len(MODEL_ORDER)


def summarize_experiment(measurements, selected_alpha, failures) -> ExperimentResult:
    by_model: dict[str, list[float]] = {}
    for m in measurements:
        if m.metric == "fine_f1":
            by_model.setdefault(m.model, []).append(m.value)
    means = {k: summarize(v)[0] for k, v in by_model.items()}
    stds = {k: summarize(v)[1] for k, v in by_model.items()}
    gains: dict[str, float | None] = {}
    if "supervised" in means and "ceiling" in means:
        for model, mean in means.items():
            try:
                gains[model] = gain(mean, means["supervised"], means["ceiling"])
            except UndefinedGainError:
                gains[model] = None
    return ExperimentResult(measurements, selected_alpha, failures, means, stds, gains)


def write_reports(result: ExperimentResult, out_dir) -> None:
    """Tables 1-3 analogues plus the raw measurements, gains, alphas and failures."""
    out = Path(out_dir)
    ms = result.measurements
    with_gain = list(ms)
    for model, g in result.gains.items():
        if g is not None:
            cond = next(m.condition for m in ms if m.model == model)
            with_gain.append(Measurement(cond, model, -1, "gain", g))
    report(with_gain, ["fine_f1", "gain"], out, title="table1_fine_f1", scale={"fine_f1": 100})
    report(ms, ["fine_f1", "passage_f1"], out, title="table2_passage_given",
           scale={"fine_f1": 100, "passage_f1": 100})
    report([m for m in ms if m.model != "ceiling"], ["entropy", "xent_gold", "err2_gold", "passage_mrr"], out,
           title="table3_predictive")
    dump_json([dataclasses.asdict(m) for m in ms], out / "measurements.json")
    dump_json({"mean_fine_f1": result.means, "std_fine_f1": result.stds, "gain": result.gains,
               "selected_alpha": {k: {str(s): a for s, a in v.items()} for k, v in result.selected_alpha.items()}},
              out / "summary.json")
    dump_json(result.failures, out / "failures.json")


def load_measurements(out_dir) -> list[Measurement]:
    raw = json.loads((Path(out_dir) / "measurements.json").read_text(encoding="utf-8"))
    return [Measurement(**m) for m in raw]


def ordering_holds(means: dict[str, float], supervised_std: float) -> dict[str, bool]:
    """The qualitative claims: Supervised < MTL < PD(err2), PD(err2) >= MML, and a gap over 2 std."""
    return {
        "supervised<mtl": means["supervised"] < means["mtl"],
        "mtl<pd-err2": means["mtl"] < means["pd-err2"],
        "pd-err2>=mml": means["pd-err2"] >= means["mml"],
        "gap>2std": means["pd-err2"] - means["supervised"] > 2 * supervised_std,
    }
