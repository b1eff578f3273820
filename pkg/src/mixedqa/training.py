"""Interleaved fine/coarse optimization with Adadelta and dev-set early stopping."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data import CoarseLabel, DatasetBundle, Document, Example, FineLabel
from .evaluate import evaluate_fine
from .model import GROUPS, PARAM_NAMES, ModelConfig, ModelParams
from .objectives import ALPHA_GRID, Objective, combined_loss

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, group: str):
        super().__init__(f"non-finite gradient in parameter group {group!r}")
        self.group = group


@dataclass(frozen=True)
class TrainConfig:
    objective: Objective = Objective("supervised")
    alpha: float = 1.0
    fine_batch_size: int = 16
    coarse_batch_size: int = 16
    paragraphs_sampled_per_example: int = 8
    max_steps: int = 2000
    eval_every: int = 100
    patience: int = 5
    max_span_len: int = 10
    rho: float = 0.95
    epsilon: float = 1e-6
    optimizer: str = "adadelta"
    learning_rate: float = 0.1   # plain gradient descent only
    joint_squared_error: bool = False
    d_emb: int = 32
    d_hid: int = 64
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.paragraphs_sampled_per_example < 1 or self.patience < 1:
            raise ValueError("paragraphs_sampled_per_example and patience must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if min(self.fine_batch_size, self.coarse_batch_size, self.max_steps, self.eval_every) < 1:
            raise ValueError("batch sizes, max_steps and eval_every must be positive")
        if self.optimizer not in ("adadelta", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.d_emb, self.d_hid, self.init_scale)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["objective"] = self.objective.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "objective" in d and not isinstance(d["objective"], Objective):
            d["objective"] = Objective.parse(d["objective"])
        return cls(**d)


@dataclass
class EvalPoint:
    step: int
    dev_f1: float
    fine_loss: float
    coarse_loss: float
    total_loss: float


@dataclass
class RunRecord:
    config: TrainConfig
    history: list[EvalPoint] = field(default_factory=list)
    best_step: int = 0
    best_dev_f1: float = -1.0
    steps_run: int = 0
    skipped_projections: int = 0
    wall_clock: float = 0.0   # seconds; kept out of serialized output

    def summary(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "best_step": self.best_step,
            "best_dev_f1": self.best_dev_f1,
            "steps_run": self.steps_run,
            "skipped_projections": self.skipped_projections,
            "history": [dataclasses.asdict(p) for p in self.history],
        }


# ----------------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------------

@dataclass
class AdadeltaState:
    sq_grad: dict[str, np.ndarray]
    sq_delta: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray]) -> "AdadeltaState":
        return cls({k: np.zeros_like(v) for k, v in arrays.items()},
                   {k: np.zeros_like(v) for k, v in arrays.items()})


def _group_of(name: str) -> str:
    return next(g for g, names in GROUPS.items() if name in names)


def check_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(_group_of(name))


def adadelta_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdadeltaState,
                  rho: float = 0.95, epsilon: float = 1e-6):
    """One Adadelta update; returns new ``(params, state)`` without touching the inputs."""
    check_finite(grads)
    new_params, sq_grad, sq_delta = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        eg = rho * state.sq_grad[k] + (1 - rho) * g * g
        dx = -(np.sqrt(state.sq_delta[k] + epsilon) / np.sqrt(eg + epsilon)) * g
        sq_grad[k] = eg
        sq_delta[k] = rho * state.sq_delta[k] + (1 - rho) * dx * dx
        new_params[k] = p + dx
    return new_params, AdadeltaState(sq_grad, sq_delta)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], learning_rate: float):
    check_finite(grads)
    return {k: p - learning_rate * grads[k] for k, p in params.items()}


# ----------------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------------

def subsample_paragraphs(example: Example, k: int, rng: np.random.Generator) -> Example:
    """Keep the labeled paragraph plus ``k - 1`` others drawn without replacement.

    Kept paragraphs stay in document order and labels are re-indexed. Documents
    with at most ``k`` paragraphs are returned as is, without touching ``rng``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    M = example.document.num_paragraphs
    if M <= k:
        return example
    gold = example.label.a_p
    others = np.array([p for p in range(M) if p != gold])
    picked = rng.choice(others, size=k - 1, replace=False) if k > 1 else np.array([], dtype=int)
    keep = sorted([gold] + [int(p) for p in picked])
    remap = {old: new for new, old in enumerate(keep)}
    doc = Document(tuple(example.document.paragraphs[p] for p in keep))

    def move(y):
        if y is None:
            return None
        if isinstance(y, CoarseLabel):
            return CoarseLabel(remap[y.a_p])
        return FineLabel(remap[y.a_p], y.a_start, y.a_end)

    return dataclasses.replace(example, document=doc, label=move(example.label),
                               hidden_fine=move(example.hidden_fine))


class BatchStream:
    """Endless mini-batches from shuffled passes over a list of examples."""

    def __init__(self, examples: Sequence[Example], batch_size: int, rng: np.random.Generator):
        self.examples = list(examples)
        self.batch_size = batch_size
        self.rng = rng
        self._order: list[int] = []

    def next(self) -> list[Example]:
        out = []
        while len(out) < min(self.batch_size, len(self.examples)):
            if not self._order:
                self._order = self.rng.permutation(len(self.examples)).tolist()
            out.append(self.examples[self._order.pop()])
        return out


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "fine_order", "coarse_order", "fine_subsample", "coarse_subsample")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def _strip_hidden(examples: Sequence[Example]) -> list[Example]:
    # training never sees hidden spans of coarse examples
    return [dataclasses.replace(ex, hidden_fine=None) if ex.hidden_fine is not None else ex
            for ex in examples]


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------

def train(config: TrainConfig, bundle: DatasetBundle, dev: Sequence[Example] | None = None):
    """Run the interleaved loop; returns ``(RunRecord, best params)``."""
    started = time.perf_counter()
    dev = bundle.dev_fine if dev is None else dev
    rngs = _streams(config.seed)
    params = ModelParams.init(config.model_config(bundle.gen_config.vocab_size), rngs["init"])
    arrays = params.arrays
    state = AdadeltaState.zeros_like(arrays)
    objective = config.objective

    fine_stream = BatchStream(bundle.fine_train, config.fine_batch_size, rngs["fine_order"])
    coarse_stream = None
    if objective.uses_coarse and bundle.coarse_train:
        coarse_stream = BatchStream(_strip_hidden(bundle.coarse_train), config.coarse_batch_size,
                                    rngs["coarse_order"])
    elif bundle.coarse_train:
        log.info("objective %s ignores the coarse split (%d examples)", objective.name,
                 len(bundle.coarse_train))
    if not bundle.fine_train:
        raise ValueError("training needs finely labeled examples")

    record = RunRecord(config)
    best = params.copy()
    bad_evals = 0
    k = config.paragraphs_sampled_per_example
    for step in range(1, config.max_steps + 1):
        fine = [subsample_paragraphs(ex, k, rngs["fine_subsample"]) for ex in fine_stream.next()]
        coarse = None
        if coarse_stream is not None:
            coarse = [subsample_paragraphs(ex, k, rngs["coarse_subsample"]) for ex in coarse_stream.next()]
        nodes = {name: dc.parameter(arrays[name]) for name in PARAM_NAMES}
        loss, parts = combined_loss(nodes, fine, coarse, objective, config.alpha,
                                    config.max_span_len, config.joint_squared_error)
        if not math.isfinite(parts.total):
            raise DivergenceError(step, "loss")
        record.skipped_projections += parts.skipped
        raw = dc.backward(loss, list(nodes.values()))
        grads = {name: raw[node] for name, node in nodes.items()}
        try:
            if config.optimizer == "adadelta":
                arrays, state = adadelta_step(arrays, grads, state, config.rho, config.epsilon)
            else:
                arrays = sgd_step(arrays, grads, config.learning_rate)
        except NonFiniteGradientError as err:
            raise DivergenceError(step, f"gradient ({err.group})") from err
        record.steps_run = step

        if step % config.eval_every == 0 or step == config.max_steps:
            current = ModelParams(params.config, arrays)
            f1 = evaluate_fine(current, dev, config.max_span_len)
            record.history.append(EvalPoint(step, f1, parts.fine, parts.coarse, parts.total))
            log.info("step=%d dev_f1=%.4f fine=%.4f coarse=%.4f total=%.4f",
                     step, f1, parts.fine, parts.coarse, parts.total)
            if f1 > record.best_dev_f1:
                record.best_dev_f1, record.best_step = f1, step
                best = current.copy()
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= config.patience:
                    break
    record.wall_clock = time.perf_counter() - started
    return record, best


# ----------------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------------

@dataclass
class SweepResult:
    best: RunRecord
    best_params: ModelParams | None
    runs: list[RunRecord]


def select_best(runs: Sequence[RunRecord]) -> int:
    """Index of the run with the highest best dev F1; ties go to the smaller alpha."""
    if not runs:
        raise ValueError("no runs to select from")
    return min(range(len(runs)), key=lambda i: (-runs[i].best_dev_f1, runs[i].config.alpha, i))


def _train_job(args):
    config, bundle = args
    return train(config, bundle)


def run_many(configs: Sequence[TrainConfig], bundle: DatasetBundle, jobs: int = 1):
    """Train independent configurations, in parallel processes when ``jobs > 1``."""
    work = [(c, bundle) for c in configs]
    if jobs <= 1 or len(work) <= 1:
        return [_train_job(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_train_job, work))


def sweep(template: TrainConfig, bundle: DatasetBundle, alphas: Sequence[float] = ALPHA_GRID,
          jobs: int = 1) -> SweepResult:
    """Train one run per alpha and keep the best by dev Fine-F1."""
    if not alphas:
        raise ValueError("empty alpha grid")
    configs = [dataclasses.replace(template, alpha=float(a)) for a in alphas]
    results = run_many(configs, bundle, jobs)
    runs = [r for r, _ in results]
    i = select_best(runs)
    return SweepResult(runs[i], results[i][1], runs)


# ----------------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------------

def format_history(record: RunRecord) -> str:
    lines = [f"# objective={record.config.objective.name} alpha={record.config.alpha!r} "
             f"seed={record.config.seed}"]
    for p in record.history:
        lines.append(f"step={p.step} dev_f1={p.dev_f1!r} fine={p.fine_loss!r} "
                     f"coarse={p.coarse_loss!r} total={p.total_loss!r}")
    lines.append(f"# best_step={record.best_step} best_dev_f1={record.best_dev_f1!r} "
                 f"skipped_projections={record.skipped_projections}")
    return "\n".join(lines) + "\n"


def write_run(record: RunRecord, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.txt").write_text(format_history(record), encoding="utf-8")
    (out / "run.json").write_text(json.dumps(record.summary(), indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")


def read_run(out_dir) -> RunRecord:
    d = json.loads((Path(out_dir) / "run.json").read_text(encoding="utf-8"))
    return RunRecord(TrainConfig.from_dict(d["config"]), [EvalPoint(**p) for p in d["history"]],
                     d["best_step"], d["best_dev_f1"], d["steps_run"], d["skipped_projections"])
