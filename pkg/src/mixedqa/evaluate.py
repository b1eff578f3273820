"""Evaluation metrics and result reporting.

Distribution statistics (entropy, cross entropy and squared error to the gold
point mass) are computed separately for the start and end factors and then
averaged, so they live on a per-position scale.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import DatasetBundle, Example, FineLabel
from .model import ModelParams, decode_span, fine_belief, paragraph_best_spans

EVAL_CHUNK = 64


class UndefinedGainError(ValueError):
    pass


def token_f1(pred: FineLabel, gold: FineLabel) -> float:
    if pred.a_p != gold.a_p:
        return 0.0
    overlap = min(pred.a_end, gold.a_end) - max(pred.a_start, gold.a_start) + 1
    if overlap <= 0:
        return 0.0
    precision = overlap / pred.length
    recall = overlap / gold.length
    return 2 * precision * recall / (precision + recall)


def gold_label(ex: Example) -> FineLabel:
    """Fine label of a finely annotated example, else its hidden span."""
    if ex.is_fine:
        return ex.label
    if ex.hidden_fine is None:
        raise ValueError(f"{ex.id}: no fine-grained label available")
    return ex.hidden_fine


def _beliefs(params: ModelParams, examples: Sequence[Example]):
    for lo in range(0, len(examples), EVAL_CHUNK):
        chunk = examples[lo:lo + EVAL_CHUNK]
        yield chunk, fine_belief(params, chunk)


def predict(params: ModelParams, examples: Sequence[Example], max_span_len: int,
            restrict_to_gold: bool = False) -> list[FineLabel]:
    out = []
    for chunk, belief in _beliefs(params, examples):
        for b, ex in enumerate(chunk):
            restrict = gold_label(ex).a_p if restrict_to_gold else None
            out.append(decode_span(belief, b, max_span_len, restrict_to=restrict)[0])
    return out


def evaluate_fine(params: ModelParams, split: Sequence[Example], max_span_len: int = 10) -> float:
    preds = predict(params, split, max_span_len)
    return float(np.mean([token_f1(p, gold_label(ex)) for p, ex in zip(preds, split)]))


def evaluate_passage_given(params: ModelParams, split: Sequence[Example], max_span_len: int = 10) -> float:
    preds = predict(params, split, max_span_len, restrict_to_gold=True)
    return float(np.mean([token_f1(p, gold_label(ex)) for p, ex in zip(preds, split)]))


def reciprocal_rank(paragraph_scores: Sequence[float], gold: int) -> float:
    """1 / rank of ``gold``; tied paragraphs all take the worst shared rank."""
    scores = np.asarray(paragraph_scores)
    return 1.0 / int(np.sum(scores >= scores[gold]))


def passage_mrr(params: ModelParams, split: Sequence[Example], max_span_len: int = 10) -> float:
    rr = []
    for chunk, belief in _beliefs(params, split):
        for b, ex in enumerate(chunk):
            best = paragraph_best_spans(belief.start_logprob.value[b], belief.end_logprob.value[b],
                                        belief.batch.offsets[b], belief.batch.lengths[b], max_span_len)
            rr.append(reciprocal_rank([s for s, _, _ in best], gold_label(ex).a_p))
    return float(np.mean(rr))


def distribution_stats(probs: np.ndarray, gold: int) -> tuple[float, float, float]:
    """(entropy, -log p[gold], sum_t (1[t=gold] - p_t)^2) of one distribution."""
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    xent = float(-math.log(max(p[gold], 1e-300)))
    delta = np.zeros_like(p)
    delta[gold] = 1.0
    err2 = float(((delta - p) ** 2).sum())
    return entropy, xent, err2


@dataclass
class PredictiveAnalysis:
    entropy: float
    xent_gold: float
    err2_gold: float
    passage_mrr: float
    n_examples: int


def analyze_predictive(params: ModelParams, split: Sequence[Example], max_span_len: int = 10) -> PredictiveAnalysis:
    """Entropy and distance to the gold point mass on coarsely labeled data."""
    for ex in split:
        if ex.hidden_fine is None:
            raise ValueError(f"{ex.id}: analysis needs the hidden fine label")
    stats = []
    for chunk, belief in _beliefs(params, split):
        for b, ex in enumerate(chunk):
            y = ex.hidden_fine
            n = ex.document.num_tokens
            s_gold = ex.document.offsets[y.a_p] + y.a_start
            e_gold = ex.document.offsets[y.a_p] + y.a_end
            ps = np.exp(belief.start_logprob.value[b, :n])
            pe = np.exp(belief.end_logprob.value[b, :n])
            stats.append(np.mean([distribution_stats(ps, s_gold),
                                  distribution_stats(pe, e_gold)], axis=0))
    stats = np.mean(stats, axis=0)
    return PredictiveAnalysis(float(stats[0]), float(stats[1]), float(stats[2]),
                              passage_mrr(params, split, max_span_len), len(split))


def gain(model_f1: float, baseline_f1: float, ceiling_f1: float) -> float:
    if ceiling_f1 <= baseline_f1:
        raise UndefinedGainError("ceiling must exceed the baseline")
    return (model_f1 - baseline_f1) / (ceiling_f1 - baseline_f1)


def promote_hidden(bundle: DatasetBundle) -> DatasetBundle:
    """Ceiling data: the coarse split's hidden spans become ordinary fine labels."""
    promoted = [dataclasses.replace(ex, label=ex.hidden_fine, hidden_fine=None)
                for ex in bundle.coarse_train]
    return dataclasses.replace(bundle, fine_train=list(bundle.fine_train) + promoted, coarse_train=[])


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Measurement:
    condition: str
    model: str
    seed: int
    metric: str
    value: float


def summarize(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def group_measurements(measurements: Iterable[Measurement]):
    groups: dict[tuple[str, str], dict[str, list[tuple[int, float]]]] = defaultdict(lambda: defaultdict(list))
    for m in measurements:
        groups[(m.condition, m.model)][m.metric].append((m.seed, m.value))
    return groups


def report(measurements: Sequence[Measurement], metrics: Sequence[str], out_dir=None,
           title: str = "results", scale: dict[str, float] | None = None) -> tuple[str, dict]:
    """Aligned text table (mean +- std over seeds) and a machine-readable summary.

    ``scale`` multiplies a metric for display only (e.g. 100 for F1 in points).
    """
    scale = scale or {}
    groups = group_measurements(measurements)
    header = ["Data", "Model"] + list(metrics)
    rows = []
    summary = {"title": title, "metrics": list(metrics), "rows": []}
    for (condition, model), by_metric in groups.items():
        row = [condition, model]
        entry = {"condition": condition, "model": model, "metrics": {}}
        for metric in metrics:
            pairs = sorted(by_metric.get(metric, []))
            if not pairs:
                row.append("-")
                continue
            mean, std = summarize([v for _, v in pairs])
            k = scale.get(metric, 1.0)
            row.append(f"{mean * k:.3f}" if len(pairs) == 1 else f"{mean * k:.3f} (+- {std * k:.3f})")
            entry["metrics"][metric] = {"mean": mean, "std": std, "n": len(pairs),
                                        "per_seed": {str(s): v for s, v in pairs}}
        rows.append(row)
        summary["rows"].append(entry)
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
    lines = [f"# {title}"]
    if set(metrics) & {"entropy", "xent_gold", "err2_gold"}:
        lines.append("# distribution metrics are per start/end factor, averaged over the two")
    lines += [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
    text = "\n".join(lines) + "\n"
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{title}.txt").write_text(text, encoding="utf-8")
        (out / f"{title}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    return text, summary
