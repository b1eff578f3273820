"""Training objectives for mixed fine/coarse supervision.

All loss functions return a scalar node averaged over the examples they are
given. The coarse-data terms are

* ``coarse_nll``: paragraph-classification NLL of the coarse head (multi-task);
* ``mml_loss``: negative log of the span mass inside the labeled paragraph;
* ``pd_loss``: distance between the model's span distribution and its own
  prediction restricted to the labeled paragraph and renormalized (the
  teacher, which carries no gradient). With cross-entropy this is the
  generalized-EM update; squared error is the distillation variant.

Start and end factors are projected and compared separately. For cross
entropy this is exact (the joint cross entropy of a factorized teacher and
student is the sum of the factor cross entropies). ``joint=True`` computes the
squared error over all (start, end) pairs of the product distribution instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data import CoarseLabel, Example, FineLabel
from .model import Batch, SpanBelief, _as_nodes, coarse_belief, fine_belief

DISTANCES = ("cross_entropy", "squared_error")
KINDS = ("supervised", "mtl", "mml", "pd")
MARGINAL_FLOOR = 1e-30
ALPHA_GRID = (0.01, 0.1, 0.5, 1.0, 5.0, 10.0, 100.0)

_ALIASES = {
    "supervised": ("supervised", None),
    "mtl": ("mtl", None),
    "mml": ("mml", None),
    "pd-xent": ("pd", "cross_entropy"),
    "pd-err2": ("pd", "squared_error"),
}


class DegenerateProjectionError(ValueError):
    pass


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class Objective:
    kind: str
    distance: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective {self.kind!r}")
        if (self.kind == "pd") != (self.distance is not None):
            raise ValueError("only the pd objective carries a distance")
        if self.distance is not None and self.distance not in DISTANCES:
            raise ValueError(f"unknown distance {self.distance!r}")

    @classmethod
    def parse(cls, text: str) -> "Objective":
        key = text.strip().lower().replace("_", "-")
        key = {"pd-cross-entropy": "pd-xent", "pd-squared-error": "pd-err2", "em": "pd-xent"}.get(key, key)
        if key not in _ALIASES:
            raise ValueError(f"unknown objective {text!r}; choose from {', '.join(_ALIASES)}")
        return cls(*_ALIASES[key])

    @property
    def name(self) -> str:
        for k, v in _ALIASES.items():
            if v == (self.kind, self.distance):
                return k
        raise AssertionError(self)

    @property
    def uses_coarse(self) -> bool:
        return self.kind != "supervised"


def _labels(examples: Sequence[Example], fine: bool) -> list:
    out = []
    for ex in examples:
        if fine and not isinstance(ex.label, FineLabel):
            raise LabelError(f"{ex.id}: expected a fine label")
        if not fine and not isinstance(ex.label, CoarseLabel):
            raise LabelError(f"{ex.id}: expected a coarse label")
        out.append(ex.label)
    return out


def _batch_mean(per_example: dc.Node, weights=None) -> dc.Node:
    n = per_example.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    return dc.total(dc.mul(per_example, dc.constant(w)))


def _span_index(batch: Batch, labels: Sequence[FineLabel]):
    starts, ends = [], []
    for b, y in enumerate(labels):
        n = batch.lengths[b][y.a_p] if 0 <= y.a_p < len(batch.lengths[b]) else 0
        if not 0 <= y.a_start <= y.a_end < n:
            raise LabelError(f"label {y} out of range for example {b}")
        starts.append(batch.flat_index(b, y.a_p, y.a_start))
        ends.append(batch.flat_index(b, y.a_p, y.a_end))
    return np.array(starts), np.array(ends)


# ----------------------------------------------------------------------------
# fine and multi-task terms
# ----------------------------------------------------------------------------

def span_nll(belief: SpanBelief, labels: Sequence[FineLabel]) -> dc.Node:
    """Per-example -log p_start(a_start) - log p_end(a_end), shape [B]."""
    s_idx, e_idx = _span_index(belief.batch, labels)
    return dc.sub(dc.scale(dc.take(belief.start_logprob, s_idx), -1.0),
                  dc.take(belief.end_logprob, e_idx))


def supervised_loss(params, examples, belief: SpanBelief | None = None) -> dc.Node:
    labels = _labels(_as_list(examples), fine=True)
    belief = belief or fine_belief(params, examples)
    return _batch_mean(span_nll(belief, labels))


def coarse_nll(params, examples, encoded=None) -> dc.Node:
    examples = _as_list(examples)
    labels = _labels(examples, fine=False)
    belief = coarse_belief(params, examples, encoded)
    M = belief.batch.max_paragraphs
    for b, z in enumerate(labels):
        if not belief.batch.para_mask[b, z.a_p]:
            raise LabelError(f"paragraph {z.a_p} out of range for example {b}")
    idx = np.array([b * M + z.a_p for b, z in enumerate(labels)])
    return _batch_mean(dc.scale(dc.take(belief.logprob, idx), -1.0))


def _as_list(examples):
    if isinstance(examples, Example):
        return [examples]
    if isinstance(examples, Batch):
        return examples.examples
    return list(examples)


# ----------------------------------------------------------------------------
# marginal likelihood
# ----------------------------------------------------------------------------

def paragraph_marginal(belief: SpanBelief, paragraphs: Sequence[int], max_span_len: int) -> dc.Node:
    """Per-example mass of all spans inside the given paragraph, shape [B].

    For each end position e the admissible starts form a window
    [max(o_p, e - L + 1), e], summed with an in-paragraph prefix sum, so the
    cost is linear in the paragraph length.
    """
    batch = belief.batch
    B, T = batch.tokens.shape
    in_para = batch.paragraph_mask(paragraphs)
    p_start = dc.mul(dc.exp(belief.start_logprob), dc.constant(in_para.astype(float)))
    p_end = dc.exp(belief.end_logprob)
    prefix = dc.cumsum_rows(p_start)

    ends, lows, owner = [], [], []
    for b, p in enumerate(paragraphs):
        o, n = batch.offsets[b][p], batch.lengths[b][p]
        e = np.arange(o, o + n)
        ends.append(b * T + e)
        lows.append(b * T + np.maximum(o, e - max_span_len + 1))
        owner.append(np.full(n, b))
    ends, lows, owner = map(np.concatenate, (ends, lows, owner))
    window = dc.add(dc.sub(dc.take(prefix, ends), dc.take(prefix, lows)), dc.take(p_start, lows))
    terms = dc.mul(dc.take(p_end, ends), window)
    gather = np.zeros((B, len(ends)))
    gather[owner, np.arange(len(ends))] = 1.0
    return dc.reshape(dc.matmul(dc.constant(gather), dc.reshape(terms, (len(ends), 1))), (B,))


def mml_loss(params, examples, max_span_len: int, belief: SpanBelief | None = None) -> dc.Node:
    examples = _as_list(examples)
    labels = _labels(examples, fine=False)
    belief = belief or fine_belief(params, examples)
    marginal = paragraph_marginal(belief, [z.a_p for z in labels], max_span_len)
    return _batch_mean(dc.scale(dc.log(dc.clamp_min(marginal, MARGINAL_FLOOR)), -1.0))


# ----------------------------------------------------------------------------
# posterior projection and distillation
# ----------------------------------------------------------------------------

@dataclass
class ProjectedBelief:
    """Teacher distributions: zero outside the labeled paragraph, plain arrays."""

    start: np.ndarray      # [B, T]
    end: np.ndarray
    paragraphs: list[int]
    valid: np.ndarray      # [B] False where the projection was degenerate

    @property
    def start_logprob(self) -> np.ndarray:
        return _safe_log(self.start)

    @property
    def end_logprob(self) -> np.ndarray:
        return _safe_log(self.end)


def _safe_log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), dc.NEG_INF)


def _restrict(logprob: np.ndarray, in_para: np.ndarray):
    probs = np.where(in_para, np.exp(logprob), 0.0)
    mass = probs.sum(axis=1)
    ok = mass > 0
    out = np.divide(probs, mass[:, None], out=np.zeros_like(probs), where=ok[:, None])
    return out, ok


def project(belief: SpanBelief, paragraphs: Sequence[int], on_degenerate: str = "raise") -> ProjectedBelief:
    """Restrict each factor of a (detached) belief to the labeled paragraph and renormalize.

    A factor with zero mass in the paragraph raises
    :class:`DegenerateProjectionError`, or with ``on_degenerate="skip"`` marks
    the example invalid and leaves its teacher at zero.
    """
    paragraphs = [int(p) for p in paragraphs]
    in_para = belief.batch.paragraph_mask(paragraphs)
    q_start, ok_s = _restrict(belief.start_logprob.value, in_para)
    q_end, ok_e = _restrict(belief.end_logprob.value, in_para)
    valid = ok_s & ok_e
    if not valid.all() and on_degenerate == "raise":
        bad = int(np.nonzero(~valid)[0][0])
        raise DegenerateProjectionError(
            f"example {bad}: no probability mass inside paragraph {paragraphs[bad]}")
    return ProjectedBelief(q_start, q_end, paragraphs, valid)


def _distance(student: SpanBelief, teacher: ProjectedBelief, distance: str, joint: bool) -> dc.Node:
    """Per-example distance, shape [B]."""
    qs, qe = dc.constant(teacher.start), dc.constant(teacher.end)
    if distance == "cross_entropy":
        return dc.scale(dc.add(dc.sum_rows(dc.mul(qs, student.start_logprob)),
                               dc.sum_rows(dc.mul(qe, student.end_logprob))), -1.0)
    ps, pe = dc.exp(student.start_logprob), dc.exp(student.end_logprob)
    if not joint:
        return dc.add(dc.sum_rows(dc.square(dc.sub(qs, ps))),
                      dc.sum_rows(dc.square(dc.sub(qe, pe))))
    # sum over (s, e) of (q_s q_e - p_s p_e)^2, expanded into factor inner products
    qq = (teacher.start ** 2).sum(axis=1) * (teacher.end ** 2).sum(axis=1)
    cross = dc.mul(dc.sum_rows(dc.mul(qs, ps)), dc.sum_rows(dc.mul(qe, pe)))
    pp = dc.mul(dc.sum_rows(dc.square(ps)), dc.sum_rows(dc.square(pe)))
    return dc.add(dc.sub(dc.constant(qq), dc.scale(cross, 2.0)), pp)


def pd_loss(params, examples, distance: str, belief: SpanBelief | None = None,
            teacher: ProjectedBelief | None = None, joint: bool = False) -> dc.Node:
    """Posterior-distillation loss; degenerate examples are dropped from the mean."""
    if distance not in DISTANCES:
        raise ValueError(f"unknown distance {distance!r}")
    examples = _as_list(examples)
    labels = _labels(examples, fine=False)
    belief = belief or fine_belief(params, examples)
    if teacher is None:
        frozen = SpanBelief(dc.detach(belief.start_logprob), dc.detach(belief.end_logprob), belief.batch)
        teacher = project(frozen, [z.a_p for z in labels], on_degenerate="skip")
    n_valid = int(teacher.valid.sum())
    if n_valid == 0:
        return dc.constant(0.0)
    per_example = _distance(belief, teacher, distance, joint)
    return _batch_mean(per_example, teacher.valid / n_valid)


# ----------------------------------------------------------------------------
# combined loss
# ----------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    fine: float
    coarse: float
    total: float
    skipped: int = 0


def combined_loss(params, fine_examples, coarse_examples, objective: Objective, alpha: float,
                  max_span_len: int = 10, joint_squared_error: bool = False):
    """Mean fine NLL plus ``alpha`` times the mean coarse term.

    Returns ``(loss_node, LossBreakdown)``. The supervised objective ignores
    ``coarse_examples``.
    """
    nodes = _as_nodes(params)
    fine_examples = _as_list(fine_examples or [])
    if not fine_examples:
        raise ValueError("combined_loss needs a non-empty fine batch")
    fine_term = supervised_loss(nodes, fine_examples)
    if not objective.uses_coarse or not coarse_examples:
        return fine_term, LossBreakdown(float(fine_term.value), 0.0, float(fine_term.value))

    coarse_examples = _as_list(coarse_examples)
    skipped = 0
    if objective.kind == "mtl":
        coarse_term = coarse_nll(nodes, coarse_examples)
    elif objective.kind == "mml":
        coarse_term = mml_loss(nodes, coarse_examples, max_span_len)
    else:
        belief = fine_belief(nodes, coarse_examples)
        frozen = SpanBelief(dc.detach(belief.start_logprob), dc.detach(belief.end_logprob), belief.batch)
        teacher = project(frozen, [ex.label.a_p for ex in coarse_examples], on_degenerate="skip")
        skipped = int((~teacher.valid).sum())
        coarse_term = pd_loss(nodes, coarse_examples, objective.distance, belief=belief,
                              teacher=teacher, joint=joint_squared_error)
    loss = dc.add(fine_term, dc.scale(coarse_term, alpha))
    return loss, LossBreakdown(float(fine_term.value), float(coarse_term.value),
                               float(loss.value), skipped)
