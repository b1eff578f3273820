"""Shared encoder plus the fine (span) and coarse (paragraph) heads.

Examples are processed in padded batches: every document is flattened to a
row of token ids, padded to the longest document in the batch. All token
representations of a batch go through the encoder as one matrix.

Each token's feature vector is ``[e_t, q, e_t * q, overlap_t]`` where ``e_t``
is the token embedding, ``q`` the mean question embedding and ``overlap_t``
flags tokens that also occur in the question. A two-layer tanh MLP maps it to
the hidden state ``h_t``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data import Example, FineLabel

PARAM_NAMES = ("embedding", "w1", "b1", "w2", "b2", "start", "end", "coarse")
GROUPS = {
    "shared": ("embedding", "w1", "b1", "w2", "b2"),
    "fine_start": ("start",),
    "fine_end": ("end",),
    "coarse": ("coarse",),
}
CHECKPOINT_MAGIC = b"MIXEDQA-CKPT 1\n"


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 200
    d_emb: int = 32
    d_hid: int = 64
    init_scale: float = 0.1

    @property
    def d_feat(self) -> int:
        return 3 * self.d_emb + 1


@dataclass
class ModelParams:
    """Parameter arrays keyed by name; see ``PARAM_NAMES``."""

    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        c, u = config, config.init_scale
        shapes = {
            "embedding": (c.vocab_size, c.d_emb),
            "w1": (c.d_feat, c.d_hid), "b1": (c.d_hid,),
            "w2": (c.d_hid, c.d_hid), "b2": (c.d_hid,),
            "start": (c.d_hid,), "end": (c.d_hid,), "coarse": (c.d_hid,),
        }
        return cls(config, {k: rng.uniform(-u, u, size=shapes[k]) for k in PARAM_NAMES})

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        p = cls.init(config, np.random.default_rng(0))
        return cls(config, {k: np.zeros_like(v) for k, v in p.arrays.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def bind(self, requires_grad: bool = True) -> dict[str, dc.Node]:
        make = dc.parameter if requires_grad else dc.constant
        return {k: make(self.arrays[k]) for k in PARAM_NAMES}

    def __getitem__(self, name):
        return self.arrays[name]


def _as_nodes(params) -> dict[str, dc.Node]:
    return params.bind(requires_grad=False) if isinstance(params, ModelParams) else params


# ----------------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------------

@dataclass
class Batch:
    """Padded arrays for a list of examples (B documents, T token slots)."""

    examples: list[Example]
    tokens: np.ndarray          # [B, T] token ids, 0 on padding
    mask: np.ndarray            # [B, T] real-token mask
    paragraph: np.ndarray       # [B, T] paragraph index per slot, -1 on padding
    overlap: np.ndarray         # [B, T] 1.0 if the token occurs in the question
    para_mask: np.ndarray       # [B, Mmax]
    questions: np.ndarray       # [B, Lq] ids, 0 on padding
    question_mask: np.ndarray   # [B, Lq]
    offsets: list[list[int]]
    lengths: list[list[int]]

    @property
    def size(self) -> int:
        return len(self.examples)

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @property
    def max_paragraphs(self) -> int:
        return self.para_mask.shape[1]

    def flat_index(self, b: int, p: int, t: int) -> int:
        """Row-major index into a [B, T] array of token ``t`` in paragraph ``p``."""
        return b * self.width + self.offsets[b][p] + t

    def paragraph_mask(self, paragraphs: Sequence[int]) -> np.ndarray:
        return self.paragraph == np.asarray(paragraphs)[:, None]


def make_batch(examples: Sequence[Example], vocab_size: int | None = None) -> Batch:
    examples = list(examples)
    if not examples:
        raise InputError("empty batch")
    for ex in examples:
        if not ex.question:
            raise InputError(f"{ex.id}: empty question")
    B = len(examples)
    T = max(ex.document.num_tokens for ex in examples)
    M = max(ex.document.num_paragraphs for ex in examples)
    Lq = max(len(ex.question) for ex in examples)
    tokens = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    paragraph = np.full((B, T), -1, dtype=np.int64)
    overlap = np.zeros((B, T))
    para_mask = np.zeros((B, M), dtype=bool)
    questions = np.zeros((B, Lq), dtype=np.int64)
    qmask = np.zeros((B, Lq), dtype=bool)
    for b, ex in enumerate(examples):
        flat = ex.document.flat()
        n = len(flat)
        tokens[b, :n] = flat
        mask[b, :n] = True
        paragraph[b, :n] = np.repeat(np.arange(ex.document.num_paragraphs), ex.document.lengths)
        q = np.asarray(ex.question, dtype=np.int64)
        overlap[b, :n] = np.isin(flat, q)
        para_mask[b, :ex.document.num_paragraphs] = True
        questions[b, :len(q)] = q
        qmask[b, :len(q)] = True
    if vocab_size is not None:
        if tokens.max() >= vocab_size or questions.max() >= vocab_size or tokens.min() < 0:
            raise InputError("token id outside the vocabulary")
    return Batch(examples, tokens, mask, paragraph, overlap, para_mask, questions, qmask,
                 [ex.document.offsets for ex in examples],
                 [ex.document.lengths for ex in examples])


def _batch(examples_or_batch, vocab_size) -> Batch:
    if isinstance(examples_or_batch, Batch):
        if examples_or_batch.tokens.max() >= vocab_size:
            raise InputError("token id outside the vocabulary")
        return examples_or_batch
    if isinstance(examples_or_batch, Example):
        examples_or_batch = [examples_or_batch]
    return make_batch(examples_or_batch, vocab_size)


# ----------------------------------------------------------------------------
# forward pieces
# ----------------------------------------------------------------------------

@dataclass
class Encoded:
    hidden: dc.Node   # [B*T, d_hid]
    batch: Batch

    def paragraph_states(self, b: int) -> list[np.ndarray]:
        """Per-paragraph hidden matrices ``h^p`` of example ``b``."""
        h = self.hidden.value.reshape(self.batch.size, self.batch.width, -1)[b]
        return [h[o:o + n] for o, n in zip(self.batch.offsets[b], self.batch.lengths[b])]


@dataclass
class SpanBelief:
    start_logprob: dc.Node   # [B, T]; NEG_INF on padding
    end_logprob: dc.Node
    batch: Batch


@dataclass
class ParagraphBelief:
    logprob: dc.Node         # [B, Mmax]
    batch: Batch


def encode(params, examples) -> Encoded:
    nodes = _as_nodes(params)
    vocab = nodes["embedding"].shape[0]
    batch = _batch(examples, vocab)
    B, T = batch.tokens.shape

    qn = batch.question_mask.sum(axis=1)
    q_rows = batch.questions.ravel()
    averager = np.zeros((B, q_rows.size))
    for b in range(B):
        averager[b, b * batch.questions.shape[1]:b * batch.questions.shape[1] + qn[b]] = 1.0 / qn[b]
    q_emb = dc.take_rows(nodes["embedding"], q_rows)                 # [B*Lq, d_emb]
    q_vec = dc.matmul(dc.constant(averager), q_emb)                  # [B, d_emb]

    tok_emb = dc.take_rows(nodes["embedding"], batch.tokens.ravel())  # [B*T, d_emb]
    q_tok = dc.take_rows(q_vec, np.repeat(np.arange(B), T))          # [B*T, d_emb]
    feats = dc.concat_cols([
        tok_emb, q_tok, dc.mul(tok_emb, q_tok),
        dc.constant(batch.overlap.reshape(B * T, 1)),
    ])
    h1 = dc.tanh(dc.add_row(dc.matmul(feats, nodes["w1"]), nodes["b1"]))
    h2 = dc.tanh(dc.add_row(dc.matmul(h1, nodes["w2"]), nodes["b2"]))
    return Encoded(h2, batch)


def _head_scores(hidden: dc.Node, weight: dc.Node, shape) -> dc.Node:
    col = dc.reshape(weight, (weight.shape[0], 1))
    return dc.reshape(dc.matmul(hidden, col), shape)


def fine_belief(params, examples, encoded: Encoded | None = None) -> SpanBelief:
    """Independent start/end distributions, each normalized over the whole document."""
    nodes = _as_nodes(params)
    enc = encoded or encode(nodes, examples)
    batch = enc.batch
    shape = batch.tokens.shape
    start = dc.log_softmax(_head_scores(enc.hidden, nodes["start"], shape), batch.mask)
    end = dc.log_softmax(_head_scores(enc.hidden, nodes["end"], shape), batch.mask)
    return SpanBelief(start, end, batch)


def coarse_belief(params, examples, encoded: Encoded | None = None) -> ParagraphBelief:
    """Softmax over paragraphs of max-pooled hidden states dotted with the coarse weights."""
    nodes = _as_nodes(params)
    enc = encoded or encode(nodes, examples)
    batch = enc.batch
    M = batch.max_paragraphs
    seg = np.where(batch.mask, batch.paragraph + M * np.arange(batch.size)[:, None], -1)
    pooled = dc.segment_max(enc.hidden, seg.ravel(), batch.size * M)   # [B*M, d_hid]
    scores = _head_scores(pooled, nodes["coarse"], (batch.size, M))
    return ParagraphBelief(dc.log_softmax(scores, batch.para_mask), batch)


# ----------------------------------------------------------------------------
# decoding
# ----------------------------------------------------------------------------

def paragraph_best_spans(start_lp: np.ndarray, end_lp: np.ndarray, offsets, lengths,
                         max_span_len: int) -> list[tuple[float, int, int]]:
    """Best (score, start, end) per paragraph; earliest start then end on ties."""
    if max_span_len < 1:
        raise ValueError("max_span_len must be >= 1")
    best = []
    for o, n in zip(offsets, lengths):
        s_lp = start_lp[o:o + n]
        e_lp = end_lp[o:o + n]
        width = min(max_span_len, n)
        cand = np.full((n, width), -np.inf)
        for k in range(width):
            cand[:n - k, k] = s_lp[:n - k] + e_lp[k:]
        flat = int(np.argmax(cand))   # first maximum in (start, length) order
        s, k = divmod(flat, width)
        best.append((float(cand[s, k]), s, s + k))
    return best


def decode_span(belief: SpanBelief, b: int, max_span_len: int,
                restrict_to: int | None = None) -> tuple[FineLabel, float]:
    """Highest scoring valid span of example ``b`` (optionally inside one paragraph)."""
    batch = belief.batch
    per_para = paragraph_best_spans(belief.start_logprob.value[b], belief.end_logprob.value[b],
                                    batch.offsets[b], batch.lengths[b], max_span_len)
    if restrict_to is not None:
        score, s, e = per_para[restrict_to]
        return FineLabel(restrict_to, s, e), score
    p = max(range(len(per_para)), key=lambda i: (per_para[i][0], -i))
    score, s, e = per_para[p]
    return FineLabel(p, s, e), score


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def save_params(params: ModelParams, path) -> None:
    """Header line, JSON manifest line, then raw little-endian float64 arrays."""
    manifest = {
        "config": {k: getattr(params.config, k) for k in ("vocab_size", "d_emb", "d_hid", "init_scale")},
        "arrays": [[k, list(params.arrays[k].shape)] for k in PARAM_NAMES],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for k in PARAM_NAMES:
            fh.write(np.ascontiguousarray(params.arrays[k], dtype="<f8").tobytes())


def load_params(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise InputError(f"{path}: not a checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC):]
    head, _, body = rest.partition(b"\n")
    manifest = json.loads(head)
    arrays, pos = {}, 0
    for name, shape in manifest["arrays"]:
        n = int(np.prod(shape)) * 8
        arrays[name] = np.frombuffer(body[pos:pos + n], dtype="<f8").reshape(shape).copy()
        pos += n
    if pos != len(body):
        raise InputError(f"{path}: trailing or missing bytes")
    return ModelParams(ModelConfig(**manifest["config"]), arrays)
