"""Mixed-granularity QA examples, the synthetic corpus and its persistence.

A document is a list of paragraphs of token ids. A fine label is a span
``(a_p, a_start, a_end)`` with inclusive, zero-based token indices inside
paragraph ``a_p``; a coarse label names only the paragraph.

The synthetic corpus plants a question's *signature* (a short run of key
tokens) contiguously in one paragraph. Key tokens occupy the top
``key_vocab_size`` ids and are split into one block per signature position,
so token identity carries its role (first, middle, last) while filler and
question noise come from the remaining ids.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
SPLITS = ("fine_train", "coarse_train", "dev_fine", "test_fine")


class ConfigError(ValueError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.line_no = line_no


@dataclass(frozen=True)
class FineLabel:
    a_p: int
    a_start: int
    a_end: int

    @property
    def length(self) -> int:
        return self.a_end - self.a_start + 1


@dataclass(frozen=True)
class CoarseLabel:
    a_p: int


@dataclass(frozen=True)
class Document:
    paragraphs: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if not self.paragraphs or any(len(p) == 0 for p in self.paragraphs):
            raise ValueError("document needs at least one non-empty paragraph")

    @property
    def num_paragraphs(self) -> int:
        return len(self.paragraphs)

    @property
    def lengths(self) -> list[int]:
        return [len(p) for p in self.paragraphs]

    @property
    def offsets(self) -> list[int]:
        """Start of each paragraph in the flattened token sequence."""
        return np.concatenate([[0], np.cumsum(self.lengths)[:-1]]).astype(int).tolist()

    @property
    def num_tokens(self) -> int:
        return sum(self.lengths)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.asarray(p, dtype=np.int64) for p in self.paragraphs])


@dataclass(frozen=True)
class Example:
    id: str
    question: tuple[int, ...]
    document: Document
    label: FineLabel | CoarseLabel
    hidden_fine: FineLabel | None = None

    def __post_init__(self):
        lab = self.label
        if not 0 <= lab.a_p < self.document.num_paragraphs:
            raise ValueError(f"{self.id}: paragraph {lab.a_p} out of range")
        if isinstance(lab, FineLabel):
            _check_span(self.document, lab, self.id)
        if self.hidden_fine is not None:
            _check_span(self.document, self.hidden_fine, self.id)
            if isinstance(lab, CoarseLabel) and coarsen(self.hidden_fine) != lab:
                raise ValueError(f"{self.id}: hidden span outside the labeled paragraph")

    @property
    def doc_id(self) -> str:
        return self.id.split("-q")[0]

    @property
    def is_fine(self) -> bool:
        return isinstance(self.label, FineLabel)


def _check_span(doc: Document, y: FineLabel, ident: str):
    n = doc.lengths[y.a_p] if 0 <= y.a_p < doc.num_paragraphs else 0
    if not 0 <= y.a_start <= y.a_end < n:
        raise ValueError(f"{ident}: span {y} invalid for paragraph length {n}")


def coarsen(label: FineLabel) -> CoarseLabel:
    return CoarseLabel(label.a_p)


def candidate_set(doc: Document, z: CoarseLabel, max_span_len: int) -> list[FineLabel]:
    """All spans in paragraph ``z.a_p`` no longer than ``max_span_len``, lexicographic."""
    n = doc.lengths[z.a_p]
    return [FineLabel(z.a_p, s, e)
            for s in range(n) for e in range(s, min(n, s + max_span_len))]


@dataclass(frozen=True)
class GenConfig:
    vocab_size: int = 200
    num_documents: int = 300
    paragraphs_per_doc: int = 4
    min_tokens: int = 40
    max_tokens: int = 60
    questions_per_doc: int = 5
    signature_length: int = 3
    key_vocab_size: int = 60
    question_noise_tokens: int = 2
    distractor_rate: float = 0.5
    noise_rate: float = 0.2
    fine_frac: float = 0.05
    coarse_frac: float = 0.20
    dev_frac: float = 0.10
    test_frac: float = 0.15
    seed: int = 0

    def validate(self):
        fracs = (self.fine_frac, self.coarse_frac, self.dev_frac, self.test_frac)
        if any(f <= 0 for f in fracs) or sum(fracs) > 1 + 1e-12:
            raise ConfigError("split fractions must be positive and sum to at most 1")
        if not 0 <= self.distractor_rate <= 1 or not 0 <= self.noise_rate <= 1:
            raise ConfigError("distractor_rate and noise_rate must lie in [0, 1]")
        if self.signature_length < 1 or self.signature_length > self.min_tokens:
            raise ConfigError("signature_length must be between 1 and min_tokens")
        if self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise ConfigError("need 1 <= min_tokens <= max_tokens")
        if self.paragraphs_per_doc < 1 or self.num_documents < 4 or self.questions_per_doc < 1:
            raise ConfigError("need paragraphs_per_doc >= 1, num_documents >= 4, questions_per_doc >= 1")
        if self.key_vocab_size < self.signature_length or self.key_vocab_size >= self.vocab_size:
            raise ConfigError("key_vocab_size must cover one block per signature position "
                              "and leave filler ids")
        for f in ("fine_frac", "coarse_frac", "dev_frac", "test_frac"):
            if round(getattr(self, f) * self.num_documents) < 1:
                raise ConfigError(f"{f} allocates no documents")

    @property
    def num_filler(self) -> int:
        return self.vocab_size - self.key_vocab_size

    def key_block(self, position: int) -> tuple[int, int]:
        """Id range [lo, hi) of key tokens usable at signature ``position``."""
        size = self.key_vocab_size // self.signature_length
        lo = self.num_filler + position * size
        return lo, lo + size


@dataclass
class DatasetBundle:
    fine_train: list[Example]
    coarse_train: list[Example]
    dev_fine: list[Example]
    test_fine: list[Example]
    gen_config: GenConfig = field(default_factory=GenConfig)

    def split(self, name: str) -> list[Example]:
        return getattr(self, name)

    def splits(self) -> dict[str, list[Example]]:
        return {name: self.split(name) for name in SPLITS}


# ----------------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------------

def generate(config: GenConfig) -> DatasetBundle:
    config.validate()
    rng = np.random.default_rng(config.seed)
    L = config.signature_length
    n_docs = config.num_documents

    order = rng.permutation(n_docs)
    counts = [round(f * n_docs) for f in
              (config.fine_frac, config.coarse_frac, config.dev_frac, config.test_frac)]
    split_of = {}
    start = 0
    for name, c in zip(SPLITS, counts):
        for d in order[start:start + c]:
            split_of[int(d)] = name
        start += c

    out = {name: [] for name in SPLITS}
    for d in range(n_docs):
        base = [rng.integers(0, config.num_filler,
                             size=rng.integers(config.min_tokens, config.max_tokens + 1))
                for _ in range(config.paragraphs_per_doc)]
        for q in range(config.questions_per_doc):
            ex = _plant_question(config, rng, base, f"d{d:04d}-q{q}", L)
            name = split_of.get(d)
            if name is None:
                continue
            if name == "coarse_train":
                ex = dataclasses.replace(ex, label=coarsen(ex.hidden_fine))
            else:
                ex = dataclasses.replace(ex, hidden_fine=None)
            out[name].append(ex)
    return DatasetBundle(**out, gen_config=config)


def _plant_question(config: GenConfig, rng, base, ident: str, L: int) -> Example:
    paragraphs = [p.copy() for p in base]
    M = len(paragraphs)
    signature = np.array([rng.integers(*config.key_block(j)) for j in range(L)], dtype=np.int64)
    noise = rng.integers(0, config.num_filler, size=config.question_noise_tokens)
    question = np.concatenate([signature, noise])

    a_p = int(rng.integers(M))
    n = len(paragraphs[a_p])
    pos = int(rng.integers(0, n - L + 1))
    paragraphs[a_p][pos:pos + L] = signature

    if rng.random() < config.distractor_rate and M > 1 and L > 1:
        others = [p for p in range(M) if p != a_p]
        dp = others[int(rng.integers(len(others)))]
        k = int(rng.integers(1, L))
        dpos = int(rng.integers(0, len(paragraphs[dp]) - k + 1))
        paragraphs[dp][dpos:dpos + k] = signature[:k]
    if rng.random() < config.noise_rate:
        j = int(rng.integers(L))
        paragraphs[a_p][pos + j] = rng.integers(0, config.num_filler)

    gold = FineLabel(a_p, pos, pos + L - 1)
    doc = Document(tuple(tuple(int(t) for t in p) for p in paragraphs))
    return Example(ident, tuple(int(t) for t in question), doc, gold, hidden_fine=gold)


def exact_match_baseline(example: Example, signature_length: int) -> FineLabel:
    """First contiguous occurrence of the question signature, else (0, 0, 0)."""
    sig = list(example.question[:signature_length])
    for p, para in enumerate(example.document.paragraphs):
        for s in range(len(para) - len(sig) + 1):
            if list(para[s:s + len(sig)]) == sig:
                return FineLabel(p, s, s + len(sig) - 1)
    return FineLabel(0, 0, 0)


def check_invariants(bundle: DatasetBundle, max_span_len: int = 10) -> None:
    """Raise AssertionError if a bundle breaks the corpus invariants."""
    seen: dict[str, str] = {}
    V = bundle.gen_config.vocab_size
    for name, examples in bundle.splits().items():
        for ex in examples:
            owner = seen.setdefault(ex.doc_id, name)
            assert owner == name, f"document {ex.doc_id} in {owner} and {name}"
            assert all(0 <= t < V for p in ex.document.paragraphs for t in p)
            assert all(0 <= t < V for t in ex.question)
            if name == "coarse_train":
                assert isinstance(ex.label, CoarseLabel) and ex.hidden_fine is not None
                assert coarsen(ex.hidden_fine) == ex.label
                if ex.hidden_fine.length <= max_span_len:
                    assert ex.hidden_fine in candidate_set(ex.document, ex.label, max_span_len)
            else:
                assert isinstance(ex.label, FineLabel)
            y = ex.label if ex.is_fine else ex.hidden_fine
            assert 0 <= y.a_start <= y.a_end < ex.document.lengths[y.a_p]


# ----------------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def example_to_record(ex: Example) -> dict:
    rec = {
        "id": ex.id,
        "question": list(ex.question),
        "paragraphs": [list(p) for p in ex.document.paragraphs],
        "label_kind": "fine" if ex.is_fine else "coarse",
        "a_p": ex.label.a_p,
    }
    if ex.is_fine:
        rec["a_start"], rec["a_end"] = ex.label.a_start, ex.label.a_end
    if ex.hidden_fine is not None:
        h = ex.hidden_fine
        rec["hidden_fine"] = [h.a_p, h.a_start, h.a_end]
    return rec


def example_from_record(rec: dict) -> Example:
    kind = rec["label_kind"]
    if kind == "fine":
        label = FineLabel(int(rec["a_p"]), int(rec["a_start"]), int(rec["a_end"]))
    elif kind == "coarse":
        label = CoarseLabel(int(rec["a_p"]))
    else:
        raise ValueError(f"unknown label_kind {kind!r}")
    hidden = rec.get("hidden_fine")
    return Example(
        id=str(rec["id"]),
        question=tuple(int(t) for t in rec["question"]),
        document=Document(tuple(tuple(int(t) for t in p) for p in rec["paragraphs"])),
        label=label,
        hidden_fine=FineLabel(*map(int, hidden)) if hidden is not None else None,
    )


def save_split(examples: list[Example], path, gen_config: GenConfig) -> None:
    lines = [_dumps({"schema_version": SCHEMA_VERSION,
                     "gen_config": dataclasses.asdict(gen_config)})]
    lines += [_dumps(example_to_record(ex)) for ex in examples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_split(path) -> tuple[list[Example], GenConfig]:
    path = Path(path)
    examples = []
    config = None
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            try:
                rec = json.loads(line)
                if line_no == 1:
                    if rec.get("schema_version") != SCHEMA_VERSION:
                        raise ValueError(f"unsupported schema_version {rec.get('schema_version')!r}")
                    config = GenConfig(**rec["gen_config"])
                else:
                    examples.append(example_from_record(rec))
            except (ValueError, KeyError, TypeError) as err:
                raise DatasetParseError(path, line_no, str(err)) from err
    if config is None:
        raise DatasetParseError(path, 1, "missing header line")
    return examples, config


def save(bundle: DatasetBundle, directory) -> dict[str, str]:
    """Write one ``<split>.jsonl`` per split; returns sha256 digests by file name."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name, examples in bundle.splits().items():
        target = directory / f"{name}.jsonl"
        save_split(examples, target, bundle.gen_config)
        digests[target.name] = hashlib.sha256(target.read_bytes()).hexdigest()
    return digests


def load(directory) -> DatasetBundle:
    directory = Path(directory)
    parts = {}
    config = None
    for name in SPLITS:
        parts[name], config = load_split(directory / f"{name}.jsonl")
    return DatasetBundle(**parts, gen_config=config)
