"""Datasets: CoNLL column files, synthetic stand-in tasks, and k-shot sampling.

All randomness uses numpy's ``Generator`` over PCG64 seeded through
``SeedSequence``, whose bit streams are fixed across platforms.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS = "[PAD]", "[UNK]", "[CLS]"
SPECIALS = (PAD, UNK, CLS)
PAD_ID, UNK_ID, CLS_ID = 0, 1, 2

SEQUENCE, TAGGING = "sequence", "tagging"
SYNTHETIC_KINDS = ("seq_parity", "seq_keyword", "tag_span")


class ConllParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    label: int | tuple[int, ...]
    spans: tuple[tuple[int, int, str], ...] = ()

    def content_key(self) -> str:
        blob = json.dumps([list(self.tokens), self.label if isinstance(self.label, int) else list(self.label)])
        return hashlib.sha256(blob.encode()).hexdigest()


class Vocab:
    def __init__(self, words: Iterable[str] = ()):
        self.words: list[str] = list(SPECIALS)
        self.index: dict[str, int] = {w: i for i, w in enumerate(self.words)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.index:
            self.index[word] = len(self.words)
            self.words.append(word)
        return self.index[word]

    def encode(self, word: str) -> int:
        return self.index.get(word, UNK_ID)

    def __len__(self) -> int:
        return len(self.words)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.words == other.words


@dataclass
class Dataset:
    label_names: list[str]
    task_kind: str
    vocab: Vocab
    splits: dict[str, list[Example]] = field(default_factory=lambda: {"train": [], "dev": [], "test": []})
    name: str = ""

    @property
    def examples(self) -> list[Example]:
        return [ex for split in ("train", "dev", "test") for ex in self.splits.get(split, [])]

    @property
    def train(self) -> list[Example]:
        return self.splits["train"]

    @property
    def dev(self) -> list[Example]:
        return self.splits["dev"]

    @property
    def test(self) -> list[Example]:
        return self.splits["test"]

    @property
    def num_labels(self) -> int:
        return len(self.label_names)

    def fingerprint(self) -> str:
        """Content hash over vocabulary, labels and every split."""
        h = hashlib.sha256()
        h.update(json.dumps([self.task_kind, self.label_names, self.vocab.words]).encode())
        for split in sorted(self.splits):
            h.update(split.encode())
            for ex in self.splits[split]:
                h.update(ex.content_key().encode())
        return h.hexdigest()

    def with_splits(self, **splits: list[Example]) -> "Dataset":
        return Dataset(self.label_names, self.task_kind, self.vocab, dict(splits), self.name)


# ---------------------------------------------------------------------------
# BIO helpers


def _bio_parts(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    if len(tag) > 2 and tag[1] == "-" and tag[0] in "BI":
        return tag[0], tag[2:]
    raise ValueError(f"not a BIO tag: {tag!r}")


def check_bio(tags: Sequence[str]) -> int | None:
    """Index of the first tag that breaks the BIO scheme, or None."""
    prev_type = None
    for i, tag in enumerate(tags):
        prefix, typ = _bio_parts(tag)
        if prefix == "I" and typ != prev_type:
            return i
        prev_type = typ
    return None


# ---------------------------------------------------------------------------
# CoNLL


def _read_sentences(text: str) -> list[list[tuple[str, str, int]]]:
    sentences: list[list[tuple[str, str, int]]] = []
    current: list[tuple[str, str, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            if current:
                sentences.append(current)
                current = []
            continue
        cols = line.split()
        if cols[0] == "-DOCSTART-":
            continue
        if len(cols) < 2:
            raise ConllParseError(f"expected token and tag columns, got {line!r}", lineno)
        try:
            _bio_parts(cols[-1])
        except ValueError as exc:
            raise ConllParseError(str(exc), lineno) from None
        current.append((cols[0], cols[-1], lineno))
    if current:
        sentences.append(current)
    for sent in sentences:
        tags = [t for _, t, _ in sent]
        bad = check_bio(tags)
        if bad is not None:
            raise ConllParseError(f"tag {tags[bad]} does not continue a {tags[bad][2:]} span", sent[bad][2])
    return sentences


def parse_conll(
    text: str,
    vocab: Vocab | None = None,
    label_names: list[str] | None = None,
    split: str = "train",
) -> Dataset:
    """Parse token/tag columns into a tagging dataset.

    With no ``vocab``/``label_names`` both are built from this text in
    first-seen order; otherwise unknown words map to ``[UNK]`` and unknown tags
    are an error.
    """
    sentences = _read_sentences(text)
    building = vocab is None
    vocab = Vocab() if vocab is None else vocab
    labels = [] if label_names is None else list(label_names)
    label_index = {t: i for i, t in enumerate(labels)}
    examples = []
    for sent in sentences:
        ids, tag_ids = [], []
        for word, tag, lineno in sent:
            ids.append(vocab.add(word) if building else vocab.encode(word))
            if tag not in label_index:
                if label_names is not None:
                    raise ConllParseError(f"tag {tag!r} not in the training tag set", lineno)
                label_index[tag] = len(labels)
                labels.append(tag)
            tag_ids.append(label_index[tag])
        examples.append(Example(tuple(ids), tuple(tag_ids)))
    splits = {"train": [], "dev": [], "test": []}
    splits[split] = examples
    return Dataset(labels, TAGGING, vocab, splits)


def load_conll_splits(train: str, dev: str = "", test: str = "") -> Dataset:
    """Build one dataset from three CoNLL texts; vocabularies come from train."""
    base = parse_conll(train)
    out = {"train": base.train}
    for name, text in (("dev", dev), ("test", test)):
        out[name] = parse_conll(text, base.vocab, base.label_names, split=name).splits[name]
    return base.with_splits(**out)


def render_conll(dataset: Dataset, split: str = "train") -> str:
    lines = []
    for ex in dataset.splits[split]:
        for tok, tag in zip(ex.tokens, ex.label):
            lines.append(f"{dataset.vocab.words[tok]} {dataset.label_names[tag]}")
        lines.append("")
    return "\n".join(lines) + ("\n" if lines else "")


def tags_from_spans(length: int, spans: Iterable[tuple[int, int, str]]) -> list[str]:
    tags = ["O"] * length
    for start, end, typ in spans:
        tags[start] = f"B-{typ}"
        for j in range(start + 1, end):
            tags[j] = f"I-{typ}"
    return tags


# ---------------------------------------------------------------------------
# synthetic tasks

FILLER = tuple(f"w{i}" for i in range(20))
MARKER = "mark"
KEYWORDS = ("kw0", "kw1", "kw2")
ENTITY_WORDS = {
    "PER": tuple(f"per{i}" for i in range(6)),
    "LOC": tuple(f"loc{i}" for i in range(6)),
}
TAG_LABELS = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC"]
SPLIT_FRACTIONS = (0.7, 0.15)


def _split(examples: list[Example], rng: np.random.Generator) -> dict[str, list[Example]]:
    order = rng.permutation(len(examples))
    shuffled = [examples[i] for i in order]
    n_train = int(round(SPLIT_FRACTIONS[0] * len(shuffled)))
    n_dev = int(round(SPLIT_FRACTIONS[1] * len(shuffled)))
    return {
        "train": shuffled[:n_train],
        "dev": shuffled[n_train:n_train + n_dev],
        "test": shuffled[n_train + n_dev:],
    }


def gen_synthetic(
    kind: str,
    seed: int,
    n: int,
    *,
    min_len: int = 4,
    max_len: int = 10,
    keyword_rate: float = 0.5,
) -> Dataset:
    """Deterministic desk-scale task.

    * ``seq_parity``: label is the parity of the number of ``mark`` tokens.
    * ``seq_keyword``: label is 1 iff any keyword appears; ``keyword_rate`` is
      the probability an example gets keywords (0 forces an all-negative set).
    * ``tag_span``: filler sentences with planted PER/LOC spans, BIO-tagged;
      each example keeps its span records.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic task {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    vocab = Vocab(FILLER)
    filler_ids = np.array([vocab.encode(w) for w in FILLER])
    examples: list[Example] = []

    if kind == "seq_parity":
        mark = vocab.add(MARKER)
        for _ in range(n):
            length = int(rng.integers(min_len, max_len + 1))
            toks = rng.choice(filler_ids, size=length)
            count = int(rng.integers(0, min(3, length) + 1))
            pos = rng.choice(length, size=count, replace=False)
            toks[pos] = mark
            examples.append(Example(tuple(int(t) for t in toks), count % 2))
        return Dataset(["even", "odd"], SEQUENCE, vocab, _split(examples, rng), name=f"seq_parity-{seed}-{n}")

    if kind == "seq_keyword":
        kw_ids = np.array([vocab.add(w) for w in KEYWORDS])
        for _ in range(n):
            length = int(rng.integers(min_len, max_len + 1))
            toks = rng.choice(filler_ids, size=length)
            label = int(rng.random() < keyword_rate)
            if label:
                count = int(rng.integers(1, 3))
                pos = rng.choice(length, size=count, replace=False)
                toks[pos] = rng.choice(kw_ids, size=count)
            examples.append(Example(tuple(int(t) for t in toks), label))
        return Dataset(["absent", "present"], SEQUENCE, vocab, _split(examples, rng), name=f"seq_keyword-{seed}-{n}")

    ent_ids = {typ: np.array([vocab.add(w) for w in words]) for typ, words in ENTITY_WORDS.items()}
    types = sorted(ent_ids)
    label_index = {t: i for i, t in enumerate(TAG_LABELS)}
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        toks = rng.choice(filler_ids, size=length)
        spans = []
        pos = int(rng.integers(0, 2))
        while pos < length:
            span_len = int(rng.integers(1, 3))
            if pos + span_len > length:
                break
            typ = types[int(rng.integers(0, len(types)))]
            toks[pos:pos + span_len] = rng.choice(ent_ids[typ], size=span_len)
            spans.append((pos, pos + span_len, typ))
            pos += span_len + int(rng.integers(1, 4))
        tags = tags_from_spans(length, spans)
        examples.append(Example(tuple(int(t) for t in toks), tuple(label_index[t] for t in tags), tuple(spans)))
    return Dataset(list(TAG_LABELS), TAGGING, vocab, _split(examples, rng), name=f"tag_span-{seed}-{n}")


# ---------------------------------------------------------------------------
# k-shot sampling

FEWSHOT_SEEDS = (11, 21, 42, 87, 100)
FEWSHOT_K = (16, 32)


def _per_class(examples: list[Example], num_labels: int) -> dict[int, list[Example]]:
    ordered = sorted(examples, key=Example.content_key)
    groups: dict[int, list[Example]] = {c: [] for c in range(num_labels)}
    for ex in ordered:
        groups[ex.label].append(ex)
    return groups


def kshot_sample(dataset: Dataset, k: int, seed: int) -> Dataset:
    """k examples per class for train and for dev; the original dev split
    becomes the test split. Sampling is keyed on example content so input
    order does not matter."""
    if dataset.task_kind != SEQUENCE:
        raise ValueError("k-shot sampling is defined for sequence classification datasets")
    if k <= 0:
        raise ValueError("k must be positive")
    rng = np.random.default_rng(seed)
    out: dict[str, list[Example]] = {}
    for split in ("train", "dev"):
        groups = _per_class(dataset.splits[split], dataset.num_labels)
        picked: list[Example] = []
        for c, members in groups.items():
            if len(members) < k:
                raise ValueError(
                    f"class {dataset.label_names[c]!r} has only {len(members)} {split} examples, k={k} requested"
                )
            order = rng.permutation(len(members))[:k]
            picked.extend(members[i] for i in order)
        out[split] = picked
    out["test"] = list(dataset.dev)
    result = dataset.with_splits(**out)
    result.name = f"{dataset.name}-k{k}-s{seed}"
    return result


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    ids: np.ndarray  # [b, s] with [CLS] at position 0
    mask: np.ndarray  # [b, s] True on real tokens
    labels: np.ndarray  # [b] for sequence tasks, [b, s] (-1 = ignore) for tagging

    def __len__(self) -> int:
        return self.ids.shape[0]


def collate(examples: Sequence[Example], task_kind: str) -> Batch:
    """Pad a list of examples and prepend ``[CLS]`` to each."""
    if not examples:
        raise ValueError("cannot collate an empty batch")
    s = 1 + max(len(ex.tokens) for ex in examples)
    b = len(examples)
    ids = np.full((b, s), PAD_ID, dtype=np.int64)
    mask = np.zeros((b, s), dtype=bool)
    if task_kind == SEQUENCE:
        labels = np.array([ex.label for ex in examples], dtype=np.int64)
    else:
        labels = np.full((b, s), -1, dtype=np.int64)
    for r, ex in enumerate(examples):
        n = len(ex.tokens)
        ids[r, 0] = CLS_ID
        ids[r, 1:n + 1] = ex.tokens
        mask[r, :n + 1] = True
        if task_kind == TAGGING:
            labels[r, 1:n + 1] = ex.label
    return Batch(ids, mask, labels)
