"""Accuracy and CoNLL-style span micro-F1."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


def bio_spans(tags: Sequence[str]) -> set[tuple[int, int, str]]:
    """Extract (start, end, type) spans, end exclusive.

    Follows conlleval: an I-X that does not continue an X chunk opens a new one.
    """
    spans = set()
    start, typ = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, cur = ("O", None) if tag == "O" else (tag[0], tag[2:])
        continues = prefix == "I" and cur == typ
        if start is not None and not continues:
            spans.add((start, i, typ))
            start, typ = None, None
        if prefix == "B" or (prefix == "I" and not continues):
            start, typ = i, cur
    return spans


@dataclass
class SpanCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def span_counts(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> SpanCounts:
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold sentences vs {len(pred)} predicted")
    counts = SpanCounts()
    for g, p in zip(gold, pred):
        if len(g) != len(p):
            raise ValueError("gold and predicted tag sequences differ in length")
        gs, ps = bio_spans(g), bio_spans(p)
        counts.tp += len(gs & ps)
        counts.fp += len(ps - gs)
        counts.fn += len(gs - ps)
    return counts


def span_micro_f1(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> float:
    return span_counts(gold, pred).f1


def accuracy(gold: Sequence[int], pred: Sequence[int]) -> float:
    if len(gold) != len(pred):
        raise ValueError("gold and predicted label counts differ")
    if not gold:
        return 0.0
    return sum(int(a == b) for a, b in zip(gold, pred)) / len(gold)


@dataclass
class Metrics:
    accuracy: float | None = None
    span_micro_f1: float | None = None
    precision: float | None = None
    recall: float | None = None

    @property
    def main(self) -> float:
        return self.accuracy if self.accuracy is not None else self.span_micro_f1
