import pytest
from hypothesis import given
from hypothesis import strategies as st

from aptune.metrics import Metrics, SpanCounts, accuracy, bio_spans, span_counts, span_micro_f1


def test_bio_spans_basic():
    assert bio_spans(["B-PER", "I-PER", "O", "B-LOC"]) == {(0, 2, "PER"), (3, 4, "LOC")}


def test_bio_spans_adjacent_begin():
    assert bio_spans(["B-PER", "B-PER"]) == {(0, 1, "PER"), (1, 2, "PER")}


def test_bio_spans_stray_inside_opens_chunk():
    # conlleval convention for model output
    assert bio_spans(["O", "I-LOC", "I-LOC"]) == {(1, 3, "LOC")}
    assert bio_spans(["B-PER", "I-LOC"]) == {(0, 1, "PER"), (1, 2, "LOC")}


def test_half_half_half():
    gold = [["B-PER", "I-PER", "O"], ["B-LOC", "O"]]
    pred = [["B-PER", "I-PER", "O"], ["O", "B-LOC"]]
    c = span_counts(gold, pred)
    assert (c.tp, c.fp, c.fn) == (1, 1, 1)
    assert c.precision == 0.5 and c.recall == 0.5 and c.f1 == 0.5


def test_boundary_mismatch_is_fp_and_fn():
    c = span_counts([["B-PER", "I-PER"]], [["B-PER", "O"]])
    assert (c.tp, c.fp, c.fn) == (0, 1, 1)


def test_type_mismatch():
    assert span_micro_f1([["B-PER"]], [["B-LOC"]]) == 0.0


def test_no_predictions():
    c = span_counts([["B-PER", "O"]], [["O", "O"]])
    assert c.precision == 0.0 and c.recall == 0.0 and c.f1 == 0.0


def test_micro_pooling():
    # 2 tp + 1 fn in sentence 1, 1 fp in sentence 2: P=2/3, R=2/3
    gold = [["B-A", "B-B", "B-C"], ["O"]]
    pred = [["B-A", "B-B", "O"], ["B-D"]]
    assert span_micro_f1(gold, pred) == pytest.approx(2 / 3, abs=1e-15)


def test_length_mismatch():
    with pytest.raises(ValueError):
        span_counts([["O"]], [["O", "O"]])


def test_accuracy():
    assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75
    assert accuracy([], []) == 0.0


def test_metrics_main():
    assert Metrics(accuracy=0.3).main == 0.3
    assert Metrics(span_micro_f1=0.4).main == 0.4


@given(st.lists(st.sampled_from(["O", "B-X", "I-X", "B-Y", "I-Y"]), max_size=12))
def test_perfect_prediction_scores_one_or_empty(tags):
    c = span_counts([tags], [tags])
    assert c.fp == 0 and c.fn == 0
    assert c.f1 == (1.0 if c.tp else 0.0)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_is_harmonic_mean(tp, fp, fn):
    c = SpanCounts(tp, fp, fn)
    if tp:
        assert c.f1 == pytest.approx(2 * tp / (2 * tp + fp + fn))
    else:
        assert c.f1 == 0.0
