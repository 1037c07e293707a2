import random

import pytest
from hypothesis import given, settings, strategies as st

from retvqa.curation import CurationConfig, QARecord, curate
from retvqa.metrics import (
    Example,
    accuracy,
    breakdown,
    classify_error,
    evaluate,
    f_times_a,
    fluency_proxy,
    retrieval_prf1,
)
from retvqa.numerics import ContractError


def rec(precise="yes", answer_type="binary", gold=("a", "b"), category="color"):
    return QARecord("q", "Q?", category, answer_type, precise, "", list(gold), list(gold))


def test_prf1():
    assert retrieval_prf1({"a", "c"}, {"a", "b"}) == (0.5, 0.5, 0.5)
    assert retrieval_prf1({"a", "b"}, {"a", "b"}) == (1.0, 1.0, 1.0)
    assert retrieval_prf1({"c", "d"}, {"a", "b"}) == (0.0, 0.0, 0.0)
    with pytest.raises(ContractError):
        retrieval_prf1({"a"}, set())


def test_accuracy_cases():
    assert accuracy("Yes, cow and sheep eat the same thing", rec("yes")) == 1
    assert accuracy("yes and no", rec("yes")) == 0
    assert accuracy("No.", rec("no")) == 1
    open_rec = rec("red and yellow", "open")
    assert accuracy("The color is Red and yellow, respectively", open_rec) == 1
    assert accuracy("yellow and red", open_rec) == 0
    assert accuracy("there are 15 cows", rec("5", "open")) == 0


def test_accuracy_full_answer_on_curated_records():
    _, recs = curate(CurationConfig(n_scenes=300, n_questions=300))
    assert all(accuracy(r.full_answer, r) == 1 for r in recs)


def test_fluency_identical_and_empty():
    assert fluency_proxy("a cow eats grass", "A cow eats grass.") == 1.0
    assert fluency_proxy("", "") == 1.0
    assert fluency_proxy("", "a cow") == 0.0


def test_fluency_disjoint_floor():
    # 5 tokens each side, 6 bigrams each with boundaries, no matches -> 1/13
    v = fluency_proxy("a b c d e", "f g h i j")
    assert v == pytest.approx(1 / 13)
    assert v < 0.1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from("a b c d cow".split()), max_size=8),
       st.lists(st.sampled_from("a b c d cow".split()), max_size=8))
def test_fluency_symmetric_and_bounded(x, y):
    a, b = " ".join(x), " ".join(y)
    assert fluency_proxy(a, b) == fluency_proxy(b, a)
    assert 0.0 <= fluency_proxy(a, b) <= 1.0


def test_f_times_a():
    assert f_times_a([(1, 0.8)] * 4) == pytest.approx(0.8)
    assert f_times_a([(0, 0.3), (0, 0.9)]) == 0.0
    assert f_times_a([(1, 0.6), (0, 0.9)]) == pytest.approx(0.3)


def test_classify_error():
    r = rec()
    assert classify_error(r, {"a", "c"}, 0) == "partial-retrieval"
    assert classify_error(r, {"c", "d"}, 0) == "incorrect-retrieval"
    assert classify_error(r, {"a", "b"}, 0) == "incorrect-reasoning"
    assert classify_error(r, {"c", "d"}, 1) == "correct"


def test_breakdown_single_category():
    ex = [Example(str(i), "color", "open", i % 2, 0.5) for i in range(6)]
    table = breakdown(ex)
    assert list(table["category"]) == ["color"]
    assert table["category"]["color"]["fxa"] == pytest.approx(f_times_a((e.accuracy, e.fluency) for e in ex))
    assert "shape" not in table["category"]


@pytest.mark.parametrize("seed", range(5))
def test_breakdown_weighted_recombination(seed):
    rng = random.Random(seed)
    ex = [Example(str(i), rng.choice(["color", "shape", "count"]), rng.choice(["open", "binary"]),
                  rng.randint(0, 1), rng.random()) for i in range(rng.randint(1, 60))]
    overall = f_times_a((e.accuracy, e.fluency) for e in ex)
    for name, rows in breakdown(ex).items():
        total = sum(r["support"] for r in rows.values())
        assert total == len(ex)
        recombined = sum(r["fxa"] * r["support"] for r in rows.values()) / total
        assert abs(recombined - overall) < 1e-9


def test_evaluate_report():
    r = rec()
    rep = evaluate([r], {"q": "Yes"}, {"q": ["a", "b"]})
    assert rep["retrieval"]["f1"] == 1.0
    assert rep["qa"]["accuracy"] == 1.0
    assert rep["errors"]["correct"] == 1
    for v in (rep["qa"]["accuracy"], rep["qa"]["fluency"], rep["qa"]["fxa"]):
        assert 0.0 <= v <= 1.0
