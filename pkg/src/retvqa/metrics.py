"""Retrieval and answer-quality metrics plus the error taxonomy."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .curation import QARecord, normalize_answer
from .numerics import ContractError

ERROR_LABELS = ("correct", "incorrect-retrieval", "partial-retrieval", "incorrect-reasoning")


def retrieval_prf1(retrieved_ids: Iterable[str], gold_ids: Iterable[str]) -> tuple[float, float, float]:
    retrieved, gold = set(retrieved_ids), set(gold_ids)
    if not gold:
        raise ContractError("gold image set is empty")
    hit = len(retrieved & gold)
    p = hit / len(retrieved) if retrieved else 0.0
    r = hit / len(gold)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def _contains(tokens: list[str], sub: list[str]) -> bool:
    n = len(sub)
    return any(tokens[i:i + n] == sub for i in range(len(tokens) - n + 1))


def accuracy(generated: str, record: QARecord) -> int:
    """1 when the gold answer is present in the generated text.

    Binary questions additionally require the opposite polarity to be absent.
    """
    tokens = normalize_answer(generated).split()
    gold = normalize_answer(record.precise_answer)
    if record.answer_type == "binary" and gold in ("yes", "no"):
        other = "no" if gold == "yes" else "yes"
        return int(gold in tokens and other not in tokens)
    return int(_contains(tokens, gold.split()))


def _bigrams(text: str) -> Counter:
    toks = ["<s>"] + normalize_answer(text).split() + ["</s>"]
    return Counter(zip(toks, toks[1:]))


def fluency_proxy(generated: str, reference: str) -> float:
    """Add-one smoothed bigram F-score (the fluency-proxy).

    With boundary markers, m clipped bigram matches, and g and r bigrams on
    each side, the score is (2m + 1) / (g + r + 1).
    """
    g_norm, r_norm = normalize_answer(generated), normalize_answer(reference)
    if not g_norm or not r_norm:
        return float(g_norm == r_norm)
    g, r = _bigrams(generated), _bigrams(reference)
    matched = sum((g & r).values())
    return (2 * matched + 1) / (sum(g.values()) + sum(r.values()) + 1)


def f_times_a(pairs: Iterable[tuple[float, float]]) -> float:
    """Mean of per-example A*F over (accuracy, fluency) pairs."""
    pairs = list(pairs)
    if not pairs:
        return 0.0
    return float(sum(a * f for a, f in pairs) / len(pairs))


def classify_error(record: QARecord, retrieved_ids: Iterable[str], accuracy_bit: int) -> str:
    if accuracy_bit:
        return "correct"
    gold, got = set(record.relevant_ids), set(retrieved_ids)
    hit = len(gold & got)
    if hit == 0:
        return "incorrect-retrieval"
    if hit < len(gold):
        return "partial-retrieval"
    return "incorrect-reasoning"


@dataclass
class Example:
    qid: str
    category: str
    answer_type: str
    accuracy: int
    fluency: float

    @property
    def fxa(self) -> float:
        return self.accuracy * self.fluency


def _summary(rows: Sequence[Example]) -> dict:
    n = len(rows)
    return {
        "support": n,
        "accuracy": sum(r.accuracy for r in rows) / n,
        "fluency": sum(r.fluency for r in rows) / n,
        "fxa": sum(r.fxa for r in rows) / n,
    }


def breakdown(examples: Sequence[Example]) -> dict:
    """Per-category, per-answer-type and per-cell tables; empty cells are omitted."""
    groups: dict[str, dict] = {"category": defaultdict(list), "answer_type": defaultdict(list),
                               "cell": defaultdict(list)}
    for e in examples:
        groups["category"][e.category].append(e)
        groups["answer_type"][e.answer_type].append(e)
        groups["cell"][f"{e.category}/{e.answer_type}"].append(e)
    return {name: {k: _summary(v) for k, v in sorted(g.items())} for name, g in groups.items()}


def score_answers(records: Sequence[QARecord], answers: Mapping[str, str]) -> list[Example]:
    out = []
    for r in records:
        gen = answers[r.qid]
        out.append(Example(r.qid, r.category, r.answer_type, accuracy(gen, r),
                           fluency_proxy(gen, r.full_answer)))
    return out


def evaluate(records: Sequence[QARecord], answers: Mapping[str, str] | None = None,
             retrieved: Mapping[str, Sequence[str]] | None = None) -> dict:
    """Assemble the report: retrieval P/R/F1, QA metrics, tables and error counts."""
    report: dict = {"n": len(records), "fluency_metric": "fluency-proxy"}
    if retrieved is not None:
        prf = [retrieval_prf1(retrieved[r.qid], r.relevant_ids) for r in records]
        n = max(len(prf), 1)
        report["retrieval"] = {k: sum(x[i] for x in prf) / n
                               for i, k in enumerate(("precision", "recall", "f1"))}
    if answers is not None:
        ex = score_answers(records, answers)
        overall = _summary(ex) if ex else {"support": 0, "accuracy": 0.0, "fluency": 0.0, "fxa": 0.0}
        report["qa"] = {k: overall[k] for k in ("accuracy", "fluency", "fxa")}
        report["tables"] = breakdown(ex)
        if retrieved is not None:
            labels = Counter(classify_error(r, retrieved[r.qid], e.accuracy)
                             for r, e in zip(records, ex))
            report["errors"] = {k: labels.get(k, 0) for k in ERROR_LABELS}
    return report


def format_report(report: dict, title: str = "") -> str:
    lines = [title] if title else []
    if "retrieval" in report:
        r = report["retrieval"]
        lines.append(f"retrieval  P={r['precision']:.4f}  R={r['recall']:.4f}  F1={r['f1']:.4f}")
    if "qa" in report:
        q = report["qa"]
        lines.append(f"qa  Acc={q['accuracy']:.4f}  F(proxy)={q['fluency']:.4f}  FxA={q['fxa']:.4f}")
        for name in ("category", "answer_type"):
            lines.append(f"  by {name}:")
            for k, row in report["tables"][name].items():
                lines.append(f"    {k:<20} n={row['support']:<5} Acc={row['accuracy']:.3f} "
                             f"F={row['fluency']:.3f} FxA={row['fxa']:.3f}")
    if "errors" in report:
        lines.append("  errors: " + ", ".join(f"{k}={v}" for k, v in report["errors"].items()))
    return "\n".join(lines)
