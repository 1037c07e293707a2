"""Reference baselines: popularity, question-only and aggregate VQA.

The question-only baseline is the generator with no image blocks
(``generator.MIBart`` in ``"question"`` mode); this module holds the other
three.
"""

from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .curation import QARecord
from .numerics import Adam, ContractError, Tensor, cross_entropy_logits, gelu, no_grad, warmup_linear_lr
from .relevance import FeatureTable, RelevanceConfig, RelevanceModel, make_batch
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)


def _most_common(answers: Sequence[str]) -> str:
    counts = Counter(answers)
    return min(counts, key=lambda a: (-counts[a], a))


def global_popularity(train: Sequence[QARecord]) -> str:
    """Most frequent precise answer in ``train``; ties go to the lexicographically first."""
    if not train:
        raise ContractError("global popularity needs at least one training record")
    return _most_common([r.precise_answer for r in train])


def per_category_popularity(train: Sequence[QARecord]) -> dict[str, str]:
    if not train:
        raise ContractError("per-category popularity needs at least one training record")
    by_cat: dict[str, list[str]] = {}
    for r in train:
        by_cat.setdefault(r.category, []).append(r.precise_answer)
    return {c: _most_common(a) for c, a in sorted(by_cat.items())}


@dataclass
class PopularityBaseline:
    global_answer: str
    by_category: dict[str, str]

    @classmethod
    def fit(cls, train: Sequence[QARecord]) -> "PopularityBaseline":
        return cls(global_popularity(train), per_category_popularity(train))

    def answer(self, record: QARecord, per_category: bool = True) -> str:
        if per_category:
            return self.by_category.get(record.category, self.global_answer)
        return self.global_answer

    def predict(self, records: Sequence[QARecord], per_category: bool = True) -> dict[str, str]:
        return {r.qid: self.answer(r, per_category) for r in records}

    def to_json(self) -> dict:
        return {"global": self.global_answer, "by_category": self.by_category}

    @classmethod
    def from_json(cls, d: Mapping) -> "PopularityBaseline":
        return cls(d["global"], dict(d["by_category"]))


class AnswerVocabulary:
    """The ``size`` most frequent precise answers, ordered by count then text."""

    def __init__(self, answers: Sequence[str]):
        self.answers = list(answers)
        self.index = {a: i for i, a in enumerate(self.answers)}

    @classmethod
    def build(cls, train: Sequence[QARecord], size: int = 1000) -> "AnswerVocabulary":
        counts = Counter(r.precise_answer for r in train)
        ranked = sorted(counts, key=lambda a: (-counts[a], a))
        return cls(ranked[:size])

    def __len__(self) -> int:
        return len(self.answers)

    def __contains__(self, answer: str) -> bool:
        return answer in self.index


def render_answer(answer: str, question: str) -> str:
    """Prepend ``answer`` to the question minus its first word and question mark."""
    rest = question.strip().rstrip("?").strip().split()[1:]
    return " ".join([answer] + rest)


class AggregateVQA(nn.Module):
    """Per-image CLS states, concatenated over K slots, then an MLP classifier."""

    def __init__(self, config: RelevanceConfig, n_classes: int, K: int = 2,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng([config.seed, 0xA66])
        self.K = K
        self.backbone = RelevanceModel(config, rng)
        self.hidden = nn.Linear(K * config.d, 2 * config.d, rng)
        self.out = nn.Linear(2 * config.d, n_classes, rng)

    def logits(self, text_ids: Sequence[Sequence[int]], rows: np.ndarray, slot_valid: np.ndarray,
               table: FeatureTable) -> Tensor:
        """``rows`` and ``slot_valid`` are (B, K); invalid slots become zero vectors."""
        B, K = rows.shape
        flat = rows.reshape(-1)
        batch = make_batch([t for t in text_ids for _ in range(K)], table.reg[flat],
                           table.bbox[flat], table.valid[flat])
        cls = self.backbone.encode(batch)[:, 0, :]
        d = cls.shape[-1]
        keep = np.broadcast_to(slot_valid.reshape(-1, 1), (B * K, d)).astype(cls.dtype)
        joint = (cls * keep).reshape(B, K * d)
        return self.out(gelu(self.hidden(joint)))


def _slots(ids_lists: Sequence[Sequence[str]], table: FeatureTable, K: int):
    rows = np.zeros((len(ids_lists), K), np.int64)
    valid = np.zeros((len(ids_lists), K), bool)
    for i, ids in enumerate(ids_lists):
        ids = list(ids)[:K]
        rows[i, :len(ids)] = table.rows(ids)
        valid[i, :len(ids)] = True
    return rows, valid


@dataclass
class VQATrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    warmup_fraction: float = 0.05
    seed: int = 0
    max_minutes: float = 10.0


@dataclass
class VQAResult:
    history: list[dict] = field(default_factory=list)
    skipped: int = 0  # gold answer outside the vocabulary
    steps: int = 0


class AggregateVQABaseline:
    def __init__(self, model: AggregateVQA, vocab: AnswerVocabulary, tok: Tokenizer,
                 table: FeatureTable):
        self.model, self.vocab, self.tok, self.table = model, vocab, tok, table

    def _text(self, records: Sequence[QARecord]) -> list[list[int]]:
        return [self.model.backbone.text_ids(self.tok.encode(r.question)) for r in records]

    def train(self, train: Sequence[QARecord], config: VQATrainConfig,
              contexts: Mapping[str, Sequence[str]] | None = None) -> VQAResult:
        usable = [r for r in train if r.precise_answer in self.vocab]
        result = VQAResult(skipped=len(train) - len(usable))
        if result.skipped:
            log.info("aggregate VQA: %d records have answers outside the vocabulary", result.skipped)
        if not usable:
            return result
        opt = Adam(self.model.parameters(), lr=config.lr)
        total = config.epochs * ((len(usable) + config.batch_size - 1) // config.batch_size)
        start, step = time.perf_counter(), 0
        for epoch in range(config.epochs):
            rng = np.random.default_rng([config.seed, 0xA66, epoch])
            order = rng.permutation(len(usable))
            losses = []
            for s in range(0, len(order), config.batch_size):
                part = [usable[int(i)] for i in order[s:s + config.batch_size]]
                ctx = [contexts[r.qid] if contexts is not None else r.relevant_ids for r in part]
                rows, valid = _slots(ctx, self.table, self.model.K)
                target = np.array([self.vocab.index[r.precise_answer] for r in part])
                opt.zero_grad()
                loss = cross_entropy_logits(self.model.logits(self._text(part), rows, valid, self.table),
                                            target)
                loss.backward()
                step += 1
                opt.step(warmup_linear_lr(step, total, config.lr, config.warmup_fraction))
                losses.append(float(loss.data))
            result.history.append({"epoch": epoch, "loss": float(np.mean(losses))})
            if (time.perf_counter() - start) / 60.0 > config.max_minutes:
                log.warning("aggregate VQA time budget reached after epoch %d", epoch)
                break
        result.steps = step
        return result

    def predict_classes(self, records: Sequence[QARecord],
                        contexts: Mapping[str, Sequence[str]] | None = None,
                        batch_size: int = 128) -> list[str]:
        out = []
        with no_grad():
            for s in range(0, len(records), batch_size):
                part = list(records[s:s + batch_size])
                ctx = [contexts[r.qid] if contexts is not None else r.relevant_ids for r in part]
                rows, valid = _slots(ctx, self.table, self.model.K)
                logits = self.model.logits(self._text(part), rows, valid, self.table).data
                out += [self.vocab.answers[int(i)] for i in logits.argmax(axis=-1)]
        return out

    def predict(self, records: Sequence[QARecord],
                contexts: Mapping[str, Sequence[str]] | None = None) -> dict[str, str]:
        classes = self.predict_classes(records, contexts)
        return {r.qid: render_answer(a, r.question) for r, a in zip(records, classes)}
