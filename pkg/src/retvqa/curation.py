"""Multi-image question curation over a bank of scenes.

Pairs of scenes that share a comparable slot (an attribute name or a
relation) are combined into one question whose answer needs both images.
Each question then gets a pool of distractor images chosen by the negative
rule: a distractor never contains the question's two subjects together.
"""

from __future__ import annotations

import dataclasses
import json
import re
import string
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .synthworld import (
    ATTRIBUTES,
    DEFAULT_ONTOLOGY,
    Ontology,
    Scene,
    SceneConfig,
    caption_text,
    caption_vocabulary,
    sample_scene,
)

CATEGORIES = ("color", "shape", "count", "object-attributes", "relation-based")
ANSWER_TYPES = ("binary", "open")
SPLITS = ("train", "val", "test")

# question mix per (category, answer type), thousands of questions in the source corpus
CELL_WEIGHTS = {
    ("color", "binary"): 50, ("color", "open"): 50,
    ("shape", "binary"): 49, ("shape", "open"): 50,
    ("count", "binary"): 50, ("count", "open"): 50,
    ("object-attributes", "binary"): 80,
    ("relation-based", "open"): 38,
}

CATEGORY_SLOTS = {
    "color": ("color",),
    "shape": ("shape",),
    "count": ("count",),
    "object-attributes": ("material", "size"),
}


class CompositionError(ValueError):
    pass


class CurationError(RuntimeError):
    pass


Tuple3 = tuple[str, str, str]


@dataclass
class QARecord:
    qid: str
    question: str
    category: str
    answer_type: str
    precise_answer: str
    full_answer: str
    relevant_ids: list[str]
    pool_ids: list[str]
    split: str = "train"
    # (tuple_a, tuple_b) the question was composed from; kept out of the JSONL row
    source: tuple[Tuple3, Tuple3] | None = field(default=None, repr=False, compare=False)

    FIELDS = ("qid", "question", "category", "answer_type", "precise_answer", "full_answer",
              "relevant_ids", "pool_ids", "split")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}

    @classmethod
    def from_json(cls, d: dict) -> "QARecord":
        return cls(**{k: d[k] for k in cls.FIELDS})

    @property
    def subjects(self) -> tuple[str, str]:
        if self.source is None:
            raise CurationError(f"record {self.qid} has no source tuples attached")
        return self.source[0][0], self.source[1][0]


def normalize_answer(text: str) -> str:
    text = text.lower().translate(str.maketrans("", "", string.punctuation))
    return " ".join(text.split())


# -- tuples ------------------------------------------------------------------

def extract_tuples(scene: Scene, ontology: Ontology = DEFAULT_ONTOLOGY) -> set[Tuple3]:
    """(subject, relation, object) per relation; (object, attribute, value) per attribute."""
    out: set[Tuple3] = set()
    for s, p, o in scene.relations:
        out.add((scene.objects[s].cls, p, scene.objects[o].cls))
    for obj in scene.objects:
        for name, value in obj.attributes.items():
            out.add((obj.cls, name, value))
        if obj.cls not in ontology.mass_nouns:
            out.add((obj.cls, "count", str(obj.count)))
    return out


# -- templates ---------------------------------------------------------------

@dataclass(frozen=True)
class Template:
    question: str
    answer: str  # open answer, or the "yes" answer for binary cells
    no_answer: str = ""
    precise: str = ""  # open cells only
    slots: tuple[str, ...] = ()  # restrict to these slots; empty = any


TEMPLATE_BANK: dict[tuple[str, str], list[Template]] = {
    ("color", "open"): [
        Template("What is the color of {a} and {b}?",
                 "The color of {a} and {b} is {va} and {vb}, respectively",
                 precise="{va} and {vb}"),
        Template("What color are the {a} and the {b}?",
                 "The {a} and the {b} are {va} and {vb}, respectively",
                 precise="{va} and {vb}"),
    ],
    ("color", "binary"): [
        Template("Is the {a} the same color as the {b}?",
                 "Yes, the {a} and the {b} have the same color",
                 "No, the {a} and the {b} do not have the same color"),
        Template("Do {a} and {b} have the same color?",
                 "Yes, {a} and {b} have the same color",
                 "No, {a} and {b} have different colors"),
    ],
    ("shape", "open"): [
        Template("What is the shape of {a} and {b}?",
                 "The shape of {a} and {b} is {va} and {vb}, respectively",
                 precise="{va} and {vb}"),
        Template("What shape are the {a} and the {b}?",
                 "The {a} and the {b} are {va} and {vb}, respectively",
                 precise="{va} and {vb}"),
    ],
    ("shape", "binary"): [
        Template("Is the {a} the same shape as the {b}?",
                 "Yes, the {a} and the {b} have the same shape",
                 "No, the {a} and the {b} do not have the same shape"),
        Template("Do {a} and {b} have the same shape?",
                 "Yes, {a} and {b} have the same shape",
                 "No, {a} and {b} have different shapes"),
    ],
    ("count", "open"): [
        Template("How many {a_pl} and {b_pl} are there in total?",
                 "There are {total} {a_pl} and {b_pl} in total", precise="{total}"),
        Template("What is the total number of {a_pl} and {b_pl}?",
                 "The total number of {a_pl} and {b_pl} is {total}", precise="{total}"),
    ],
    ("count", "binary"): [
        Template("Are there as many {a_pl} as {b_pl}?",
                 "Yes, there are as many {a_pl} as {b_pl}",
                 "No, there are not as many {a_pl} as {b_pl}"),
        Template("Is the number of {a_pl} the same as the number of {b_pl}?",
                 "Yes, the number of {a_pl} is the same as the number of {b_pl}",
                 "No, the number of {a_pl} is not the same as the number of {b_pl}"),
    ],
    ("object-attributes", "binary"): [
        Template("Are the {a} and the {b} made of the same material?",
                 "Yes, the {a} and the {b} are made of the same material",
                 "No, the {a} and the {b} are not made of the same material",
                 slots=("material",)),
        Template("Is the {a} made of the same material as the {b}?",
                 "Yes, the {a} is made of the same material as the {b}",
                 "No, the {a} is not made of the same material as the {b}",
                 slots=("material",)),
        Template("Are the {a} and the {b} the same size?",
                 "Yes, the {a} and the {b} are the same size",
                 "No, the {a} and the {b} are not the same size",
                 slots=("size",)),
        Template("Is the {a} the same size as the {b}?",
                 "Yes, the {a} is the same size as the {b}",
                 "No, the {a} is not the same size as the {b}",
                 slots=("size",)),
    ],
    ("relation-based", "open"): [
        Template("what else {third} the same thing as {a} {aux}?",
                 "{b} {third} the same thing as {a}", precise="{b}"),
        Template("Which other object {third} the same thing as the {a}?",
                 "The {b} {third} the same thing as the {a}", precise="{b}"),
    ],
    # composable, but not part of the emitted corpus mix
    ("relation-based", "binary"): [
        Template("{binary_q}", "{binary_yes}", "{binary_no}"),
    ],
}


def _category_of(slot: str, ontology: Ontology) -> str:
    for cat, slots in CATEGORY_SLOTS.items():
        if slot in slots:
            return cat
    if slot in {p.name for p in ontology.predicates}:
        return "relation-based"
    raise CompositionError(f"unknown slot {slot!r}")


def compose_question(tuple_a: Tuple3, tuple_b: Tuple3, category: str, answer_type: str,
                     template_bank: dict | None = None, rng: np.random.Generator | None = None,
                     scene_ids: Sequence[str] = ("", ""), qid: str = "",
                     ontology: Ontology = DEFAULT_ONTOLOGY) -> QARecord:
    """Render one question over two source tuples (from two different images)."""
    template_bank = TEMPLATE_BANK if template_bank is None else template_bank
    rng = rng if rng is not None else np.random.default_rng(0)
    sa, slot, va = tuple_a
    sb, slot_b, vb = tuple_b
    if slot != slot_b:
        raise CompositionError(f"tuples do not share a slot: {tuple_a} vs {tuple_b}")
    if sa == sb:
        raise CompositionError(f"tuples have the same subject {sa!r}")
    if _category_of(slot, ontology) != category:
        raise CompositionError(f"slot {slot!r} does not belong to category {category!r}")
    cell = (category, answer_type)
    options = [t for t in template_bank.get(cell, []) if not t.slots or slot in t.slots]
    if not options:
        raise CompositionError(f"no template for {cell} and slot {slot!r}")
    same = va == vb
    if category == "relation-based" and answer_type == "open" and not same:
        raise CompositionError(f"relation tuples {tuple_a} and {tuple_b} have different objects")

    ctx = {"a": sa, "b": sb, "va": va, "vb": vb,
           "a_pl": ontology.plural(sa), "b_pl": ontology.plural(sb)}
    if category == "count":
        ctx["total"] = str(int(va) + int(vb))
    if category == "relation-based":
        pred = ontology.predicate(slot)
        ctx.update(third=pred.third, aux=pred.aux,
                   binary_q=pred.binary_q.format(a=sa, b=sb),
                   binary_yes=pred.binary_yes.format(a=sa, b=sb),
                   binary_no=pred.binary_no.format(a=sa, b=sb))

    t = options[int(rng.integers(len(options)))]
    question = t.question.format(**ctx)
    if answer_type == "binary":
        full = (t.answer if same else t.no_answer).format(**ctx)
        precise = "yes" if same else "no"
    else:
        full = t.answer.format(**ctx)
        precise = normalize_answer(t.precise.format(**ctx))
    ids = [scene_ids[0], scene_ids[1]]
    return QARecord(qid=qid, question=question, category=category, answer_type=answer_type,
                    precise_answer=precise, full_answer=full,
                    relevant_ids=ids, pool_ids=list(ids), source=(tuple(tuple_a), tuple(tuple_b)))


# -- negatives ---------------------------------------------------------------

class SceneIndex:
    """Scenes by id plus an inverted index from class to scene ids."""

    def __init__(self, scenes: Iterable[Scene]):
        self.scenes: dict[str, Scene] = {s.scene_id: s for s in scenes}
        self.ids: list[str] = sorted(self.scenes)
        self.with_class: dict[str, set[str]] = defaultdict(set)
        for s in self.scenes.values():
            for c in s.classes:
                self.with_class[c].add(s.scene_id)

    def __getitem__(self, scene_id: str) -> Scene:
        return self.scenes[scene_id]

    def __contains__(self, scene_id: str) -> bool:
        return scene_id in self.scenes

    def __len__(self) -> int:
        return len(self.scenes)


def is_valid_negative(scene: Scene, subject: str, obj: str) -> bool:
    """Negative iff the two entities are not both present."""
    classes = scene.classes
    return not (subject in classes and obj in classes)


def question_entities(record: QARecord) -> set[str]:
    """Every class the question is built from (both subjects, plus a shared relation object)."""
    (sa, slot, va), (sb, _, vb) = record.source
    ents = {sa, sb}
    if record.category == "relation-based":
        ents |= {va, vb}
    return ents


def select_negatives(record: QARecord, scene_index: SceneIndex, n_negatives: int,
                     rng: np.random.Generator, hard_fraction: float = 0.0) -> list[str]:
    """Build the shuffled image pool: relevant images plus ``n_negatives`` distractors.

    Every distractor satisfies the negative rule. A ``hard_fraction`` of the
    slots prefer distractors that share a class with the question; the rest
    share none.
    """
    sa, sb = record.subjects
    relevant = set(record.relevant_ids)
    both = scene_index.with_class.get(sa, set()) & scene_index.with_class.get(sb, set())
    touched = set().union(*(scene_index.with_class.get(e, set()) for e in question_entities(record)))
    easy = [i for i in scene_index.ids if i not in relevant and i not in touched]
    hard = [i for i in scene_index.ids if i not in relevant and i in touched and i not in both]
    if len(easy) + len(hard) < n_negatives:
        raise CurationError(
            f"record {record.qid}: only {len(easy) + len(hard)} eligible negatives, "
            f"need {n_negatives}")
    n_hard = int(rng.binomial(n_negatives, hard_fraction)) if hard_fraction > 0 else 0
    n_hard = min(n_hard, len(hard))
    n_easy = n_negatives - n_hard
    if n_easy > len(easy):
        n_easy, n_hard = len(easy), n_negatives - len(easy)
    chosen = [easy[int(k)] for k in rng.choice(len(easy), size=n_easy, replace=False)]
    if n_hard:
        chosen += [hard[int(k)] for k in rng.choice(len(hard), size=n_hard, replace=False)]
    pool = list(record.relevant_ids) + chosen
    order = rng.permutation(len(pool))
    return [pool[int(k)] for k in order]


# -- splits and statistics ---------------------------------------------------

def split_dataset(records: Sequence[QARecord], fractions=(0.8, 0.1, 0.1),
                  seed: int = 0) -> list[QARecord]:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be three non-negatives summing to 1: {fractions}")
    n = len(records)
    order = np.random.default_rng([int(seed), 0x5917]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    tags = np.empty(n, dtype=object)
    tags[order[:n_train]] = "train"
    tags[order[n_train:n_train + n_val]] = "val"
    tags[order[n_train + n_val:]] = "test"
    return [dataclasses.replace(r, split=str(tags[i])) for i, r in enumerate(records)]


def _words(text: str) -> int:
    return len(re.findall(r"\w+", text))


def dataset_stats(records: Sequence[QARecord]) -> dict:
    n = len(records)
    table = {c: {a: 0 for a in ANSWER_TYPES} for c in CATEGORIES}
    for r in records:
        table[r.category][r.answer_type] += 1

    def avg(values):
        values = list(values)
        return float(sum(values) / len(values)) if values else 0.0

    answers = Counter(r.precise_answer for r in records)
    return {
        "n_questions": n,
        "category_answer_type": table,
        "category_totals": {c: sum(table[c].values()) for c in CATEGORIES},
        "answer_type_totals": {a: sum(table[c][a] for c in CATEGORIES) for a in ANSWER_TYPES},
        "splits": {s: sum(r.split == s for r in records) for s in SPLITS},
        "avg_question_words": avg(_words(r.question) for r in records),
        "avg_answer_words": avg(_words(r.full_answer) for r in records),
        "distinct_answers": len(answers),
        "avg_relevant_per_question": avg(len(r.relevant_ids) for r in records),
        "avg_irrelevant_per_question": avg(len(r.pool_ids) - len(r.relevant_ids) for r in records),
    }


# -- validation --------------------------------------------------------------

def validate_record(r: QARecord, scene_index: SceneIndex | None = None) -> list[str]:
    problems = []
    if r.category not in CATEGORIES:
        problems.append(f"unknown category {r.category!r}")
    if r.answer_type not in ANSWER_TYPES:
        problems.append(f"unknown answer type {r.answer_type!r}")
    if r.split not in SPLITS:
        problems.append(f"unknown split {r.split!r}")
    if len(set(r.relevant_ids)) < 2:
        problems.append("fewer than two relevant images")
    if not set(r.relevant_ids) <= set(r.pool_ids):
        problems.append("relevant images missing from pool")
    if len(set(r.pool_ids)) != len(r.pool_ids):
        problems.append("duplicate pool ids")
    if r.answer_type == "binary" and r.precise_answer not in ("yes", "no"):
        problems.append(f"binary precise answer {r.precise_answer!r}")
    full = normalize_answer(r.full_answer).split()
    precise = r.precise_answer.split()
    if not any(full[i:i + len(precise)] == precise for i in range(len(full) - len(precise) + 1)):
        problems.append("full answer does not contain the precise answer")
    if scene_index is not None and r.source is not None:
        sa, sb = r.subjects
        for i in r.pool_ids:
            if i in r.relevant_ids:
                continue
            if i not in scene_index:
                problems.append(f"pool image {i} unknown")
            elif not is_valid_negative(scene_index[i], sa, sb):
                problems.append(f"pool image {i} violates the negative rule")
    return problems


# -- corpus generation -------------------------------------------------------

@dataclass
class CurationConfig:
    seed: int = 0
    n_scenes: int = 1500
    n_questions: int = 2000
    pool_size: int = 10
    hard_fraction: float = 0.0
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    scene: SceneConfig = field(default_factory=SceneConfig)
    cell_weights: dict = field(default_factory=lambda: dict(CELL_WEIGHTS))
    max_attempts: int = 200


def generate_scenes(config: CurationConfig) -> list[Scene]:
    return [sample_scene([config.seed, 0x5CE, i], config.scene, scene_id=f"img{i:05d}")
            for i in range(config.n_scenes)]


class _TupleIndex:
    """(slot, value) -> [(scene_id, subject)] and slot -> [(scene_id, subject, value)]."""

    def __init__(self, scene_index: SceneIndex, ontology: Ontology):
        self.by_slot: dict[str, list[tuple[str, str, str]]] = defaultdict(list)
        for sid in scene_index.ids:
            for subj, slot, value in sorted(extract_tuples(scene_index[sid], ontology)):
                self.by_slot[slot].append((sid, subj, value))


def _draw_pair(rng: np.random.Generator, cell: tuple[str, str], tindex: _TupleIndex,
               scene_index: SceneIndex, ontology: Ontology, max_attempts: int):
    category, answer_type = cell
    if category == "relation-based":
        slots = [p.name for p in ontology.predicates]
    else:
        slots = list(CATEGORY_SLOTS[category])
    want_same = True if answer_type == "open" and category == "relation-based" else None
    if answer_type == "binary":
        want_same = bool(rng.random() < 0.5)
    for _ in range(max_attempts):
        slot = slots[int(rng.integers(len(slots)))]
        entries = tindex.by_slot.get(slot, [])
        if len(entries) < 2:
            continue
        ia, ib = rng.choice(len(entries), size=2, replace=False)
        (sid_a, sa, va), (sid_b, sb, vb) = entries[int(ia)], entries[int(ib)]
        if sid_a == sid_b or sa == sb:
            continue
        if sb in scene_index[sid_a].classes or sa in scene_index[sid_b].classes:
            continue
        if want_same is not None and (va == vb) != want_same:
            # steer towards the wanted polarity by searching partners with the same value
            if want_same:
                partners = [e for e in entries if e[2] == va and e[0] != sid_a and e[1] != sa
                            and e[1] not in scene_index[sid_a].classes
                            and sa not in scene_index[e[0]].classes]
                if not partners:
                    continue
                sid_b, sb, vb = partners[int(rng.integers(len(partners)))]
            else:
                continue
        return (sa, slot, va), (sb, slot, vb), (sid_a, sid_b)
    raise CurationError(f"could not draw a tuple pair for cell {cell}")


def curate(config: CurationConfig, scenes: Sequence[Scene] | None = None) -> tuple[list[Scene], list[QARecord]]:
    """Generate scenes (unless given) and a split, pooled question corpus."""
    ontology = config.scene.ontology
    scenes = list(scenes) if scenes is not None else generate_scenes(config)
    scene_index = SceneIndex(scenes)
    tindex = _TupleIndex(scene_index, ontology)
    cells = list(config.cell_weights)
    weights = np.array([config.cell_weights[c] for c in cells], dtype=float)
    weights /= weights.sum()
    records: list[QARecord] = []
    seen: set[tuple] = set()
    for i in range(config.n_questions):
        rng = np.random.default_rng([config.seed, 0x9A, i])
        qid = f"q{i:06d}"
        for _ in range(config.max_attempts):
            cell = cells[int(rng.choice(len(cells), p=weights))]
            ta, tb, sids = _draw_pair(rng, cell, tindex, scene_index, ontology, config.max_attempts)
            rec = compose_question(ta, tb, cell[0], cell[1], TEMPLATE_BANK, rng,
                                   scene_ids=sids, qid=qid, ontology=ontology)
            key = (rec.question, tuple(sorted(rec.relevant_ids)))
            if key not in seen:
                break
        else:
            raise CurationError(f"record {qid}: could not find an unused question")
        seen.add(key)
        rec.pool_ids = select_negatives(rec, scene_index, config.pool_size - 2, rng,
                                        config.hard_fraction)
        records.append(rec)
    records = split_dataset(records, config.split_fractions, config.seed)
    return scenes, records


# -- files -------------------------------------------------------------------

def dumps_record(r: QARecord) -> str:
    return json.dumps(r.to_json(), ensure_ascii=False, separators=(", ", ": "))


def write_jsonl(path, records: Iterable[QARecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(dumps_record(r) + "\n")


def read_jsonl(path) -> list[QARecord]:
    with open(path, encoding="utf-8") as fh:
        return [QARecord.from_json(json.loads(line)) for line in fh if line.strip()]


def write_sources(path, records: Iterable[QARecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps({"qid": r.qid, "source": [list(t) for t in r.source]}) + "\n")


def attach_sources(records: Sequence[QARecord], path) -> None:
    src = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            src[d["qid"]] = tuple(tuple(t) for t in d["source"])
    for r in records:
        r.source = src[r.qid]


def write_scenes(path, scenes: Iterable[Scene]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in scenes:
            fh.write(json.dumps(s.to_json(), sort_keys=False) + "\n")


def read_scenes(path) -> list[Scene]:
    with open(path, encoding="utf-8") as fh:
        return [Scene.from_json(json.loads(line)) for line in fh if line.strip()]


def corpus_texts(records: Iterable[QARecord], scenes: Iterable[Scene],
                 ontology: Ontology = DEFAULT_ONTOLOGY) -> list[str]:
    """All text the tokenizer must cover: questions, answers, captions."""
    texts = []
    for r in records:
        texts += [r.question, r.full_answer, r.precise_answer]
    for s in scenes:
        texts.append(caption_text(s, ontology))
    texts.append(" ".join(caption_vocabulary(ontology)))
    return texts


def attribute_values(ontology: Ontology = DEFAULT_ONTOLOGY) -> dict[str, tuple[str, ...]]:
    return {a: ontology.attributes[a] for a in ATTRIBUTES}
