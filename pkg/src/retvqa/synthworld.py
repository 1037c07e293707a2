"""Synthetic scene graphs and their detector-style region features.

Scenes stand in for annotated photographs. ``encode_scene`` turns a scene into
the fixed-size region contract a detector would produce: ``P`` region vectors
plus bounding boxes, zero-padded beyond ``valid_count``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

ATTRIBUTES = ("size", "color", "shape", "material")


class ConfigError(ValueError):
    pass


class FeatureFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Predicate:
    name: str
    subject_kind: str  # "animal", "food", "thing" or "any"
    object_kind: str
    third: str  # "eats"
    aux: str  # "does"
    binary_q: str  # "Does {a} and {b} eat the same thing?"
    binary_yes: str
    binary_no: str


@dataclass(frozen=True)
class Ontology:
    kinds: dict[str, tuple[str, ...]]
    attributes: dict[str, tuple[str, ...]]
    predicates: tuple[Predicate, ...]
    mass_nouns: frozenset[str] = frozenset()
    irregular_plurals: dict[str, str] = field(default_factory=dict)

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(c for group in self.kinds.values() for c in group)

    def kind_of(self, cls: str) -> str:
        for kind, group in self.kinds.items():
            if cls in group:
                return kind
        raise KeyError(cls)

    def plural(self, cls: str) -> str:
        if cls in self.irregular_plurals:
            return self.irregular_plurals[cls]
        if cls in self.mass_nouns:
            return cls
        if cls.endswith(("s", "x", "ch", "sh")):
            return cls + "es"
        return cls + "s"

    def predicate(self, name: str) -> Predicate:
        for p in self.predicates:
            if p.name == name:
                return p
        raise KeyError(name)

    def validate(self) -> None:
        if not self.classes:
            raise ConfigError("ontology has no object classes")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("ontology classes must be unique")
        for name in ATTRIBUTES:
            if not self.attributes.get(name):
                raise ConfigError(f"ontology attribute {name!r} has an empty vocabulary")


DEFAULT_ONTOLOGY = Ontology(
    kinds={
        "animal": ("cow", "sheep", "horse", "dog", "cat", "bird", "elephant", "giraffe",
                   "zebra", "bear"),
        "food": ("grass", "hay", "apple", "banana", "carrot", "bread", "cake", "pizza"),
        "thing": ("car", "boat", "chair", "table", "ball", "cup", "vase", "bottle", "box",
                  "kite", "rose", "sunflower", "lamp", "clock", "bench", "umbrella", "bowl",
                  "plate", "book", "hat"),
    },
    attributes={
        "size": ("small", "medium", "large"),
        "color": ("red", "yellow", "blue", "green", "white", "black", "brown", "pink"),
        "shape": ("round", "square", "long", "flat", "curved", "pointed"),
        "material": ("metal", "wood", "plastic", "glass", "fabric", "stone"),
    },
    predicates=(
        Predicate("eats", "animal", "food", "eats", "does",
                  "Does {a} and {b} eat the same thing?",
                  "Yes, {a} and {b} eat the same thing",
                  "No, {a} and {b} do not eat the same thing"),
        Predicate("on", "thing", "thing", "is on", "is",
                  "Are {a} and {b} on the same thing?",
                  "Yes, {a} and {b} are on the same thing",
                  "No, {a} and {b} are not on the same thing"),
        Predicate("near", "any", "any", "is near", "is",
                  "Are {a} and {b} near the same thing?",
                  "Yes, {a} and {b} are near the same thing",
                  "No, {a} and {b} are not near the same thing"),
    ),
    mass_nouns=frozenset({"grass", "hay", "bread", "cake", "pizza"}),
    irregular_plurals={"sheep": "sheep", "giraffe": "giraffes", "box": "boxes"},
)


@dataclass(frozen=True)
class ObjectSpec:
    cls: str
    attributes: dict[str, str]
    count: int = 1

    def key(self) -> tuple:
        return (self.cls,) + tuple(sorted(self.attributes.items()))

    def to_json(self) -> dict:
        return {"class": self.cls, "attributes": dict(sorted(self.attributes.items())),
                "count": self.count}

    @classmethod
    def from_json(cls, d: dict) -> "ObjectSpec":
        return cls(d["class"], dict(d["attributes"]), int(d["count"]))


@dataclass(frozen=True)
class Scene:
    scene_id: str
    objects: tuple[ObjectSpec, ...]
    relations: tuple[tuple[int, str, int], ...] = ()

    def __post_init__(self):
        if not self.objects:
            raise ConfigError(f"scene {self.scene_id} has no objects")
        n = len(self.objects)
        for s, _, o in self.relations:
            if not (0 <= s < n and 0 <= o < n):
                raise ConfigError(f"scene {self.scene_id}: relation index out of range")

    @property
    def classes(self) -> set[str]:
        return {o.cls for o in self.objects}

    def find(self, cls: str) -> ObjectSpec | None:
        for o in self.objects:
            if o.cls == cls:
                return o
        return None

    @property
    def n_instances(self) -> int:
        return sum(o.count for o in self.objects)

    def to_json(self) -> dict:
        return {"scene_id": self.scene_id,
                "objects": [o.to_json() for o in self.objects],
                "relations": [list(r) for r in self.relations]}

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        return cls(d["scene_id"], tuple(ObjectSpec.from_json(o) for o in d["objects"]),
                   tuple((int(s), p, int(o)) for s, p, o in d["relations"]))


@dataclass
class SceneConfig:
    ontology: Ontology = DEFAULT_ONTOLOGY
    objects_per_scene: tuple[int, int] = (2, 4)
    relations_per_scene: tuple[int, int] = (0, 2)
    max_count: int = 3
    max_instances: int = 8


def _compatible(ontology: Ontology, pred: Predicate, subj: str, obj: str) -> bool:
    def ok(kind, cls):
        return kind == "any" or ontology.kind_of(cls) == kind
    return subj != obj and ok(pred.subject_kind, subj) and ok(pred.object_kind, obj)


def sample_scene(rng_seed, config: SceneConfig | None = None, scene_id: str | None = None) -> Scene:
    """Draw a scene: distinct classes, uniform attributes, small counts, typed relations."""
    config = config or SceneConfig()
    onto = config.ontology
    onto.validate()
    lo, hi = config.objects_per_scene
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad objects_per_scene range {config.objects_per_scene}")
    rng = np.random.default_rng(rng_seed)
    classes = onto.classes
    n = int(rng.integers(lo, hi + 1))
    n = min(n, len(classes), config.max_instances)
    chosen = rng.choice(len(classes), size=n, replace=False)
    counts = rng.integers(1, config.max_count + 1, size=n)
    # keep the instance total within the region budget
    while counts.sum() > config.max_instances:
        counts[int(np.argmax(counts))] -= 1
    objects = []
    for ci, c in zip(chosen, counts):
        attrs = {a: onto.attributes[a][int(rng.integers(len(onto.attributes[a])))]
                 for a in ATTRIBUTES}
        objects.append(ObjectSpec(classes[int(ci)], attrs, int(c)))

    candidates = [(i, p.name, j) for p in onto.predicates
                  for i in range(n) for j in range(n)
                  if _compatible(onto, p, objects[i].cls, objects[j].cls)]
    rlo, rhi = config.relations_per_scene
    n_rel = min(int(rng.integers(rlo, rhi + 1)), len(candidates))
    relations = []
    if n_rel:
        picks = rng.choice(len(candidates), size=n_rel, replace=False)
        relations = sorted(candidates[int(k)] for k in picks)
    sid = scene_id if scene_id is not None else f"s{rng_seed}"
    return Scene(sid, tuple(objects), tuple(relations))


# -- region features ---------------------------------------------------------

@dataclass
class ImageFeatures:
    image_id: str
    reg: np.ndarray  # (P, d_in) float32
    bbox: np.ndarray  # (P, 4) float32, x1 y1 x2 y2 in [0, 1]
    valid_count: int

    @property
    def P(self) -> int:
        return self.reg.shape[0]

    @property
    def d_in(self) -> int:
        return self.reg.shape[1]

    def __eq__(self, other) -> bool:
        return (isinstance(other, ImageFeatures) and self.image_id == other.image_id
                and self.valid_count == other.valid_count
                and self.reg.shape == other.reg.shape
                and self.reg.tobytes() == other.reg.tobytes()
                and self.bbox.tobytes() == other.bbox.tobytes())


# Class directions are stretched relative to attribute directions, the way
# detector features separate object categories more than their attributes.
CLASS_SCALE = 3.0


class Codebook:
    """Additive factor codebook: class vector plus one vector per attribute value."""

    def __init__(self, ontology: Ontology, seed: int, d_in: int, class_scale: float = 1.0):
        if d_in < 8:
            raise ConfigError(f"d_in must be at least 8, got {d_in}")
        rng = np.random.default_rng([int(seed), 0xC0DE])
        scale = 1.0 / np.sqrt(d_in)
        self.d_in = d_in
        self.class_scale = float(class_scale)
        self.vectors: dict[tuple[str, str], np.ndarray] = {}
        for cls in ontology.classes:
            self.vectors[("class", cls)] = self.class_scale * rng.normal(0, scale, d_in)
        for name in ATTRIBUTES:
            for value in ontology.attributes[name]:
                self.vectors[(name, value)] = rng.normal(0, scale, d_in)

    def embed(self, obj: ObjectSpec) -> np.ndarray:
        v = self.vectors[("class", obj.cls)].copy()
        for name in ATTRIBUTES:
            if name in obj.attributes:
                v += self.vectors[(name, obj.attributes[name])]
        return v


_CODEBOOKS: dict[tuple, Codebook] = {}


def get_codebook(ontology: Ontology, seed: int, d_in: int, class_scale: float = 1.0) -> Codebook:
    key = (id(ontology), int(seed), int(d_in), float(class_scale))
    if key not in _CODEBOOKS:
        _CODEBOOKS[key] = Codebook(ontology, seed, d_in, class_scale)
    return _CODEBOOKS[key]


def _scene_rng(scene_id: str, codebook_seed: int) -> np.random.Generator:
    return np.random.default_rng([int(codebook_seed), zlib.crc32(scene_id.encode("utf-8"))])


def encode_scene(scene: Scene, codebook_seed: int = 0, noise_sigma: float = 0.1, P: int = 8,
                 d_in: int = 64, ontology: Ontology = DEFAULT_ONTOLOGY,
                 class_scale: float = CLASS_SCALE) -> ImageFeatures:
    """One region per object instance; instances beyond ``P`` are truncated."""
    book = get_codebook(ontology, codebook_seed, d_in, class_scale)
    rng = _scene_rng(scene.scene_id, codebook_seed)
    reg = np.zeros((P, d_in), dtype=np.float32)
    bbox = np.zeros((P, 4), dtype=np.float32)
    k = 0
    for obj in scene.objects:
        base = book.embed(obj)
        for _ in range(obj.count):
            noise = rng.normal(0.0, 1.0, d_in)
            xy = rng.uniform(0.0, 0.7, 2)
            wh = rng.uniform(0.1, 0.3, 2)
            if k >= P:
                continue
            reg[k] = base + noise_sigma * noise
            x2, y2 = np.minimum(xy + wh, 1.0)
            bbox[k] = (xy[0], xy[1], x2, y2)
            k += 1
    return ImageFeatures(scene.scene_id, reg, bbox, k)


NUMBER_WORDS = {2: "two", 3: "three", 4: "four", 5: "five", 6: "six", 7: "seven", 8: "eight"}


def describe_object(obj: ObjectSpec, ontology: Ontology = DEFAULT_ONTOLOGY,
                    attributes: Sequence[str] = ATTRIBUTES) -> str:
    """Noun phrase for an object, with adjectives for the listed attributes."""
    words = [obj.attributes[a] for a in ATTRIBUTES if a in attributes and a in obj.attributes]
    if obj.count == 1:
        words.append(obj.cls)
        if obj.cls in ontology.mass_nouns:
            return " ".join(["some", *words])
        return " ".join([_indefinite(words[0]), *words])
    words.append(ontology.plural(obj.cls))
    return " ".join([NUMBER_WORDS.get(obj.count, str(obj.count)), *words])


def describe_relation(scene: Scene, relation: tuple[int, str, int],
                      ontology: Ontology = DEFAULT_ONTOLOGY) -> str:
    s, p, o = relation
    pred = ontology.predicate(p)
    return (f"{_with_article(scene.objects[s].cls, ontology)} {pred.third} "
            f"{_with_article(scene.objects[o].cls, ontology)}")


def caption_scene(scene: Scene, ontology: Ontology = DEFAULT_ONTOLOGY) -> list[str]:
    """Declarative sentences: one per object, one per relation."""
    out = [describe_object(obj, ontology) for obj in scene.objects]
    out += [describe_relation(scene, r, ontology) for r in scene.relations]
    return out


def caption_text(scene: Scene, ontology: Ontology = DEFAULT_ONTOLOGY) -> str:
    """All caption sentences of a scene as one string."""
    return " . ".join(caption_scene(scene, ontology))


def caption_vocabulary(ontology: Ontology = DEFAULT_ONTOLOGY) -> list[str]:
    """Every word a caption can use."""
    words = {"a", "an", "some", ".", *NUMBER_WORDS.values()}
    for cls in ontology.classes:
        words |= {cls, ontology.plural(cls)}
    for values in ontology.attributes.values():
        words |= set(values)
    for p in ontology.predicates:
        words |= set(p.third.split())
    return sorted(words)


def _indefinite(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def _with_article(cls: str, ontology: Ontology) -> str:
    return cls if cls in ontology.mass_nouns else f"{_indefinite(cls)} {cls}"


# -- feature files -----------------------------------------------------------

FEATURE_MAGIC = b"RQFT1"


def _pack_features(f: ImageFeatures) -> bytes:
    raw_id = f.image_id.encode("utf-8")
    head = FEATURE_MAGIC + struct.pack("<I", len(raw_id)) + raw_id
    head += struct.pack("<III", f.P, f.d_in, f.valid_count)
    body = np.concatenate([f.reg.astype("<f4"), f.bbox.astype("<f4")], axis=1)
    return head + np.ascontiguousarray(body).tobytes()


def save_features(path, features: ImageFeatures | Sequence[ImageFeatures]) -> None:
    """Write one record, or several records back to back."""
    items = [features] if isinstance(features, ImageFeatures) else list(features)
    Path(path).write_bytes(b"".join(_pack_features(f) for f in items))


def _unpack(buf: bytes, pos: int, where: str) -> tuple[ImageFeatures, int]:
    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FeatureFormatError(f"{where}: truncated record at byte offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    start = pos
    if take(len(FEATURE_MAGIC)) != FEATURE_MAGIC:
        raise FeatureFormatError(f"{where}: bad magic at byte offset {start}")
    (n_id,) = struct.unpack("<I", take(4))
    image_id = take(n_id).decode("utf-8")
    P, d_in, valid = struct.unpack("<III", take(12))
    if valid > P:
        raise FeatureFormatError(f"{where}: valid_count {valid} > P {P} at byte offset {pos - 4}")
    body_at = pos
    body = take(P * (d_in + 4) * 4)
    if len(body) != P * (d_in + 4) * 4:
        raise FeatureFormatError(f"{where}: region payload size mismatch at byte offset {body_at}")
    arr = np.frombuffer(body, dtype="<f4").reshape(P, d_in + 4).astype(np.float32)
    return ImageFeatures(image_id, arr[:, :d_in].copy(), arr[:, d_in:].copy(), valid), pos


def iter_features(path) -> Iterator[ImageFeatures]:
    buf = Path(path).read_bytes()
    pos = 0
    while pos < len(buf):
        feats, pos = _unpack(buf, pos, str(path))
        yield feats


def load_feature_bank(path) -> dict[str, ImageFeatures]:
    return {f.image_id: f for f in iter_features(path)}


def load_features(path) -> ImageFeatures:
    """Load a single-record feature file."""
    buf = Path(path).read_bytes()
    feats, pos = _unpack(buf, 0, str(path))
    if pos != len(buf):
        raise FeatureFormatError(f"{path}: {len(buf) - pos} trailing bytes at byte offset {pos}")
    return feats
