"""Pairwise question-image relevance encoder.

Input layout is ``[CLS] q [SEP] [PAD ...] o_1 .. o_P``: text tokens carry
token, position and segment embeddings; regions carry a projection of their
feature vector plus a projection of their box plus the image segment
embedding. The final ``[CLS]`` state goes through an MLP with a sigmoid.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn
from .curation import QARecord
from .metrics import retrieval_prf1
from .numerics import (
    Adam,
    ContractError,
    Tensor,
    bce,
    concat,
    cross_entropy_logits,
    gelu,
    no_grad,
    sigmoid,
    warmup_linear_lr,
)
from .synthworld import (
    ATTRIBUTES,
    DEFAULT_ONTOLOGY,
    ConfigError,
    ImageFeatures,
    Ontology,
    Scene,
    describe_object,
    describe_relation,
)
from .tokenizer import SPECIALS, Tokenizer

log = logging.getLogger(__name__)


@dataclass
class RelevanceConfig:
    vocab_size: int
    d: int = 64
    n_layers: int = 3
    n_heads: int = 8
    P: int = 8
    d_in: int = 64
    m_max: int = 32
    caption_max: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")

    @property
    def max_text(self) -> int:
        return self.m_max + self.caption_max + 3


class FeatureTable:
    """Stacked region arrays for fast batch assembly."""

    def __init__(self, bank: Mapping[str, ImageFeatures] | Sequence[ImageFeatures]):
        items = list(bank.values()) if isinstance(bank, Mapping) else list(bank)
        if not items:
            raise ContractError("empty feature bank")
        self.ids = [f.image_id for f in items]
        self.index = {k: i for i, k in enumerate(self.ids)}
        self.reg = np.stack([f.reg for f in items]).astype(np.float32)
        self.bbox = np.stack([f.bbox for f in items]).astype(np.float32)
        P = self.reg.shape[1]
        counts = np.array([f.valid_count for f in items])
        self.valid = np.arange(P)[None, :] < counts[:, None]

    def rows(self, image_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.index[i] for i in image_ids], dtype=np.int64)

    @property
    def d_in(self) -> int:
        return self.reg.shape[2]


@dataclass
class PairBatch:
    text_ids: np.ndarray  # (B, T) int
    text_valid: np.ndarray  # (B, T) bool
    reg: np.ndarray  # (B, P, d_in)
    bbox: np.ndarray  # (B, P, 4)
    reg_valid: np.ndarray  # (B, P) bool

    def __len__(self) -> int:
        return self.text_ids.shape[0]


class RelevanceModel(nn.Module):
    def __init__(self, config: RelevanceConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        c = config
        self.config = c
        self.tok_emb = nn.Embedding(c.vocab_size, c.d, rng)
        self.pos_emb = nn.Embedding(c.max_text, c.d, rng)
        self.seg_emb = nn.Embedding(2, c.d, rng)
        self.reg_proj = nn.Linear(c.d_in, c.d, rng)
        self.bbox_proj = nn.Linear(4, c.d, rng)
        self.emb_ln = nn.LayerNorm(c.d)
        self.layers = [nn.EncoderLayer(c.d, c.n_heads, rng) for _ in range(c.n_layers)]
        self.ln_f = nn.LayerNorm(c.d)
        self.head_hidden = nn.Linear(c.d, c.d, rng)
        self.head_out = nn.Linear(c.d, 1, rng)
        self.mlm_out = nn.Linear(c.d, c.vocab_size, rng)
        self.truncated = 0

    # -- pieces ----------------------------------------------------------

    def embed_image(self, reg, bbox) -> Tensor:
        """Per-region ``reg_proj(reg) + bbox_proj(bbox)``; shape (..., P, d)."""
        reg = reg if isinstance(reg, Tensor) else Tensor(np.asarray(reg))
        bbox = bbox if isinstance(bbox, Tensor) else Tensor(np.asarray(bbox))
        if reg.shape[-1] != self.config.d_in:
            raise ConfigError(f"region width {reg.shape[-1]} does not match d_in={self.config.d_in}")
        return self.reg_proj(reg) + self.bbox_proj(bbox)

    def text_ids(self, question_ids: Sequence[int], extra_ids: Sequence[int] | None = None) -> list[int]:
        """``[CLS] q [SEP]`` (plus ``extra [SEP]`` for captions), with truncation."""
        q = list(question_ids)
        if len(q) > self.config.m_max:
            self.truncated += 1
            q = q[:self.config.m_max]
        ids = [Tokenizer.CLS] + q + [Tokenizer.SEP]
        if extra_ids is not None:
            ids += list(extra_ids)[:self.config.caption_max] + [Tokenizer.SEP]
        return ids

    def encode(self, batch: PairBatch) -> Tensor:
        """Final hidden states, shape (B, T + P, d)."""
        B, T = batch.text_ids.shape
        x_text = self.tok_emb(batch.text_ids) + self.pos_emb(np.arange(T))[None] \
            + self.seg_emb(np.zeros(1, dtype=np.int64))
        x_img = self.embed_image(batch.reg, batch.bbox) + self.seg_emb(np.ones(1, dtype=np.int64))
        x = self.emb_ln(concat([x_text, x_img], axis=1))
        mask = nn.key_mask(np.concatenate([batch.text_valid, batch.reg_valid], axis=1))
        for layer in self.layers:
            x = layer(x, mask)
        return self.ln_f(x)

    def cls_score(self, h: Tensor) -> Tensor:
        cls = h[:, 0, :]
        return sigmoid(self.head_out(gelu(self.head_hidden(cls)))).reshape(-1)

    def forward(self, batch: PairBatch) -> Tensor:
        return self.cls_score(self.encode(batch))


def make_batch(texts: Sequence[Sequence[int]], reg: np.ndarray, bbox: np.ndarray,
               reg_valid: np.ndarray) -> PairBatch:
    T = max(len(t) for t in texts)
    ids = np.full((len(texts), T), Tokenizer.PAD, dtype=np.int64)
    for i, t in enumerate(texts):
        ids[i, :len(t)] = t
    return PairBatch(ids, ids != Tokenizer.PAD, reg, bbox, np.asarray(reg_valid, dtype=bool))


def features_batch(model: RelevanceModel, question_ids: Sequence[int],
                   features: Sequence[ImageFeatures]) -> PairBatch:
    text = model.text_ids(question_ids)
    P = model.config.P
    for f in features:
        if f.P != P:
            raise ConfigError(f"image {f.image_id} has P={f.P}, model expects {P}")
    reg = np.stack([f.reg for f in features])
    bbox = np.stack([f.bbox for f in features])
    valid = np.stack([np.arange(P) < f.valid_count for f in features])
    return make_batch([text] * len(features), reg, bbox, valid)


def encode_pair(model: RelevanceModel, question_ids: Sequence[int], features: ImageFeatures) -> float:
    with no_grad():
        return float(model(features_batch(model, question_ids, [features])).data[0])


def relevance_loss(pred: Tensor, target) -> Tensor:
    return bce(pred, target)


def score_pool(model: RelevanceModel, question_ids: Sequence[int],
               pool: Sequence[ImageFeatures]) -> np.ndarray:
    if len(pool) == 0:
        raise ContractError("cannot score an empty pool")
    with no_grad():
        return model(features_batch(model, question_ids, pool)).data.astype(np.float64)


def top_k(scores: Sequence[float], K: int) -> list[int]:
    """Indices of the K largest scores, best first; ties go to the lower index."""
    if K < 1:
        raise ValueError(f"K must be at least 1, got {K}")
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [int(i) for i in order[:K]]


# -- text for each pair ------------------------------------------------------

class PairText:
    """Builds the text half of each pair, optionally with the image's caption."""

    def __init__(self, model: RelevanceModel, tok: Tokenizer,
                 captions: Mapping[str, str] | None = None):
        self.model = model
        self.tok = tok
        self.captions = captions
        self._cap_ids = {k: tok.encode(v) for k, v in captions.items()} if captions else None

    def __call__(self, question: str, image_id: str) -> list[int]:
        q = self.tok.encode(question)
        extra = self._cap_ids[image_id] if self._cap_ids is not None else None
        return self.model.text_ids(q, extra)


def score_records(model: RelevanceModel, tok: Tokenizer, records: Sequence[QARecord],
                  table: FeatureTable, captions: Mapping[str, str] | None = None,
                  pools: Mapping[str, Sequence[str]] | None = None,
                  chunk: int = 256) -> dict[str, np.ndarray]:
    """Score every (question, pool image) pair, batching across questions."""
    texter = PairText(model, tok, captions)
    pairs = []
    for r in records:
        pool = pools[r.qid] if pools is not None else r.pool_ids
        pairs += [(r.qid, r.question, img) for img in pool]
    out = np.empty(len(pairs))
    with no_grad():
        for s in range(0, len(pairs), chunk):
            part = pairs[s:s + chunk]
            rows = table.rows([p[2] for p in part])
            b = make_batch([texter(q, img) for _, q, img in part],
                           table.reg[rows], table.bbox[rows], table.valid[rows])
            out[s:s + len(part)] = model(b).data
    scores: dict[str, list] = {}
    for (qid, _, _), v in zip(pairs, out):
        scores.setdefault(qid, []).append(float(v))
    return {k: np.asarray(v) for k, v in scores.items()}


def retrieve(model: RelevanceModel, tok: Tokenizer, records: Sequence[QARecord],
             table: FeatureTable, K: int = 2, captions: Mapping[str, str] | None = None,
             pools: Mapping[str, Sequence[str]] | None = None) -> list[dict]:
    scores = score_records(model, tok, records, table, captions, pools)
    out = []
    for r in records:
        pool = pools[r.qid] if pools is not None else r.pool_ids
        s = scores[r.qid]
        chosen = [pool[i] for i in top_k(s, K)]
        out.append({"qid": r.qid, "scores": [round(float(x), 7) for x in s], "chosen_ids": chosen})
    return out


def retrieval_f1(records: Sequence[QARecord], dump: Sequence[dict]) -> float:
    by_id = {d["qid"]: d["chosen_ids"] for d in dump}
    if not records:
        return 0.0
    return float(np.mean([retrieval_prf1(by_id[r.qid], r.relevant_ids)[2] for r in records]))


def write_dump(path, dump: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in dump:
            fh.write(json.dumps(d) + "\n")


def read_dump(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- pretraining -------------------------------------------------------------

def mask_tokens(ids: np.ndarray, valid: np.ndarray, vocab_size: int, rng: np.random.Generator,
                rate: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """BERT-style masking of ordinary tokens; returns (inputs, targets with -1 = ignore)."""
    maskable = valid & (ids >= len(SPECIALS))
    pick = maskable & (rng.random(ids.shape) < rate)
    targets = np.where(pick, ids, -1)
    inputs = ids.copy()
    roll = rng.random(ids.shape)
    inputs[pick & (roll < 0.8)] = Tokenizer.MASK
    swap = pick & (roll >= 0.8) & (roll < 0.9)
    inputs[swap] = rng.integers(len(SPECIALS), vocab_size, size=int(swap.sum()))
    return inputs, targets


@dataclass
class PretrainBatch:
    itm_pairs: PairBatch  # clean captions, half of them with a swapped image
    itm_label: np.ndarray
    mlm_pairs: PairBatch  # masked captions with their own images
    mlm_targets: np.ndarray  # (B, T), -1 where not masked


def make_pretrain_batch(caption_ids: Sequence[Sequence[int]], rows: np.ndarray, table: FeatureTable,
                        model: RelevanceModel, rng: np.random.Generator,
                        matches: Callable[[int, int], bool] | None = None,
                        mask_rate: float = 0.15) -> PretrainBatch:
    """ITM pairs (half with an in-batch swapped image) and masked MLM pairs.

    ``matches(k, row)`` says whether caption ``k`` is true of image ``row``;
    without it a swapped image always counts as a mismatch. ITM sees unmasked
    text so a masked noun never hides the evidence it is scored on.
    """
    B = len(rows)
    rows = np.asarray(rows)
    img_rows = rows.copy()
    label = np.ones(B)
    if B > 1:
        flip = rng.random(B) < 0.5
        shifted = np.roll(rows, 1)
        img_rows = np.where(flip, shifted, rows)
        for k in np.nonzero(flip & (shifted != rows))[0]:
            label[k] = float(matches(int(k), int(img_rows[k]))) if matches else 0.0
    texts = [model.text_ids(c) for c in caption_ids]
    itm = make_batch(texts, table.reg[img_rows], table.bbox[img_rows], table.valid[img_rows])
    mlm = make_batch(texts, table.reg[rows], table.bbox[rows], table.valid[rows])
    mlm.text_ids, targets = mask_tokens(mlm.text_ids, mlm.text_valid, model.config.vocab_size,
                                        rng, mask_rate)
    return PretrainBatch(itm, label, mlm, targets)


def pretrain_losses(model: RelevanceModel, batch: PretrainBatch) -> tuple[Tensor, Tensor]:
    itm = bce(model(batch.itm_pairs), batch.itm_label)
    if not (batch.mlm_targets >= 0).any():
        return itm, Tensor(np.zeros((), dtype=itm.dtype))
    h = model.encode(batch.mlm_pairs)
    T = batch.mlm_pairs.text_ids.shape[1]
    mlm = cross_entropy_logits(model.mlm_out(h[:, :T, :]), batch.mlm_targets, ignore_id=-1)
    return itm, mlm


def pretrain_step(model: RelevanceModel, opt: Adam, batch: PretrainBatch,
                  lr: float | None = None) -> tuple[float, float]:
    opt.zero_grad()
    itm, mlm = pretrain_losses(model, batch)
    (itm + mlm).backward()
    opt.step(lr)
    return float(itm.data), float(mlm.data)


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    warmup_fraction: float = 0.1
    neg_per_pos: int = 3
    K: int = 2
    seed: int = 0
    max_minutes: float = 10.0
    log_every: int = 0


class CaptionPairs:
    """Fixed (caption ids, feature-table row) pairs."""

    def __init__(self, captions: Sequence[Sequence[int]], rows: Sequence[int]):
        if len(captions) != len(rows) or not captions:
            raise ContractError("captions and rows must be non-empty and aligned")
        self.captions = [list(c) for c in captions]
        self.rows = np.asarray(rows, dtype=np.int64)

    def sample(self, rng: np.random.Generator, n: int):
        idx = rng.choice(len(self.captions), size=min(n, len(self.captions)), replace=False)
        return [self.captions[i] for i in idx], self.rows[idx], None


class CaptionCorpus:
    """One grounded sentence per draw: an object mention or a relation.

    Each adjective of an object mention is kept with probability
    ``keep_prob``, so the noun alone often has to carry the match.
    """

    def __init__(self, scenes: Sequence[Scene], tok: Tokenizer, table: FeatureTable,
                 keep_prob: float = 0.5, ontology: Ontology = DEFAULT_ONTOLOGY):
        self.scenes = [s for s in scenes if s.scene_id in table.index]
        if not self.scenes:
            raise ContractError("no scene has features in the table")
        self.rows = table.rows([s.scene_id for s in self.scenes])
        self.by_row = {int(r): s for r, s in zip(self.rows, self.scenes)}
        self.tok = tok
        self.keep_prob = keep_prob
        self.ontology = ontology

    def sentence(self, scene: Scene, rng: np.random.Generator) -> tuple[str, tuple]:
        """A sentence plus a key saying what it asserts about the image."""
        k = int(rng.integers(len(scene.objects) + len(scene.relations)))
        if k >= len(scene.objects):
            s, p, o = scene.relations[k - len(scene.objects)]
            key = ("rel", scene.objects[s].cls, p, scene.objects[o].cls)
            return describe_relation(scene, (s, p, o), self.ontology), key
        obj = scene.objects[k]
        kept = [a for a in ATTRIBUTES if rng.random() < self.keep_prob]
        key = ("obj", obj.cls, obj.count, tuple((a, obj.attributes[a]) for a in kept))
        return describe_object(obj, self.ontology, kept), key

    def holds(self, key: tuple, scene: Scene) -> bool:
        if key[0] == "rel":
            _, subj, pred, obj = key
            return any((scene.objects[s].cls, p, scene.objects[o].cls) == (subj, pred, obj)
                       for s, p, o in scene.relations)
        _, cls, count, attrs = key
        return any(o.cls == cls and o.count == count and all(o.attributes.get(a) == v for a, v in attrs)
                   for o in scene.objects)

    def sample(self, rng: np.random.Generator, n: int):
        idx = rng.integers(len(self.scenes), size=n)
        drawn = [self.sentence(self.scenes[i], rng) for i in idx]
        keys = [k for _, k in drawn]

        def matches(k: int, row: int) -> bool:
            return self.holds(keys[k], self.by_row[row])

        return [self.tok.encode(t) for t, _ in drawn], self.rows[idx], matches


def pretrain(model: RelevanceModel, corpus, table: FeatureTable, steps: int = 200,
             batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
             warmup_fraction: float = 0.1, mask_rate: float = 0.15,
             mlm_start: float = 0.0) -> list[tuple[float, float]]:
    """ITM + MLM on grounded captions; returns per-step (itm, mlm).

    MLM joins after the first ``mlm_start`` fraction of steps. From scratch,
    the word-to-region alignment that ITM needs forms much faster without
    the MLM gradient competing for the same embeddings.
    """
    rng = np.random.default_rng([seed, 0x1717])
    opt = Adam(model.parameters(), lr=lr)
    history = []
    first_mlm = int(round(mlm_start * steps))
    for step in range(steps):
        captions, rows, matches = corpus.sample(rng, batch_size)
        rate = mask_rate if step >= first_mlm else 0.0
        batch = make_pretrain_batch(captions, rows, table, model, rng, matches, rate)
        history.append(pretrain_step(model, opt, batch,
                                     warmup_linear_lr(step + 1, steps, lr, warmup_fraction)))
    return history


# -- finetuning --------------------------------------------------------------

def pair_stream(records: Sequence[QARecord], neg_per_pos: int,
                rng: np.random.Generator) -> list[tuple[QARecord, str, float]]:
    """All positives plus ``neg_per_pos`` pool negatives per positive, shuffled."""
    out = []
    for r in records:
        gold = set(r.relevant_ids)
        negs = [i for i in r.pool_ids if i not in gold]
        n = min(len(negs), neg_per_pos * len(gold))
        out += [(r, i, 1.0) for i in r.relevant_ids]
        out += [(r, negs[int(k)], 0.0) for k in rng.choice(len(negs), size=n, replace=False)]
    order = rng.permutation(len(out))
    return [out[int(i)] for i in order]


@dataclass
class FinetuneResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_f1: float = -1.0
    steps: int = 0


def finetune(model: RelevanceModel, tok: Tokenizer, train: Sequence[QARecord],
             val: Sequence[QARecord], table: FeatureTable, config: TrainConfig,
             captions: Mapping[str, str] | None = None, clock=None) -> FinetuneResult:
    """BCE on question/image pairs; keeps the parameters with the best validation F1."""
    import time
    clock = clock or time.perf_counter
    start = clock()
    texter = PairText(model, tok, captions)
    opt = Adam(model.parameters(), lr=config.lr)
    per_epoch = sum(len(r.relevant_ids) * (1 + config.neg_per_pos) for r in train)
    total = config.epochs * ((per_epoch + config.batch_size - 1) // config.batch_size)
    result = FinetuneResult()
    best_state = None
    step = 0
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, 0xF17E, epoch])
        stream = pair_stream(train, config.neg_per_pos, rng)
        losses = []
        for s in range(0, len(stream), config.batch_size):
            part = stream[s:s + config.batch_size]
            rows = table.rows([p[1] for p in part])
            batch = make_batch([texter(r.question, img) for r, img, _ in part],
                               table.reg[rows], table.bbox[rows], table.valid[rows])
            target = np.array([p[2] for p in part])
            opt.zero_grad()
            loss = relevance_loss(model(batch), target)
            loss.backward()
            step += 1
            opt.step(warmup_linear_lr(step, total, config.lr, config.warmup_fraction))
            losses.append(float(loss.data))
            if config.log_every and step % config.log_every == 0:
                log.info("step %d loss %.4f", step, np.mean(losses[-config.log_every:]))
        dump = retrieve(model, tok, val, table, config.K, captions)
        f1 = retrieval_f1(val, dump)
        result.history.append({"epoch": epoch, "step": step, "loss": float(np.mean(losses)),
                               "val_f1": f1, "seconds": clock() - start})
        log.info("epoch %d loss %.4f val F1@%d %.4f", epoch, np.mean(losses), config.K, f1)
        if f1 > result.best_f1:
            result.best_f1, result.best_epoch = f1, epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        if (clock() - start) / 60.0 > config.max_minutes:
            log.warning("time budget reached after epoch %d", epoch)
            break
    result.steps = step
    if best_state is not None:
        model.load_state_dict(best_state)
    return result


def config_dict(config: RelevanceConfig) -> dict:
    return asdict(config)
