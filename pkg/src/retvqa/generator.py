"""Multi-image encoder-decoder answer generator (MI-BART).

Encoder input for K retrieved images::

    [CLS] q_1 .. q_M [SEP] o^1_1 .. o^1_P [SEP] o^2_1 .. o^2_P ... o^K_P

so ``L = M + K*P + K + 1``. Every position carries an image order id: 0 on
text and separators, ``k`` on the regions of the k-th image. Regions are
embedded as ``reg_proj(r) + bbox_proj(b)`` plus the order embedding; text
gets token and position embeddings. The stitched variant puts all regions in
a single block with order id 1 and squeezes each image's boxes into its own
horizontal band. The question-only variant has no image blocks at all.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn
from .curation import QARecord
from .numerics import (
    Adam,
    ContractError,
    Tensor,
    concat,
    cross_entropy_logits,
    no_grad,
    softmax,
    warmup_linear_lr,
)
from .synthworld import DEFAULT_ONTOLOGY, ConfigError, ImageFeatures, Ontology, Scene, describe_object
from .tokenizer import Tokenizer, split_words

log = logging.getLogger(__name__)

MODES = ("multi", "stitch", "question")


@dataclass
class MIBartConfig:
    vocab_size: int
    d: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    K: int = 2
    P: int = 8
    d_in: int = 64
    m_max: int = 32
    max_answer_len: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.K < 1:
            raise ConfigError(f"K must be at least 1, got {self.K}")

    @property
    def max_source(self) -> int:
        return self.m_max + self.K * self.P + self.K + 1

    @property
    def max_target(self) -> int:
        # BOS + answer tokens + EOS
        return self.max_answer_len + 2

    @classmethod
    def large(cls, vocab_size: int, **kw) -> "MIBartConfig":
        """The full-size layout: six encoder and six decoder layers, eight heads."""
        base = dict(d=768, n_enc_layers=6, n_dec_layers=6, n_heads=8, d_in=2048, P=36)
        base.update(kw)
        return cls(vocab_size, **base)


@dataclass
class EncoderInput:
    """One padded batch of encoder sequences; every array is (B, L[, ...])."""

    token_ids: np.ndarray  # int, PAD on region positions
    reg: np.ndarray  # (B, L, d_in), zero on text positions
    bbox: np.ndarray  # (B, L, 4)
    is_region: np.ndarray  # bool
    segment_ids: np.ndarray  # 0 text, 1 region
    order_ids: np.ndarray  # 0 text, k for image k
    position_ids: np.ndarray
    valid: np.ndarray  # bool attention mask over keys
    tags: list[list[str]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    @property
    def length(self) -> int:
        return self.token_ids.shape[1]


@dataclass
class _Block:
    reg: np.ndarray  # (n, d_in)
    bbox: np.ndarray  # (n, 4)
    valid: np.ndarray  # (n,)
    order: int
    tags: list[str]


def _image_block(f: ImageFeatures, order: int, image_index: int) -> _Block:
    P = f.reg.shape[0]
    return _Block(f.reg, f.bbox, np.arange(P) < f.valid_count, order,
                  [f"img{image_index}:r{j}" for j in range(P)])


def stitch_boxes(bbox: np.ndarray, k: int, n_images: int) -> np.ndarray:
    """Map x coordinates of image ``k`` (1-based) into ``[(k-1)/n, k/n]``."""
    out = np.array(bbox, dtype=np.float64, copy=True)
    out[..., [0, 2]] = (k - 1 + out[..., [0, 2]]) / n_images
    return out.astype(np.asarray(bbox).dtype)


class MIBart(nn.Module):
    def __init__(self, config: MIBartConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng([config.seed, 0xBA27])
        c = config
        self.config = c
        self.tok_emb = nn.Embedding(c.vocab_size, c.d, rng)
        self.enc_pos = nn.Embedding(c.max_source, c.d, rng)
        self.seg_emb = nn.Embedding(2, c.d, rng)
        self.order_emb = nn.Embedding(c.K + 1, c.d, rng)
        self.reg_proj = nn.Linear(c.d_in, c.d, rng)
        self.bbox_proj = nn.Linear(4, c.d, rng)
        self.enc_ln_emb = nn.LayerNorm(c.d)
        self.encoder = [nn.EncoderLayer(c.d, c.n_heads, rng) for _ in range(c.n_enc_layers)]
        self.enc_ln = nn.LayerNorm(c.d)
        self.dec_pos = nn.Embedding(c.max_target, c.d, rng)
        self.dec_ln_emb = nn.LayerNorm(c.d)
        self.decoder = [nn.DecoderLayer(c.d, c.n_heads, rng) for _ in range(c.n_dec_layers)]
        self.dec_ln = nn.LayerNorm(c.d)
        self.lm_head = nn.Linear(c.d, c.vocab_size, rng)
        self.truncated = 0

    # -- input construction ----------------------------------------------

    def _question(self, question_ids: Sequence[int]) -> list[int]:
        q = list(question_ids)
        if len(q) > self.config.m_max:
            self.truncated += 1
            q = q[:self.config.m_max]
        return q

    def _check(self, retrieved: Sequence[ImageFeatures]) -> None:
        if len(retrieved) > self.config.K:
            raise ContractError(f"{len(retrieved)} images exceed K={self.config.K}")
        for f in retrieved:
            if f.reg.shape != (self.config.P, self.config.d_in):
                raise ConfigError(f"image {f.image_id} has regions {f.reg.shape}, expected "
                                  f"({self.config.P}, {self.config.d_in})")

    def _assemble(self, question_ids: Sequence[int], blocks: Sequence[_Block],
                  words: Sequence[str] | None = None) -> dict:
        q = self._question(question_ids)
        qtags = ([f"q{i}:{w}" for i, w in enumerate(words[:len(q)])] if words is not None
                 else [f"q{i}" for i in range(len(q))])
        tokens = [Tokenizer.CLS] + q
        tags = ["cls"] + qtags
        n = 0
        d_in = self.config.d_in
        parts = {"tok": [], "reg": [], "bbox": [], "isr": [], "order": [], "valid": []}

        def text(ids):
            parts["tok"] += ids
            parts["reg"].append(np.zeros((len(ids), d_in), np.float32))
            parts["bbox"].append(np.zeros((len(ids), 4), np.float32))
            parts["isr"] += [False] * len(ids)
            parts["order"] += [0] * len(ids)
            parts["valid"] += [True] * len(ids)

        text(tokens)
        for b in blocks:
            text([Tokenizer.SEP])
            tags.append("sep")
            m = len(b.valid)
            parts["tok"] += [Tokenizer.PAD] * m
            parts["reg"].append(np.asarray(b.reg, np.float32))
            parts["bbox"].append(np.asarray(b.bbox, np.float32))
            parts["isr"] += [True] * m
            parts["order"] += [b.order] * m
            parts["valid"] += [bool(v) for v in b.valid]
            tags += b.tags
            n += 1
        if not blocks:
            text([Tokenizer.SEP])
            tags.append("sep")
        return {"tok": np.array(parts["tok"], np.int64), "reg": np.concatenate(parts["reg"]),
                "bbox": np.concatenate(parts["bbox"]), "isr": np.array(parts["isr"]),
                "order": np.array(parts["order"], np.int64), "valid": np.array(parts["valid"]),
                "tags": tags}

    def build_input(self, question_ids: Sequence[int], retrieved: Sequence[ImageFeatures],
                    words: Sequence[str] | None = None) -> dict:
        """One multi-image example (unbatched); see :func:`collate`."""
        if len(retrieved) == 0:
            raise ContractError("multi-image input needs at least one image")
        self._check(retrieved)
        blocks = [_image_block(f, k + 1, k) for k, f in enumerate(retrieved)]
        return self._assemble(question_ids, blocks, words)

    def stitch_input(self, question_ids: Sequence[int], retrieved: Sequence[ImageFeatures],
                     words: Sequence[str] | None = None) -> dict:
        if len(retrieved) == 0:
            raise ContractError("stitched input needs at least one image")
        self._check(retrieved)
        n = len(retrieved)
        one = _Block(np.concatenate([f.reg for f in retrieved]),
                     np.concatenate([stitch_boxes(f.bbox, k + 1, n) for k, f in enumerate(retrieved)]),
                     np.concatenate([np.arange(f.P) < f.valid_count for f in retrieved]), 1,
                     [f"img{k}:r{j}" for k, f in enumerate(retrieved) for j in range(f.P)])
        return self._assemble(question_ids, [one], words)

    def question_input(self, question_ids: Sequence[int], words: Sequence[str] | None = None) -> dict:
        return self._assemble(question_ids, [], words)

    def make_input(self, mode: str, question_ids: Sequence[int],
                   retrieved: Sequence[ImageFeatures], words: Sequence[str] | None = None) -> dict:
        if mode == "multi":
            return self.build_input(question_ids, retrieved, words)
        if mode == "stitch":
            return self.stitch_input(question_ids, retrieved, words)
        if mode == "question":
            return self.question_input(question_ids, words)
        raise ConfigError(f"unknown input mode {mode!r}; expected one of {MODES}")

    # -- encoder / decoder -----------------------------------------------

    def encode(self, inp: EncoderInput) -> Tensor:
        """Contextual states ``z`` of shape (B, L, d)."""
        x_tok = self.tok_emb(inp.token_ids) + self.enc_pos(inp.position_ids)
        x_reg = self.reg_proj(Tensor(inp.reg)) + self.bbox_proj(Tensor(inp.bbox))
        isr = np.broadcast_to(inp.is_region[..., None], x_reg.shape).astype(x_reg.dtype)
        x = x_tok * (1.0 - isr) + x_reg * isr
        x = x + self.seg_emb(inp.segment_ids) + self.order_emb(inp.order_ids)
        x = self.enc_ln_emb(x)
        mask = nn.key_mask(inp.valid)
        for layer in self.encoder:
            x = layer(x, mask)
        return self.enc_ln(x)

    def _check_prefix(self, T: int) -> None:
        if T > self.config.max_target:
            raise ContractError(f"decoder prefix of length {T} exceeds {self.config.max_target}")

    def decode(self, z: Tensor, memory_valid: np.ndarray, prefix_ids: np.ndarray) -> Tensor:
        """Teacher-forced logits (B, T, V) for every prefix position."""
        prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
        T = prefix_ids.shape[1]
        self._check_prefix(T)
        x = self.dec_ln_emb(self.tok_emb(prefix_ids) + self.dec_pos(np.arange(T))[None])
        self_mask = nn.causal_mask(T)
        mem_mask = nn.key_mask(memory_valid)
        for layer in self.decoder:
            x = layer(x, z, self_mask, mem_mask)
        return self.lm_head(self.dec_ln(x))

    def decode_step(self, z: Tensor, memory_valid: np.ndarray, prefix_ids: np.ndarray) -> np.ndarray:
        """Next-token distribution (B, V) after ``prefix_ids`` (which start with BOS)."""
        prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
        if prefix_ids.ndim != 2 or (prefix_ids[:, 0] != Tokenizer.BOS).any():
            raise ContractError("decoder prefix must start with BOS")
        with no_grad():
            logits = self.decode(z, memory_valid, prefix_ids)[:, -1, :]
            return softmax(logits, axis=-1).data

    def start_incremental(self, z: Tensor, memory_valid: np.ndarray) -> "DecodeState":
        return DecodeState(self, z, memory_valid)

    def forward(self, inp: EncoderInput, prefix_ids: np.ndarray) -> Tensor:
        return self.decode(self.encode(inp), inp.valid, prefix_ids)


class DecodeState:
    """Per-request key/value caches for one-token-at-a-time decoding."""

    def __init__(self, model: MIBart, z: Tensor, memory_valid: np.ndarray):
        self.model = model
        self.z = z
        self.mem_mask = nn.key_mask(memory_valid)
        self.caches = [{} for _ in model.decoder]
        self.t = 0

    def step(self, token_ids: np.ndarray) -> Tensor:
        """Feed one token per row; returns logits (B, V) for the next position."""
        m = self.model
        m._check_prefix(self.t + 1)
        ids = np.asarray(token_ids, dtype=np.int64)[:, None]
        x = m.dec_ln_emb(m.tok_emb(ids) + m.dec_pos(np.array([self.t]))[None])
        for layer, cache in zip(m.decoder, self.caches):
            x = layer(x, self.z, None, self.mem_mask, cache)
        self.t += 1
        return m.lm_head(m.dec_ln(x))[:, 0, :]


def collate(examples: Sequence[dict]) -> EncoderInput:
    """Right-pad assembled examples into one batch."""
    if not examples:
        raise ContractError("cannot collate an empty batch")
    B = len(examples)
    L = max(len(e["tok"]) for e in examples)
    d_in = examples[0]["reg"].shape[1]
    tok = np.full((B, L), Tokenizer.PAD, np.int64)
    reg = np.zeros((B, L, d_in), np.float32)
    bbox = np.zeros((B, L, 4), np.float32)
    isr = np.zeros((B, L), bool)
    order = np.zeros((B, L), np.int64)
    valid = np.zeros((B, L), bool)
    for i, e in enumerate(examples):
        n = len(e["tok"])
        tok[i, :n], reg[i, :n], bbox[i, :n] = e["tok"], e["reg"], e["bbox"]
        isr[i, :n], order[i, :n], valid[i, :n] = e["isr"], e["order"], e["valid"]
    pos = np.broadcast_to(np.arange(L), (B, L)).copy()
    return EncoderInput(tok, reg, bbox, isr, isr.astype(np.int64), order, pos, valid,
                        [e["tags"] for e in examples])


def pad_targets(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), T), Tokenizer.PAD, np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def gen_loss(model: MIBart, inp: EncoderInput, answer_ids: np.ndarray) -> Tensor:
    """Mean token cross-entropy of ``BOS a EOS`` under teacher forcing; PAD ignored."""
    answer_ids = np.asarray(answer_ids, dtype=np.int64)
    logits = model(inp, answer_ids[:, :-1])
    return cross_entropy_logits(logits, answer_ids[:, 1:], ignore_id=Tokenizer.PAD)


def greedy_decode(model: MIBart, inp: EncoderInput, max_len: int | None = None) -> list[list[int]]:
    """Batched greedy decoding with KV caches; returns ids without BOS/EOS."""
    max_len = min(max_len or model.config.max_answer_len, model.config.max_answer_len + 1)
    B = len(inp)
    with no_grad():
        state = model.start_incremental(model.encode(inp), inp.valid)
        tokens = np.full(B, Tokenizer.BOS, np.int64)
        done = np.zeros(B, bool)
        out: list[list[int]] = [[] for _ in range(B)]
        for _ in range(max_len):
            logits = state.step(tokens).data
            tokens = logits.argmax(axis=-1)
            for i in np.nonzero(~done)[0]:
                if tokens[i] == Tokenizer.EOS:
                    done[i] = True
                else:
                    out[i].append(int(tokens[i]))
            if done.all():
                break
    return out


# -- dataset plumbing -----------------------------------------------------

class Examples:
    """Turns records plus chosen image ids into encoder inputs and targets."""

    def __init__(self, model: MIBart, tok: Tokenizer, bank: Mapping[str, ImageFeatures],
                 mode: str = "multi"):
        if mode not in MODES:
            raise ConfigError(f"unknown input mode {mode!r}; expected one of {MODES}")
        self.model, self.tok, self.bank, self.mode = model, tok, bank, mode
        self._q: dict[str, list[int]] = {}

    def question(self, r: QARecord) -> list[int]:
        if r.qid not in self._q:
            self._q[r.qid] = self.tok.encode(r.question)
        return self._q[r.qid]

    def answer(self, r: QARecord) -> list[int]:
        ids = self.tok.encode(r.full_answer)[:self.model.config.max_answer_len]
        return [Tokenizer.BOS] + ids + [Tokenizer.EOS]

    def inputs(self, records: Sequence[QARecord], contexts: Sequence[Sequence[str]]) -> EncoderInput:
        return collate([self.model.make_input(self.mode, self.question(r),
                                              [self.bank[i] for i in ctx])
                        for r, ctx in zip(records, contexts)])


@dataclass(frozen=True)
class GroundingPrompt:
    """An object's class word answered by its caption sentence.

    Carries the fields :func:`train_generator` reads from a QA record, so the
    same loop runs the caption warm-up.
    """
    qid: str
    question: str
    full_answer: str
    relevant_ids: tuple[str, ...]


def grounding_prompts(scenes: Sequence[Scene], P: int, n_images: int = 2, seed: int = 0,
                      ontology: Ontology = DEFAULT_ONTOLOGY) -> list[GroundingPrompt]:
    """Caption warm-up corpus: name an object, describe it from the right image.

    Each prompt's context is the object's scene plus ``n_images - 1``
    distractor scenes that lack the class, in random order. Objects whose
    regions were cut by the ``P`` cap are skipped since their count is not
    visible.
    """
    rng = np.random.default_rng([seed, 0xCA9])
    classes = [{o.cls for o in s.objects} for s in scenes]
    out = []
    for i, s in enumerate(scenes):
        used = 0
        for j, obj in enumerate(s.objects):
            used += obj.count
            if used > P:
                break
            ctx = [s.scene_id]
            while len(ctx) < n_images and len(scenes) > n_images:
                k = int(rng.integers(len(scenes)))
                if obj.cls not in classes[k] and scenes[k].scene_id not in ctx:
                    ctx.append(scenes[k].scene_id)
            ctx = [ctx[int(k)] for k in rng.permutation(len(ctx))]
            out.append(GroundingPrompt(f"{s.scene_id}/{j}", obj.cls, describe_object(obj, ontology),
                                       tuple(ctx)))
    return out


@dataclass
class GenTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    warmup_fraction: float = 0.05
    seed: int = 0
    max_minutes: float = 20.0
    max_steps: int = 0  # 0 = no cap
    shuffle_images: bool = True


@dataclass
class GenTrainResult:
    history: list[dict] = field(default_factory=list)  # per epoch
    step_losses: list[float] = field(default_factory=list)
    steps: int = 0


def train_generator(model: MIBart, examples: Examples, records: Sequence[QARecord],
                    config: GenTrainConfig, contexts: Mapping[str, Sequence[str]] | None = None,
                    on_step: Callable[[int, float], None] | None = None, clock=None,
                    start_step: int = 0, opt: Adam | None = None) -> GenTrainResult:
    """Teacher-forced training; the context defaults to each record's gold images.

    ``start_step`` (with the matching optimizer) resumes an earlier run at the
    epoch that step falls in, keeping the learning-rate schedule intact.
    """
    clock = clock or time.perf_counter
    start = clock()
    opt = opt or Adam(model.parameters(), lr=config.lr)
    n_batches = (len(records) + config.batch_size - 1) // config.batch_size
    total = config.epochs * n_batches
    if config.max_steps:
        total = min(total, config.max_steps)
    result = GenTrainResult(steps=start_step)
    step = start_step
    first_epoch = start_step // max(n_batches, 1)
    for epoch in range(first_epoch, config.epochs):
        rng = np.random.default_rng([config.seed, 0x6E4, epoch])
        order = rng.permutation(len(records))
        losses = []
        for s in range(0, len(order), config.batch_size):
            part = [records[int(i)] for i in order[s:s + config.batch_size]]
            ctx = []
            for r in part:
                ids = list(contexts[r.qid] if contexts is not None else r.relevant_ids)
                if config.shuffle_images and len(ids) > 1:
                    ids = [ids[int(k)] for k in rng.permutation(len(ids))]
                ctx.append(ids)
            inp = examples.inputs(part, ctx)
            target = pad_targets([examples.answer(r) for r in part])
            opt.zero_grad()
            loss = gen_loss(model, inp, target)
            loss.backward()
            step += 1
            opt.step(warmup_linear_lr(min(step, total), total, config.lr, config.warmup_fraction))
            v = float(loss.data)
            losses.append(v)
            result.step_losses.append(v)
            if on_step is not None:
                on_step(step, v)
            if config.max_steps and step - start_step >= config.max_steps:
                break
        result.history.append({"epoch": epoch, "step": step, "loss": float(np.mean(losses)),
                               "seconds": clock() - start})
        log.info("epoch %d loss %.4f", epoch, np.mean(losses))
        if config.max_steps and step - start_step >= config.max_steps:
            break
        if (clock() - start) / 60.0 > config.max_minutes:
            log.warning("time budget reached after epoch %d", epoch)
            break
    result.steps = step
    return result


def generate_answers(model: MIBart, examples: Examples, records: Sequence[QARecord],
                     contexts: Mapping[str, Sequence[str]] | None = None,
                     batch_size: int = 64, max_len: int | None = None) -> dict[str, str]:
    """Greedy answers keyed by qid; context defaults to gold images."""
    out = {}
    for s in range(0, len(records), batch_size):
        part = list(records[s:s + batch_size])
        ctx = [list(contexts[r.qid] if contexts is not None else r.relevant_ids) for r in part]
        ids = greedy_decode(model, examples.inputs(part, ctx), max_len)
        for r, seq in zip(part, ids):
            out[r.qid] = examples.tok.decode(seq)
    return out


def generate(model: MIBart, tok: Tokenizer, question_ids: Sequence[int],
             retrieved: Sequence[ImageFeatures], mode: str = "multi",
             max_len: int | None = None) -> str:
    inp = collate([model.make_input(mode, question_ids, retrieved)])
    return tok.decode(greedy_decode(model, inp, max_len)[0])


# -- attention export -------------------------------------------------------

def attention_rows(model: MIBart, inp: EncoderInput, answer_ids: Sequence[int]) -> np.ndarray:
    """Last decoder layer cross-attention, head-averaged: (T, L) for ``BOS a``.

    Row ``t`` is the attention used while predicting answer token ``t``.
    """
    if len(inp) != 1:
        raise ContractError("attention export works on one example at a time")
    prefix = np.asarray([[Tokenizer.BOS] + list(answer_ids)], dtype=np.int64)
    with no_grad():
        model(inp, prefix)
    w = model.decoder[-1].cross_attn.last_weights
    return np.asarray(w, dtype=np.float64)[0].mean(axis=0)


def export_attention(model: MIBart, tok: Tokenizer, qid: str, question: str,
                     retrieved: Sequence[ImageFeatures], answer_ids: Sequence[int] | None = None,
                     mode: str = "multi") -> list[dict]:
    """One record per answer token: ``{qid, step, token, weights: [[tag, w], ...]}``.

    Without ``answer_ids`` the model's own greedy answer is used.
    """
    q = tok.encode(question)
    inp = collate([model.make_input(mode, q, retrieved, split_words(question))])
    if answer_ids is None:
        answer_ids = greedy_decode(model, inp)[0]
    answer_ids = [int(a) for a in answer_ids if a not in (Tokenizer.BOS,)]
    if answer_ids and answer_ids[-1] == Tokenizer.EOS:
        answer_ids = answer_ids[:-1]
    rows = attention_rows(model, inp, answer_ids)
    tags = inp.tags[0]
    L = len(tags)
    out = []
    for t, tid in enumerate(answer_ids + [Tokenizer.EOS]):
        out.append({"qid": qid, "step": t, "token": tok.itos[tid],
                    "weights": [[tags[j], float(rows[t, j])] for j in range(L)]})
    return out


def write_attention(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def config_dict(config: MIBartConfig) -> dict:
    return asdict(config)
