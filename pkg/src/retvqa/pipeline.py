"""Stage implementations behind the command line.

Workdir layout (each stage writes only under its own directory)::

    data/      scenes.jsonl dataset.jsonl sources.jsonl features.bin tokenizer.json stats.json
    rel/       pretrain.ckpt finetune.ckpt *_log.csv retrieval_<split>.jsonl
    qa/        <variant>.ckpt <variant>.opt <variant>_log.csv <variant>.json
    baselines/ popularity.json vqa.ckpt vqa_vocab.json
    eval/      <mode>/<method>.json <mode>/<method>_predictions.jsonl
    ablate/    <sweep>.json
    report.md  report.json
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines as bl
from . import config as config_mod
from .curation import (
    CurationConfig,
    QARecord,
    SceneIndex,
    attach_sources,
    curate,
    corpus_texts,
    dataset_stats,
    read_jsonl,
    read_scenes,
    select_negatives,
    write_jsonl,
    write_scenes,
    write_sources,
)
from .generator import (
    Examples,
    GenTrainConfig,
    MIBart,
    MIBartConfig,
    generate_answers,
    grounding_prompts,
    train_generator,
)
from .metrics import evaluate, f_times_a, format_report, retrieval_prf1, score_answers
from .numerics import Adam, load_checkpoint, save_checkpoint
from .relevance import (
    CaptionCorpus,
    FeatureTable,
    RelevanceConfig,
    RelevanceModel,
    TrainConfig,
    finetune,
    pretrain,
    read_dump,
    retrieval_f1,
    retrieve,
    write_dump,
)
from .synthworld import ConfigError, Scene, SceneConfig, caption_text, encode_scene, load_feature_bank, save_features
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

QA_VARIANTS = {"mibart": "multi", "stitch": "stitch", "question-only": "question"}
METHODS = ("mibart", "stitch", "question-only", "popularity-global", "popularity-category",
           "aggregate-vqa")


class MissingPrerequisite(RuntimeError):
    """A stage's input is absent; the message names the stage that makes it."""


class Workdir:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def stage_dir(self, name: str) -> Path:
        d = self.path(name)
        d.mkdir(parents=True, exist_ok=True)
        return d

    def need(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingPrerequisite(f"{path} is missing; run `retvqa {stage}` first")
        return path

    @property
    def dataset(self) -> Path:
        return self.path("data", "dataset.jsonl")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _check_writable(root: Path) -> None:
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise OSError(f"workdir {root} is not writable: {e}") from e


# -- data ---------------------------------------------------------------------

def curation_config(cfg: dict, **over) -> CurationConfig:
    d = cfg["data"]
    kw = dict(seed=cfg["seed"], n_scenes=d["n_scenes"], n_questions=d["n_questions"],
              pool_size=d["pool_size"], hard_fraction=d["hard_fraction"],
              split_fractions=tuple(d["split_fractions"]), scene=SceneConfig())
    kw.update(over)
    return CurationConfig(**kw)


def encode_all(scenes: Sequence[Scene], cfg: dict) -> list:
    d = cfg["data"]
    return [encode_scene(s, codebook_seed=cfg["seed"], noise_sigma=d["noise_sigma"], P=d["P"],
                         d_in=d["d_in"], class_scale=d["class_scale"]) for s in scenes]


def gen_data(cfg: dict) -> dict:
    wd = Workdir(cfg["workdir"])
    _check_writable(wd.root)
    scenes, records = curate(curation_config(cfg))
    feats = encode_all(scenes, cfg)
    tok = Tokenizer.build(corpus_texts(records, scenes))
    out = wd.stage_dir("data")
    write_scenes(out / "scenes.jsonl", scenes)
    write_jsonl(out / "dataset.jsonl", records)
    write_sources(out / "sources.jsonl", records)
    save_features(out / "features.bin", feats)
    tok.save(out / "tokenizer.json")
    stats = dataset_stats(records)
    stats["n_scenes"] = len(scenes)
    stats["splits"] = {s: sum(r.split == s for r in records) for s in ("train", "val", "test")}
    _write_json(out / "stats.json", stats)
    (out / "config.json").write_text(config_mod.dumps(cfg), encoding="utf-8")
    return stats


@dataclass
class Data:
    scenes: list[Scene]
    records: list[QARecord]
    bank: dict
    table: FeatureTable
    tok: Tokenizer

    def split(self, name: str) -> list[QARecord]:
        return [r for r in self.records if r.split == name]

    def captions(self) -> dict[str, str]:
        return {s.scene_id: caption_text(s) for s in self.scenes}


def load_data(wd: Workdir) -> Data:
    for name in ("scenes.jsonl", "dataset.jsonl", "features.bin", "tokenizer.json"):
        wd.need(wd.path("data", name), "gen-data")
    scenes = read_scenes(wd.path("data", "scenes.jsonl"))
    records = read_jsonl(wd.dataset)
    sources = wd.path("data", "sources.jsonl")
    if sources.exists():
        # select_negatives needs the tuples each question was built from
        attach_sources(records, sources)
    bank = load_feature_bank(wd.path("data", "features.bin"))
    return Data(scenes, records, bank, FeatureTable(bank), Tokenizer.load(wd.path("data", "tokenizer.json")))


# -- relevance ----------------------------------------------------------------

def relevance_config(cfg: dict, tok: Tokenizer) -> RelevanceConfig:
    r = cfg["relevance"]
    return RelevanceConfig(vocab_size=len(tok), d=r["d"], n_layers=r["n_layers"], n_heads=r["n_heads"],
                           P=cfg["data"]["P"], d_in=cfg["data"]["d_in"], m_max=r["m_max"],
                           caption_max=r["caption_max"], seed=cfg["seed"])


def run_pretrain(cfg: dict, data: Data) -> tuple[RelevanceModel, list]:
    p = cfg["pretrain"]
    model = RelevanceModel(relevance_config(cfg, data.tok))
    corpus = CaptionCorpus(data.scenes, data.tok, data.table, keep_prob=p["keep_prob"])
    history = pretrain(model, corpus, data.table, steps=p["steps"], batch_size=p["batch_size"],
                       lr=p["lr"], seed=cfg["seed"], warmup_fraction=p["warmup_fraction"],
                       mask_rate=p["mask_rate"], mlm_start=p["mlm_start"])
    return model, history


def train_pretrain_rel(cfg: dict) -> dict:
    wd = Workdir(cfg["workdir"])
    data = load_data(wd)
    model, history = run_pretrain(cfg, data)
    out = wd.stage_dir("rel")
    model.save(out / "pretrain.ckpt")
    _write_csv(out / "pretrain_log.csv", ["step", "itm", "mlm"],
               [(i + 1, f"{a:.6f}", f"{b:.6f}") for i, (a, b) in enumerate(history)])
    tail = history[-max(1, len(history) // 10):]
    return {"steps": len(history), "itm": float(np.mean([h[0] for h in tail])),
            "mlm": float(np.mean([h[1] for h in tail]))}


def finetune_config(cfg: dict) -> TrainConfig:
    f = cfg["finetune"]
    return TrainConfig(epochs=f["epochs"], batch_size=f["batch_size"], lr=f["lr"],
                       warmup_fraction=f["warmup_fraction"], neg_per_pos=f["neg_per_pos"],
                       K=cfg["K"], seed=cfg["seed"], max_minutes=f["max_minutes"])


def run_finetune(cfg: dict, data: Data, model: RelevanceModel, captions: bool = False):
    caps = data.captions() if captions else None
    return finetune(model, data.tok, data.split("train"), data.split("val"), data.table,
                    finetune_config(cfg), captions=caps)


def load_relevance(cfg: dict, wd: Workdir, data: Data, name: str = "finetune") -> RelevanceModel:
    stage = "train pretrain-rel" if name == "pretrain" else "train finetune-rel"
    model = RelevanceModel(relevance_config(cfg, data.tok))
    model.load(wd.need(wd.path("rel", f"{name}.ckpt"), stage))
    return model


def train_finetune_rel(cfg: dict) -> dict:
    wd = Workdir(cfg["workdir"])
    data = load_data(wd)
    model = load_relevance(cfg, wd, data, "pretrain")
    captions = bool(cfg["finetune"]["captions"])
    result = run_finetune(cfg, data, model, captions)
    out = wd.stage_dir("rel")
    model.save(out / "finetune.ckpt")
    _write_csv(out / "finetune_log.csv", ["epoch", "step", "loss", "val_f1"],
               [(h["epoch"], h["step"], f"{h['loss']:.6f}", f"{h['val_f1']:.6f}") for h in result.history])
    caps = data.captions() if captions else None
    for split in ("val", "test"):
        write_dump(out / f"retrieval_{split}.jsonl",
                   retrieve(model, data.tok, data.split(split), data.table, cfg["K"], caps))
    return {"best_epoch": result.best_epoch, "best_val_f1": result.best_f1,
            "epochs": [{"epoch": h["epoch"], "val_f1": h["val_f1"]} for h in result.history]}


def retrieved_contexts(cfg: dict, wd: Workdir, data: Data, split: str, K: int | None = None) -> dict:
    path = wd.need(wd.path("rel", f"retrieval_{split}.jsonl"), "train finetune-rel")
    K = K or cfg["K"]
    return {d["qid"]: d["chosen_ids"][:K] for d in read_dump(path)}


# -- QA models ------------------------------------------------------------------

def generator_config(cfg: dict, tok: Tokenizer) -> MIBartConfig:
    g = cfg["generator"]
    return MIBartConfig(vocab_size=len(tok), d=g["d"], n_enc_layers=g["n_enc_layers"],
                        n_dec_layers=g["n_dec_layers"], n_heads=g["n_heads"], K=cfg["K"],
                        P=cfg["data"]["P"], d_in=cfg["data"]["d_in"], m_max=g["m_max"],
                        max_answer_len=g["max_answer_len"], seed=cfg["seed"])


def qa_train_config(cfg: dict, **over) -> GenTrainConfig:
    q = cfg["qa_train"]
    kw = dict(epochs=q["epochs"], batch_size=q["batch_size"], lr=q["lr"],
              warmup_fraction=q["warmup_fraction"], seed=cfg["seed"], max_minutes=q["max_minutes"],
              shuffle_images=q["shuffle_images"])
    kw.update(over)
    return GenTrainConfig(**kw)


def _save_optimizer(path: Path, opt: Adam) -> None:
    arrays = {f"m.{k}": v for k, v in opt.state.m.items()}
    arrays.update({f"v.{k}": v for k, v in opt.state.v.items()})
    arrays["step"] = np.array([opt.state.step], dtype=np.int64)
    save_checkpoint(path, arrays)


def _load_optimizer(path: Path, opt: Adam) -> None:
    arrays = load_checkpoint(path)
    for k in opt.state.m:
        opt.state.m[k] = arrays[f"m.{k}"].astype(opt.state.m[k].dtype)
        opt.state.v[k] = arrays[f"v.{k}"].astype(opt.state.v[k].dtype)
    opt.state.step = int(arrays["step"][0])


def run_grounding_warmup(cfg: dict, data: Data, examples: Examples, log_path: Path) -> dict:
    """Caption warm-up standing in for a pretrained vision-language checkpoint."""
    prompts = grounding_prompts(data.scenes, cfg["data"]["P"], min(cfg["K"], 2), cfg["seed"])
    q = cfg["qa_train"]
    result = train_generator(examples.model, examples, prompts,
                             qa_train_config(cfg, epochs=q["grounding_epochs"], max_minutes=q["max_minutes"] / 2))
    _write_csv(log_path, ["step", "loss"], [[str(i + 1), f"{v:.6f}"] for i, v in enumerate(result.step_losses)])
    return {"warmup_prompts": len(prompts), "warmup_steps": result.steps,
            "warmup_epoch_losses": [h["loss"] for h in result.history]}


def train_qa(cfg: dict, variant: str = "mibart", resume: bool = False) -> dict:
    if variant not in QA_VARIANTS:
        raise ConfigError(f"unknown QA variant {variant!r}; expected one of {sorted(QA_VARIANTS)}")
    wd = Workdir(cfg["workdir"])
    data = load_data(wd)
    out = wd.stage_dir("qa")
    model = MIBart(generator_config(cfg, data.tok))
    tcfg = qa_train_config(cfg)
    opt = Adam(model.parameters(), lr=tcfg.lr)
    start_step, prior = 0, []
    ckpt, opt_path, log_path = out / f"{variant}.ckpt", out / f"{variant}.opt", out / f"{variant}_log.csv"
    if resume:
        model.load(wd.need(ckpt, f"train train-qa --variant {variant}"))
        _load_optimizer(wd.need(opt_path, f"train train-qa --variant {variant}"), opt)
        start_step = opt.state.step
        with open(log_path, newline="", encoding="utf-8") as fh:
            prior = [row for row in csv.reader(fh)][1:]
    examples = Examples(model, data.tok, data.bank, QA_VARIANTS[variant])
    warmup = {}
    if not resume and QA_VARIANTS[variant] != "question" and cfg["qa_train"]["grounding_epochs"] > 0:
        warmup = run_grounding_warmup(cfg, data, examples, out / f"{variant}_warmup_log.csv")
    # Training always uses the gold relevant images as context.
    result = train_generator(model, examples, data.split("train"), tcfg, start_step=start_step, opt=opt)
    model.save(ckpt)
    _save_optimizer(opt_path, opt)
    rows = prior + [[str(start_step + i + 1), f"{v:.6f}"] for i, v in enumerate(result.step_losses)]
    _write_csv(log_path, ["step", "loss"], rows)
    summary = {"variant": variant, "steps": result.steps,
               "epoch_losses": [h["loss"] for h in result.history], **warmup}
    _write_json(out / f"{variant}.json", summary)
    return summary


def load_generator(cfg: dict, wd: Workdir, data: Data, variant: str) -> MIBart:
    model = MIBart(generator_config(cfg, data.tok))
    model.load(wd.need(wd.path("qa", f"{variant}.ckpt"), f"train train-qa --variant {variant}"))
    return model


# -- baselines ------------------------------------------------------------------

def train_baselines(cfg: dict) -> dict:
    wd = Workdir(cfg["workdir"])
    data = load_data(wd)
    out = wd.stage_dir("baselines")
    train = data.split("train")
    pop = bl.PopularityBaseline.fit(train)
    _write_json(out / "popularity.json", pop.to_json())
    b = cfg["baselines"]
    vocab = bl.AnswerVocabulary.build(train, b["answer_vocab"])
    _write_json(out / "vqa_vocab.json", vocab.answers)
    model = bl.AggregateVQA(relevance_config(cfg, data.tok), len(vocab), cfg["K"])
    runner = bl.AggregateVQABaseline(model, vocab, data.tok, data.table)
    res = runner.train(train, bl.VQATrainConfig(epochs=b["epochs"], batch_size=b["batch_size"], lr=b["lr"],
                                                seed=cfg["seed"], max_minutes=b["max_minutes"]))
    model.save(out / "vqa.ckpt")
    _write_csv(out / "vqa_log.csv", ["epoch", "loss"],
               [(h["epoch"], f"{h['loss']:.6f}") for h in res.history])
    return {"global": pop.global_answer, "by_category": pop.by_category, "vqa_skipped": res.skipped,
            "vqa_steps": res.steps}


def load_vqa(cfg: dict, wd: Workdir, data: Data) -> bl.AggregateVQABaseline:
    vocab_path = wd.need(wd.path("baselines", "vqa_vocab.json"), "train train-baselines")
    vocab = bl.AnswerVocabulary(json.loads(vocab_path.read_text(encoding="utf-8")))
    model = bl.AggregateVQA(relevance_config(cfg, data.tok), len(vocab), cfg["K"])
    model.load(wd.need(wd.path("baselines", "vqa.ckpt"), "train train-baselines"))
    return bl.AggregateVQABaseline(model, vocab, data.tok, data.table)


# -- evaluation -----------------------------------------------------------------

def predict(cfg: dict, wd: Workdir, data: Data, method: str, records: Sequence[QARecord],
            contexts: dict) -> dict[str, str]:
    if method in QA_VARIANTS:
        model = load_generator(cfg, wd, data, method)
        return generate_answers(model, Examples(model, data.tok, data.bank, QA_VARIANTS[method]),
                                records, contexts)
    if method.startswith("popularity"):
        path = wd.need(wd.path("baselines", "popularity.json"), "train train-baselines")
        pop = bl.PopularityBaseline.from_json(json.loads(path.read_text(encoding="utf-8")))
        return pop.predict(records, per_category=method == "popularity-category")
    if method == "aggregate-vqa":
        return load_vqa(cfg, wd, data).predict(records, contexts)
    raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")


def contexts_for(cfg: dict, wd: Workdir, data: Data, mode: str, split: str, K: int | None = None) -> dict:
    records = data.split(split)
    if mode == "oracle":
        return {r.qid: list(r.relevant_ids) for r in records}
    if mode == "retrieved":
        return retrieved_contexts(cfg, wd, data, split, K)
    raise ConfigError(f"unknown eval mode {mode!r}; expected oracle or retrieved")


def run_eval(cfg: dict, mode: str, method: str, split: str = "test") -> dict:
    wd = Workdir(cfg["workdir"])
    data = load_data(wd)
    records = data.split(split)
    contexts = contexts_for(cfg, wd, data, mode, split)
    answers = predict(cfg, wd, data, method, records, contexts)
    report = evaluate(records, answers, contexts)
    report.update({"method": method, "mode": mode, "split": split})
    out = wd.stage_dir(os.path.join("eval", mode))
    _write_json(out / f"{method}.json", report)
    with open(out / f"{method}_predictions.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps({"qid": r.qid, "method": method, "answer": answers[r.qid]}) + "\n")
    return report


# -- ablations ------------------------------------------------------------------

def _fxa(records: Sequence[QARecord], answers: dict) -> float:
    return f_times_a((e.accuracy, e.fluency) for e in score_answers(records, answers))


def nested_pools(records: Sequence[QARecord], scenes: Sequence[Scene], sizes: Sequence[int],
                 seed: int) -> dict[int, dict[str, list[str]]]:
    """Pools of every size per question; a smaller pool is a subset of a larger one."""
    index = SceneIndex(scenes)
    biggest = max(sizes)
    pools: dict[int, dict[str, list[str]]] = {n: {} for n in sizes}
    for i, r in enumerate(records):
        rng = np.random.default_rng([seed, 0x9001, i])
        full = select_negatives(r, index, biggest - len(r.relevant_ids), rng)
        negs = [x for x in full if x not in r.relevant_ids]
        for n in sizes:
            chosen = list(r.relevant_ids) + negs[:n - len(r.relevant_ids)]
            pools[n][r.qid] = [chosen[int(k)] for k in rng.permutation(len(chosen))]
    return pools


def ablate_pool_size(cfg: dict) -> dict:
    wd = Workdir(cfg["workdir"])
    data = load_data(wd)
    model = load_relevance(cfg, wd, data)
    gen = None
    if wd.path("qa", "mibart.ckpt").exists():
        gen = load_generator(cfg, wd, data, "mibart")
    a = cfg["ablate"]
    records = data.split("test")
    if a["n_questions"]:
        records = records[:a["n_questions"]]
    rows = []
    for seed in a["seeds"]:
        pools = nested_pools(records, data.scenes, a["pool_sizes"], seed)
        for n in a["pool_sizes"]:
            dump = retrieve(model, data.tok, records, data.table, cfg["K"], pools=pools[n])
            row = {"seed": seed, "pool_size": n, "retrieval_f1": retrieval_f1(records, dump)}
            if gen is not None:
                ctx = {d["qid"]: d["chosen_ids"] for d in dump}
                answers = generate_answers(gen, Examples(gen, data.tok, data.bank), records, ctx)
                row["fxa"] = _fxa(records, answers)
            rows.append(row)
    result = {"sweep": "pool-size", "rows": rows}
    _write_json(wd.stage_dir("ablate") / "pool-size.json", result)
    return result


def ablate_top1_vs_topk(cfg: dict) -> dict:
    wd = Workdir(cfg["workdir"])
    data = load_data(wd)
    gen = load_generator(cfg, wd, data, "mibart")
    records = data.split("test")
    multi = [r for r in records if len(r.relevant_ids) > 1]
    rows = []
    for k in (1, cfg["K"]):
        ctx = retrieved_contexts(cfg, wd, data, "test", k)
        answers = generate_answers(gen, Examples(gen, data.tok, data.bank), multi, ctx)
        f1 = float(np.mean([retrieval_prf1(ctx[r.qid], r.relevant_ids)[2] for r in multi]))
        rows.append({"top_k": k, "retrieval_f1": f1, "fxa": _fxa(multi, answers),
                     "n_questions": len(multi)})
    result = {"sweep": "top1-vs-topk", "rows": rows}
    _write_json(wd.stage_dir("ablate") / "top1-vs-topk.json", result)
    return result


def ablate_no_captions(cfg: dict) -> dict:
    """Finetune from the pretrained encoder with and without captions appended."""
    wd = Workdir(cfg["workdir"])
    data = load_data(wd)
    rows = []
    for with_caps in (True, False):
        model = load_relevance(cfg, wd, data, "pretrain")
        res = run_finetune(cfg, data, model, with_caps)
        caps = data.captions() if with_caps else None
        test = data.split("test")
        dump = retrieve(model, data.tok, test, data.table, cfg["K"], caps)
        rows.append({"captions": with_caps, "val_f1": res.best_f1, "test_f1": retrieval_f1(test, dump)})
    result = {"sweep": "no-captions", "rows": rows}
    _write_json(wd.stage_dir("ablate") / "no-captions.json", result)
    return result


ABLATIONS = {"pool-size": ablate_pool_size, "top1-vs-topk": ablate_top1_vs_topk,
             "no-captions": ablate_no_captions}


# -- report ---------------------------------------------------------------------

def build_report(cfg: dict) -> str:
    wd = Workdir(cfg["workdir"])
    stats_path = wd.need(wd.path("data", "stats.json"), "gen-data")
    stats = json.loads(stats_path.read_text(encoding="utf-8"))
    lines = ["# RetVQA desk run", "",
             f"questions: {stats['n_questions']}, scenes: {stats.get('n_scenes')}, "
             f"avg relevant: {stats['avg_relevant_per_question']:.2f}, "
             f"avg irrelevant: {stats['avg_irrelevant_per_question']:.2f}", ""]
    summary: dict = {"stats": stats, "eval": {}, "ablate": {}}
    ft = wd.path("rel", "finetune_log.csv")
    if ft.exists():
        with open(ft, newline="", encoding="utf-8") as fh:
            epochs = list(csv.DictReader(fh))
        best = max(float(e["val_f1"]) for e in epochs)
        lines += [f"relevance: best val F1@{cfg['K']} = {best:.4f}", ""]
        summary["relevance_best_val_f1"] = best
    table, details = [], []
    for mode in ("oracle", "retrieved"):
        d = wd.path("eval", mode)
        if not d.exists():
            continue
        for p in sorted(d.glob("*.json")):
            rep = json.loads(p.read_text(encoding="utf-8"))
            summary["eval"][f"{mode}/{rep['method']}"] = rep["qa"]
            table.append(f"| {rep['method']} | {mode} | {rep['qa']['accuracy']:.3f} | "
                         f"{rep['qa']['fluency']:.3f} | {rep['qa']['fxa']:.3f} |")
            details += [format_report(rep, f"{rep['method']} ({mode})"), ""]
    if table:
        lines += ["| method | context | Acc | F (proxy) | FxA |", "|---|---|---|---|---|"] + table + [""]
    lines += details
    for name in ABLATIONS:
        p = wd.path("ablate", f"{name}.json")
        if p.exists():
            res = json.loads(p.read_text(encoding="utf-8"))
            summary["ablate"][name] = res["rows"]
            lines.append(f"ablation {name}:")
            lines += ["  " + ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                                       for k, v in row.items()) for row in res["rows"]]
            lines.append("")
    text = "\n".join(lines).rstrip() + "\n"
    wd.path("report.md").write_text(text, encoding="utf-8")
    _write_json(wd.path("report.json"), summary)
    return text
