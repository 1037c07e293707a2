"""End-to-end acceptance checks, one test per criterion.

The pipeline fixture runs the full desk configuration once (data, relevance
pretraining and finetuning, QA training, evaluation, ablations); expect the
module to take about 20 minutes on one CPU core.
"""

import copy
import time

import numpy as np
import pytest

import retvqa.numerics as nx
from retvqa import pipeline
from retvqa.config import load_config
from retvqa.curation import (
    CATEGORIES,
    CurationConfig,
    QARecord,
    SceneIndex,
    corpus_texts,
    curate,
    dataset_stats,
    validate_record,
)
from retvqa.generator import (
    Examples,
    MIBart,
    MIBartConfig,
    collate,
    export_attention,
    gen_loss,
    generate_answers,
    pad_targets,
)
from retvqa.metrics import accuracy, classify_error, f_times_a, fluency_proxy, retrieval_prf1
from retvqa.relevance import RelevanceConfig, RelevanceModel, features_batch, relevance_loss
from retvqa.synthworld import ImageFeatures, encode_scene, load_feature_bank, save_features
from retvqa.tokenizer import Tokenizer


# -- 1 ------------------------------------------------------------------------

def _op_checks(rng):
    T = lambda *shape, lo=None: nx.Tensor(rng.normal(size=shape) if lo is None
                                          else rng.uniform(lo, 1 - lo, size=shape), requires_grad=True)
    a, b, w = T(3, 4), T(3, 4), rng.normal(size=(3, 4))
    A, B = T(2, 3, 4), T(2, 4, 5)
    W, bias = T(4, 6), T(6)
    g, beta = T(4), T(4)
    E = T(7, 4)
    q, k, v = T(1, 2, 3, 4), T(1, 2, 5, 4), T(1, 2, 5, 4)
    mask = np.array([True, True, True, False, True])[None, None, None, :]
    p = T(5, lo=0.05)
    yield "add/sub/mul/div", lambda: (((a + b) * a - b) * (nx.sigmoid(b) + 1.0) / 2.0 * w).sum(), [a, b]
    yield "matmul", lambda: (nx.matmul(A, B) * rng_fixed(2, 3, 5)).sum(), [A, B]
    yield "linear", lambda: (nx.linear(a, W, bias) * rng_fixed(3, 6)).sum(), [a, W, bias]
    yield "activations", lambda: ((nx.gelu(a) + nx.tanh(b) + nx.relu(a - 0.1) + nx.sigmoid(b)) * w).sum(), [a, b]
    yield "layer_norm", lambda: (nx.layer_norm(a, g, beta) * w).sum(), [a, g, beta]
    yield "softmax", lambda: (nx.softmax(a, axis=-1) * w).sum() + (nx.log_softmax(b) * w).sum(), [a, b]
    yield "attention", lambda: (nx.scaled_dot_attention(q, k, v, mask)[0] * rng_fixed(1, 2, 3, 4)).sum(), [q, k, v]
    yield "embedding", lambda: (nx.embedding(E, np.array([[0, 3, 3], [6, 1, 0]])) * rng_fixed(2, 3, 4)).sum(), [E]
    yield "shape ops", lambda: (nx.concat([a, b], axis=0).reshape(4, 6).transpose(1, 0)[1:4] * rng_fixed(3, 4)).sum() \
        + nx.mean(a, axis=0).sum() + nx.tsum(b, axis=1).sum(), [a, b]
    yield "cross_entropy", lambda: nx.cross_entropy_logits(A, np.array([[0, 1, 2], [3, 0, 1]]), ignore_id=2), [A]
    yield "bce", lambda: nx.bce(p, [1, 0, 1, 1, 0]), [p]


_FIXED = {}


def rng_fixed(*shape):
    if shape not in _FIXED:
        _FIXED[shape] = np.random.default_rng(len(_FIXED) + 100).normal(size=shape)
    return _FIXED[shape]


def test_criterion_01_gradients(criterion):
    start = time.perf_counter()
    worst, names = 0.0, []
    with nx.default_dtype(np.float64):
        rng = np.random.default_rng(0)
        for name, f, inputs in _op_checks(rng):
            e = nx.gradcheck(f, inputs)
            worst = max(worst, e)
            names.append(name)
        rel = RelevanceModel(RelevanceConfig(vocab_size=10, d=8, n_layers=1, n_heads=1, P=3, d_in=5,
                                             m_max=4, caption_max=2))
        fa = ImageFeatures("a", rng.normal(size=(3, 5)), rng.uniform(size=(3, 4)), 3)
        fb = ImageFeatures("b", rng.normal(size=(3, 5)), rng.uniform(size=(3, 4)), 2)
        batch = features_batch(rel, [7, 8], [fa, fb])
        e_rel = nx.gradcheck(lambda: relevance_loss(rel(batch), [1.0, 0.0]),
                             list(rel.parameters().values()), joint=True)
        gen = MIBart(MIBartConfig(vocab_size=10, d=8, n_enc_layers=1, n_dec_layers=1, n_heads=1, K=2, P=3,
                                  d_in=5, m_max=4, max_answer_len=4))
        inp = collate([gen.build_input([7, 8], [fa, fb]), gen.build_input([9], [fb])])
        ans = pad_targets([[Tokenizer.BOS, 7, 9, Tokenizer.EOS], [Tokenizer.BOS, 8, Tokenizer.EOS]])
        e_gen = nx.gradcheck(lambda: gen_loss(gen, inp, ans), list(gen.parameters().values()), joint=True)
    elapsed = time.perf_counter() - start
    worst_all = max(worst, e_rel, e_gen)
    ok = worst_all < 1e-4 and elapsed < 60
    criterion(1, ok, f"{len(names)} op groups max rel err {worst:.2e}; relevance {e_rel:.2e}; "
                     f"MI-BART {e_gen:.2e}; {elapsed:.1f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------

def test_criterion_02_curation(criterion):
    start = time.perf_counter()
    scenes, recs = curate(CurationConfig(n_questions=2000))
    index = SceneIndex(scenes)
    bad = [r.qid for r in recs if validate_record(r, index)]
    stats = dataset_stats(recs)
    table = stats["category_answer_type"]
    pattern = (table["object-attributes"]["open"] == 0 and table["relation-based"]["binary"] == 0
               and table["object-attributes"]["binary"] > 0 and table["relation-based"]["open"] > 0
               and all(table[c]["open"] > 0 and table[c]["binary"] > 0 for c in ("color", "shape", "count"))
               and set(table) == set(CATEGORIES))
    elapsed = time.perf_counter() - start
    ok = (len(recs) == 2000 and not bad and stats["avg_relevant_per_question"] == 2.0 and pattern
          and elapsed < 30)
    criterion(2, ok, f"{len(recs)} records, {len(bad)} invalid, avg relevant "
                     f"{stats['avg_relevant_per_question']}, pattern {'ok' if pattern else 'wrong'}, {elapsed:.1f}s")
    assert ok


# -- 3 ------------------------------------------------------------------------

def test_criterion_03_metrics(criterion):
    r_bin = QARecord("q", "Q?", "relation-based", "binary", "yes", "", ["a", "b"], ["a", "b"])
    r_open = QARecord("q", "Q?", "color", "open", "red and yellow", "", ["a", "b"], ["a", "b"])
    r_num = QARecord("q", "Q?", "count", "open", "5", "", ["a", "b"], ["a", "b"])
    checks = [
        retrieval_prf1({"a", "c"}, {"a", "b"}) == (0.5, 0.5, 0.5),
        retrieval_prf1({"a", "b"}, {"a", "b"}) == (1.0, 1.0, 1.0),
        retrieval_prf1({"c", "d"}, {"a", "b"}) == (0.0, 0.0, 0.0),
        accuracy("Yes, cow and sheep eat the same thing", r_bin) == 1,
        accuracy("yes and no", r_bin) == 0,
        accuracy("No.", QARecord("q", "Q?", "color", "binary", "no", "", ["a", "b"], ["a", "b"])) == 1,
        accuracy("The color is Red and yellow, respectively", r_open) == 1,
        accuracy("yellow and red", r_open) == 0,
        accuracy("there are 15 cows", r_num) == 0,
        fluency_proxy("a cow eats grass", "A cow eats grass.") == 1.0,
        fluency_proxy("a b c d e", "f g h i j") < 0.1,
        f_times_a([(1, 0.8)] * 4) == pytest.approx(0.8),
        f_times_a([(0, 0.3), (0, 0.9)]) == 0.0,
        f_times_a([(1, 0.6), (0, 0.9)]) == pytest.approx(0.3),
        classify_error(r_bin, {"a", "c"}, 0) == "partial-retrieval",
        classify_error(r_bin, {"c", "d"}, 0) == "incorrect-retrieval",
        classify_error(r_bin, {"a", "b"}, 0) == "incorrect-reasoning",
    ]
    _, recs = curate(CurationConfig(n_questions=2000))
    full_ok = sum(accuracy(r.full_answer, r) for r in recs)
    ok = all(checks) and full_ok == len(recs)
    criterion(3, ok, f"{sum(checks)}/{len(checks)} examples exact; accuracy(full_answer)=1 on "
                     f"{full_ok}/{len(recs)}")
    assert ok


# -- pipeline-backed criteria -----------------------------------------------------

@pytest.fixture(scope="module")
def run(tmp_path_factory):
    wd = tmp_path_factory.mktemp("accept")
    cfg = load_config(workdir=wd)
    out = {"cfg": cfg, "wd": wd, "times": {}}

    def timed(name, fn, *args):
        t = time.perf_counter()
        res = fn(*args)
        out["times"][name] = time.perf_counter() - t
        return res

    out["stats"] = timed("gen-data", pipeline.gen_data, cfg)
    out["pretrain"] = timed("pretrain-rel", pipeline.train_pretrain_rel, cfg)
    out["finetune"] = timed("finetune-rel", pipeline.train_finetune_rel, cfg)
    timed("train-qa", pipeline.train_qa, cfg, "mibart")
    timed("train-qa question-only", pipeline.train_qa, cfg, "question-only")
    for mode in ("oracle", "retrieved"):
        for method in ("mibart", "question-only"):
            out[f"{mode}/{method}"] = timed(f"eval {mode} {method}", pipeline.run_eval, cfg, mode, method)
    out["pool"] = timed("ablate pool-size", pipeline.ablate_pool_size, cfg)
    out["top1"] = timed("ablate top1-vs-topk", pipeline.ablate_top1_vs_topk, cfg)
    return out


def test_criterion_04_retrieval(run, criterion):
    ft = run["finetune"]
    minutes = (run["times"]["pretrain-rel"] + run["times"]["finetune-rel"]) / 60
    ok = ft["best_val_f1"] >= 0.95 and minutes <= 10
    criterion(4, ok, f"best val F1@2 {ft['best_val_f1']:.4f} (epoch {ft['best_epoch']}); "
                     f"pretrain+finetune {minutes:.1f} min")
    assert ok


def test_criterion_05_pool_size(run, criterion):
    rows = run["pool"]["rows"]
    sizes = run["cfg"]["ablate"]["pool_sizes"]
    curves = {}
    for r in rows:
        curves.setdefault(r["seed"], {})[r["pool_size"]] = r["retrieval_f1"]
    ok = True
    for seed, c in curves.items():
        seq = [c[n] for n in sizes]
        ok &= all(b <= a + 0.01 for a, b in zip(seq, seq[1:]))
    desc = "; ".join(f"seed {s}: " + " > ".join(f"{c[n]:.3f}" for n in sizes) for s, c in curves.items())
    criterion(5, ok and len(curves) == 3, desc)
    assert ok and len(curves) == 3


def test_criterion_06_oracle_vs_retrieved(run, criterion):
    o, r = run["oracle/mibart"]["qa"]["fxa"], run["retrieved/mibart"]["qa"]["fxa"]
    ok = o >= r - 0.02
    criterion(6, ok, f"F x A oracle {o:.4f} vs retrieved {r:.4f}")
    assert ok


def test_criterion_07_multi_image_necessity(run, criterion):
    rows = {row["top_k"]: row["fxa"] for row in run["top1"]["rows"]}
    k = run["cfg"]["K"]
    mib, qo = run["retrieved/mibart"]["qa"]["fxa"], run["retrieved/question-only"]["qa"]["fxa"]
    ok = rows[k] - rows[1] >= 0.05 and mib - qo >= 0.05
    criterion(7, ok, f"top-{k} {rows[k]:.4f} vs top-1 {rows[1]:.4f}; MI-BART {mib:.4f} vs "
                     f"question-only {qo:.4f}")
    assert ok


# -- 8, 9 -------------------------------------------------------------------------

def test_criterion_08_overfit(criterion):
    scenes, recs = curate(CurationConfig(n_scenes=400, n_questions=64, seed=11))
    tok = Tokenizer.build(corpus_texts(recs, scenes))
    bank = {s.scene_id: encode_scene(s) for s in scenes}
    sub = recs[:32]
    model = MIBart(MIBartConfig(vocab_size=len(tok)))
    ex = Examples(model, tok, bank)
    inp = ex.inputs(sub, [r.relevant_ids for r in sub])
    target = pad_targets([ex.answer(r) for r in sub])
    opt = nx.Adam(model.parameters(), lr=1e-3)
    exact, step = 0, 0
    while step < 2000 and exact < 30:
        for _ in range(100):
            opt.zero_grad()
            gen_loss(model, inp, target).backward()
            opt.step()
            step += 1
        answers = generate_answers(model, ex, sub)
        exact = sum(answers[r.qid] == r.full_answer for r in sub)
    ok = exact >= 30
    criterion(8, ok, f"{exact}/32 exact after {step} steps")
    assert ok


def test_criterion_09_decoder_consistency(criterion):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = MIBart(MIBartConfig(vocab_size=30, d=16, n_enc_layers=2, n_dec_layers=2, n_heads=4, K=2, P=4,
                                d_in=6, m_max=8, max_answer_len=10, seed=seed))
        imgs = [ImageFeatures(f"x{k}", rng.normal(size=(4, 6)).astype(np.float32),
                              rng.uniform(size=(4, 4)).astype(np.float32), int(rng.integers(1, 5)))
                for k in range(int(rng.integers(1, 3)))]
        inp = collate([m.build_input(rng.integers(7, 30, size=int(rng.integers(1, 9))).tolist(), imgs)])
        T = int(rng.integers(1, 12))
        prefix = np.concatenate([[Tokenizer.BOS], rng.integers(7, 30, size=T - 1)])[None]
        with nx.no_grad():
            z = m.encode(inp)
            full = m.decode(z, inp.valid, prefix).data[0]
            state = m.start_incremental(z, inp.valid)
            inc = np.stack([state.step(prefix[:, t]).data[0] for t in range(T)])
        worst = max(worst, float(np.abs(full - inc).max()))
    ok = worst < 1e-5
    criterion(9, ok, f"max |teacher-forced - incremental| over 100 inputs = {worst:.2e}")
    assert ok


# -- 10, 11 -----------------------------------------------------------------------

def test_criterion_10_reproducibility(run, criterion, tmp_path):
    cfg2 = copy.deepcopy(run["cfg"])
    cfg2["workdir"] = str(tmp_path / "again")
    pipeline.gen_data(cfg2)
    files = ("dataset.jsonl", "scenes.jsonl", "features.bin", "tokenizer.json", "stats.json")
    same_data = all((run["wd"] / "data" / f).read_bytes() == (tmp_path / "again" / "data" / f).read_bytes()
                    for f in files)
    report = run["wd"] / "eval" / "oracle" / "mibart.json"
    before = report.read_bytes()
    pipeline.run_eval(run["cfg"], "oracle", "mibart")
    same_eval = report.read_bytes() == before
    ok = same_data and same_eval
    criterion(10, ok, f"dataset files identical: {same_data}; metric JSON identical: {same_eval}")
    assert ok


def test_criterion_11_round_trips(run, criterion, tmp_path):
    cfg, wd = run["cfg"], run["wd"]
    data = pipeline.load_data(pipeline.Workdir(wd))
    model = pipeline.load_generator(cfg, pipeline.Workdir(wd), data, "mibart")
    model.save(tmp_path / "a.ckpt")
    again = MIBart(pipeline.generator_config(cfg, data.tok))
    again.load(tmp_path / "a.ckpt")
    again.save(tmp_path / "b.ckpt")
    ckpt_ok = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes() == \
        (wd / "qa" / "mibart.ckpt").read_bytes()
    feats_path = wd / "data" / "features.bin"
    bank = load_feature_bank(feats_path)
    save_features(tmp_path / "f.bin", list(bank.values()))
    feat_ok = (tmp_path / "f.bin").read_bytes() == feats_path.read_bytes()
    worst = 0.0
    for r in data.split("test")[:20]:
        rows = export_attention(model, data.tok, r.qid, r.question, [data.bank[i] for i in r.relevant_ids])
        for row in rows:
            worst = max(worst, abs(sum(w for _, w in row["weights"]) - 1.0))
    ok = ckpt_ok and feat_ok and worst < 1e-6
    criterion(11, ok, f"checkpoint bitwise {ckpt_ok}; features bitwise {feat_ok}; "
                      f"attention row-sum error {worst:.1e}")
    assert ok
