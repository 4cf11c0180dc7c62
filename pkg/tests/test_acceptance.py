"""Acceptance suite: one test per release criterion.

Criteria 6-9 share a single end-to-end training run (session fixture);
everything else is exact-oracle or small-scale and runs in seconds.
"""

import itertools
import struct
import time

import numpy as np
import pytest

from modbank import checkpoint as ckpt
from modbank import evalqa
from modbank import tensor as T
from modbank.aggregator import Aggregator
from modbank.amortizer import Modulation
from modbank.bank import (
    BadMagicError as BankBadMagic,
    BadVersionError as BankBadVersion,
    MemoryBank,
    MemoryInstrument,
    TruncatedBankError,
    hierarchical_aggregate,
)
from modbank.config import RunConfig
from modbank.data import gen_synthetic_corpus
from modbank.model import ModelBundle
from modbank.trainer import TrainConfig, meta_train, pretrain_base, training_step


# -- criterion 1: gradient correctness ----------------------------------------


def test_criterion_1_full_pipeline_gradients_match_finite_differences():
    """Directional derivatives of the amortize -> aggregate -> expand ->
    answer-NLL pipeline match central finite differences (rel err < 1e-4)
    for every trainable network, on a d=16, L=2, T=2 model."""
    t0 = time.time()
    cfg = RunConfig(d_model=16, n_layers=2, n_heads=2, n_tokens=2)
    bundle = ModelBundle(cfg, seed=0)
    bundle.lm.freeze()
    corpus = gen_synthetic_corpus(seed=1, n_docs=3, split="train")
    docs = corpus.documents
    qa = [corpus.qa_for(d.doc_id)[0] for d in docs]

    def loss_value():
        return training_step(bundle, docs, qa, np.ones(3, dtype=bool))

    loss = loss_value()
    loss.backward()
    grads = {
        name: [None if p.grad is None else p.grad.copy() for p in net.params()]
        for name, net in (
            ("amortizer", bundle.amortizer),
            ("expander", bundle.expander),
            ("qencoder", bundle.qencoder),
            ("aggregator", bundle.aggregator),
        )
    }
    rng = np.random.default_rng(7)
    h = 1e-6
    for name, net in (
        ("amortizer", bundle.amortizer),
        ("expander", bundle.expander),
        ("qencoder", bundle.qencoder),
        ("aggregator", bundle.aggregator),
    ):
        params = net.params()
        directions = [rng.normal(size=p.shape) for p in params]
        analytic = sum(
            0.0 if g is None else float((g * d).sum())
            for g, d in zip(grads[name], directions)
        )
        originals = [p.data.copy() for p in params]
        for p, d in zip(params, directions):
            p.data = p.data + h * d
        lp = float(loss_value().data)
        for p, o, d in zip(params, originals, directions):
            p.data = o - h * d
        lmn = float(loss_value().data)
        for p, o in zip(params, originals):
            p.data = o
        fd = (lp - lmn) / (2 * h)
        rel = abs(analytic - fd) / max(abs(fd), 1e-12)
        assert rel < 1e-4, f"{name}: analytic {analytic} vs fd {fd} (rel {rel})"
    assert time.time() - t0 < 120.0


# -- criterion 2: backpropagation-dropout unbiasedness -------------------------


def test_criterion_2_dropout_gradient_unbiased_and_forward_invariant():
    """Probability-weighted mean of the amortizer gradient over all 2^3
    masks equals (1-p) x the full gradient within 1e-9 for p in
    {0.25, 0.5, 0.75}; the forward loss is mask-independent to 0 ulps."""
    cfg = RunConfig(d_model=16, n_layers=2, n_heads=2, n_tokens=2)
    bundle = ModelBundle(cfg, seed=0)
    bundle.lm.freeze()
    corpus = gen_synthetic_corpus(seed=2, n_docs=3, split="train")
    docs = corpus.documents
    qa = [corpus.qa_for(d.doc_id)[0] for d in docs]

    def amort_grad():
        parts = []
        for p in bundle.amortizer.params():
            parts.append(
                np.zeros(p.data.size) if p.grad is None else p.grad.ravel().copy()
            )
            p.grad = None
        for p in bundle.trainable_params():
            p.grad = None
        return np.concatenate(parts)

    training_step(bundle, docs, qa, np.ones(3, dtype=bool)).backward()
    full = amort_grad()

    masks = list(itertools.product([False, True], repeat=3))
    losses = []
    per_mask = []
    for mask in masks:
        loss = training_step(bundle, docs, qa, np.array(mask))
        loss.backward()
        losses.append(float(loss.data))
        per_mask.append(amort_grad())
    assert len(set(losses)) == 1  # identical to 0 ulps

    for p in (0.25, 0.5, 0.75):
        expected = np.zeros_like(full)
        for mask, grad in zip(masks, per_mask):
            prob = np.prod([(1 - p) if keep else p for keep in mask])
            expected += prob * grad
        assert np.abs(expected - (1 - p) * full).max() < 1e-9


# -- criterion 3: permutation invariance ---------------------------------------


def test_criterion_3_aggregation_is_permutation_invariant():
    """Every ordering of a 4-element bank aggregates to the same output
    within max-abs 1e-9."""
    rng = np.random.default_rng(3)
    agg = Aggregator(16, 2, seed=3)
    q = T.Tensor(rng.normal(size=(2, 16)))
    mods = [Modulation(tokens=T.Tensor(rng.normal(size=(2, 16)))) for _ in range(4)]
    ref = agg.aggregate(q, mods)[0].tokens.data
    for perm in itertools.permutations(range(4)):
        out = agg.aggregate(q, [mods[i] for i in perm])[0].tokens.data
        assert np.abs(out - ref).max() < 1e-9


# -- criterion 4: hierarchical aggregation -------------------------------------


def test_criterion_4_hierarchical_aggregation_trace_and_memory():
    """(a) bit-equality with flat aggregation when all tokens fit in one
    group; (b) K=5, T=4, M=8 runs exactly 6 calls over 3 levels; (c) peak
    attention elements <= T*M hierarchically and = K*T^2 flat."""
    rng = np.random.default_rng(4)
    agg = Aggregator(16, 2, seed=4)
    q = T.Tensor(rng.normal(size=(4, 16)))

    def mods(k):
        return [
            Modulation(tokens=T.Tensor(rng.normal(size=(4, 16)))) for _ in range(k)
        ]

    # (a) K*T <= M: single group, bit-equal to flat aggregation
    batch = mods(3)
    flat, _ = agg.aggregate(q, batch)
    hier, _ = hierarchical_aggregate(agg, q, batch, m_tokens=16)
    assert (flat.tokens.data == hier.tokens.data).all()

    # (b) K=5, T=4, M=8: groups of 2 give 3 + 2 + 1 = 6 calls, 3 levels
    inst = MemoryInstrument()
    hierarchical_aggregate(agg, q, mods(5), m_tokens=8, instrument=inst)
    assert inst.total_aggregation_calls == 6
    assert inst.levels_executed == 3

    # (c) peak attention <= T*M for every tested (K, M); flat = K*T^2
    for k, m in ((5, 8), (16, 8), (64, 16), (33, 12)):
        inst = MemoryInstrument()
        hierarchical_aggregate(agg, q, mods(k), m_tokens=m, instrument=inst)
        assert inst.peak_attention_elements <= 4 * m
    inst = MemoryInstrument()
    agg.aggregate(q, mods(64), instrument=inst)
    assert inst.peak_attention_elements == 64 * 4 * 4  # 1024, vs 64 at M=16


# -- criterion 5: nearest-neighbor reduction oracle -----------------------------


def test_criterion_5_nn_average_matches_exhaustive_argmin():
    """Every merge chosen by the nearest-neighbor reduction equals the
    exhaustive argmin over all pairs (banks up to size 50), including the
    insertion-order tie-break."""
    for seed, size in ((0, 10), (1, 25), (2, 50)):
        rng = np.random.default_rng(seed)
        bank = MemoryBank(2, 4)
        shadow = []
        for i in range(size):
            tok = rng.normal(size=(2, 4))
            bank.insert(f"d{i}", Modulation(tokens=T.Tensor(tok.copy())))
            shadow.append([f"d{i}", tok, i])
        target = size // 2
        while len(shadow) > target:
            best = None
            for i, j in itertools.combinations(range(len(shadow)), 2):
                a, b = shadow[i][1].ravel(), shadow[j][1].ravel()
                na, nb = np.linalg.norm(a), np.linalg.norm(b)
                dist = 1.0 if na == 0 or nb == 0 else 1.0 - float(a @ b) / (na * nb)
                key = (dist, shadow[i][2], shadow[j][2])
                if best is None or key < best[0]:
                    best = (key, i, j)
            _, i, j = best
            shadow[i] = [
                f"avg({shadow[i][0]}+{shadow[j][0]})",
                0.5 * (shadow[i][1] + shadow[j][1]),
                shadow[i][2],
            ]
            del shadow[j]
        bank.reduce("nn-average", target)
        assert bank.doc_ids() == [s[0] for s in shadow]

    # explicit tie: three parallel vectors; earliest insertion pair merges
    bank = MemoryBank(1, 2)
    v = np.array([[2.0, 0.0]])
    for i, name in enumerate(["a", "b", "c"]):
        bank.insert(name, Modulation(tokens=T.Tensor((i + 1) * v)))
    bank.reduce("nn-average", 2)
    assert bank.doc_ids() == ["avg(a+b)", "c"]


# -- criteria 6-9: end-to-end run ----------------------------------------------


@pytest.fixture(scope="session")
def pipeline():
    """Seed-0 end-to-end run shared by criteria 6-9: pretrain, meta-train,
    adapt a 100-document stream, and keep the timing."""
    t0 = time.time()
    cfg = RunConfig(seed=0)
    bundle = ModelBundle(cfg, seed=0)
    pretrain_corpus = gen_synthetic_corpus(
        seed=777, n_docs=5000, split="pretrain", key_prefix="zz"
    )
    pretrain_base(
        bundle.lm, pretrain_corpus, steps=cfg.pretrain_steps, lr=cfg.pretrain_lr,
        seed=0, amortizer=bundle.amortizer, expander=bundle.expander,
    )
    bundle.base_pretrained = True
    train_corpus = gen_synthetic_corpus(seed=1, n_docs=200, split="train")
    meta_train(bundle, train_corpus, TrainConfig(
        k_train=cfg.k_train, n_qa=cfg.n_qa, dropout_p=cfg.dropout_p,
        lr=cfg.lr, epochs=cfg.epochs, seed=0,
    ))
    stream = gen_synthetic_corpus(seed=2, n_docs=100, split="stream")
    bank = evalqa.adapt_stream(bundle, stream)
    return {
        "bundle": bundle,
        "stream": stream,
        "bank": bank,
        "train_corpus": train_corpus,
        "setup_seconds": time.time() - t0,
    }


def test_criterion_6_end_to_end_exact_match(pipeline):
    """Adapted EM >= 0.80 on 100 stream questions, unadapted base <= 0.10,
    full run (pretrain + train + adapt + eval) under 30 minutes."""
    t0 = time.time()
    bundle, stream, bank = pipeline["bundle"], pipeline["stream"], pipeline["bank"]
    base_em, _ = evalqa.unadapted_baseline(bundle, stream.qa_pairs)
    _, em, _ = evalqa.evaluate(bundle, bank, stream.qa_pairs)
    total = pipeline["setup_seconds"] + (time.time() - t0)
    assert base_em <= 0.10, f"unadapted EM {base_em}"
    assert em >= 0.80, f"adapted EM {em}"
    assert total < 1800.0, f"wall time {total:.0f}s"


def test_criterion_7_retention(pipeline):
    """F1 on the first-20-document probe keeps >= 0.90 of its initial value
    after 80 more documents, and beats online prefix finetuning at every
    checkpoint."""
    bundle, stream = pipeline["bundle"], pipeline["stream"]
    curve = evalqa.retention_curve(bundle, stream, probe_size=20, increment=20)
    final = curve[-1]
    assert final["streamed"] == 100
    assert final["retention"] >= 0.90, f"retention {final['retention']}"

    straw = evalqa.OnlinePrefixFinetuner(bundle.lm, bundle.config.n_tokens)
    straw_curve = straw.retention_curve(stream, probe_size=20, increment=20)
    for ours, theirs in zip(curve, straw_curve):
        assert ours["streamed"] == theirs["streamed"]
        assert ours["retention"] >= theirs["retention"], (
            f"at {ours['streamed']} docs: {ours['retention']} < {theirs['retention']}"
        )


def test_criterion_8_perplexity_ordering(pipeline):
    """Mean perplexity on adapted documents is strictly below the mean on
    unseen documents."""
    bundle, stream, bank = pipeline["bundle"], pipeline["stream"], pipeline["bank"]
    unseen = gen_synthetic_corpus(seed=9, n_docs=50, split="eval")
    means, _ = evalqa.lm_eval(
        bundle, bank, stream.documents[:50], unseen.documents, split_frac=0.5
    )
    assert means["adapted"] < means["unseen"], (
        f"adapted {means['adapted']} vs unseen {means['unseen']}"
    )


def test_criterion_9_gold_document_attention(pipeline):
    """Across >= 50 questions asked against the gold document plus 5 random
    distractors, the gold document wins final-block attention mass in at
    least 80% of cases."""
    bundle, stream = pipeline["bundle"], pipeline["stream"]
    qa = stream.qa_pairs[:50]
    acc = evalqa.gold_attention_accuracy(bundle, qa, stream, n_distractors=5, seed=0)
    assert acc >= 0.80, f"gold-attention accuracy {acc}"


# -- criterion 10: format robustness -------------------------------------------


def test_criterion_10_format_robustness(tmp_path):
    """Bank and checkpoint round-trips are exact at 32-bit precision;
    truncated or corrupted files raise their specific error classes and
    never yield partial objects."""
    rng = np.random.default_rng(10)
    bank = MemoryBank(2, 8)
    for i in range(3):
        bank.insert(f"d{i}", Modulation(tokens=T.Tensor(rng.normal(size=(2, 8)))))
    bank_path = tmp_path / "m.bank"
    bank.save(bank_path)
    loaded = MemoryBank.load(bank_path)
    for a, b in zip(loaded.modulations(), bank.modulations()):
        assert (a.tokens.data == b.tokens.data.astype("<f4").astype(np.float64)).all()

    blob = bank_path.read_bytes()
    bad = tmp_path / "bad.bank"
    bad.write_bytes(b"WRONGMAG" + blob[8:])
    with pytest.raises(BankBadMagic):
        MemoryBank.load(bad)
    bad.write_bytes(blob[:8] + struct.pack("<I", 42) + blob[12:])
    with pytest.raises(BankBadVersion):
        MemoryBank.load(bad)
    for cut in (4, 20, len(blob) - 3):
        bad.write_bytes(blob[:cut])
        with pytest.raises((TruncatedBankError, BankBadMagic)):
            MemoryBank.load(bad)

    bundle = ModelBundle(RunConfig(d_model=16, n_tokens=2, n_heads=2), seed=0)
    ck_path = tmp_path / "b.ckpt"
    ckpt.save_bundle(bundle, ck_path)
    loaded = ckpt.load_bundle(ck_path)
    for a, b in zip(loaded.all_params(), bundle.all_params()):
        assert (a.data == b.data.astype("<f4").astype(np.float64)).all()
    cblob = ck_path.read_bytes()
    cbad = tmp_path / "bad.ckpt"
    cbad.write_bytes(b"WRONGMAG" + cblob[8:])
    with pytest.raises(ckpt.BadMagicError):
        ckpt.load_bundle(cbad)
    cbad.write_bytes(cblob[:8] + struct.pack("<I", 9) + cblob[12:])
    with pytest.raises(ckpt.BadVersionError):
        ckpt.load_bundle(cbad)
    for cut in (6, 30, len(cblob) - 5):
        cbad.write_bytes(cblob[:cut])
        with pytest.raises((ckpt.TruncatedCheckpointError, ckpt.BadMagicError)):
            ckpt.load_bundle(cbad)
    cbad.write_bytes(cblob + b"\x00")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_bundle(cbad)
