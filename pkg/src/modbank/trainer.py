"""Meta-training: amortize, aggregate, score against the frozen LM, update.

Backpropagation dropout wraps each document's modulation in a stop-gradient
with probability p.  Forward values are unchanged; the expected gradient of
the amortizer is (1-p) times the full-backprop gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .amortizer import Modulation
from .data import EOA


class BatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    k_train: int = 8
    n_qa: int = 8
    dropout_p: float = 0.5
    min_mode: bool = False
    slot_weight: float = 1.0
    amortizer_lr_scale: float = 0.05
    lr: float = 1e-3
    warmup_epochs: int = 1
    epochs: int = 50
    seed: int = 0
    clip_norm: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError("dropout_p must be in [0, 1]")
        if self.k_train < 1:
            raise ValueError("k_train must be >= 1")


def dropout_mask(k, p, min_mode, seed):
    """Per-document keep-gradient mask. True = gradient flows.

    min_mode keeps exactly one uniformly chosen document regardless of p.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    if min_mode:
        mask = np.zeros(k, dtype=bool)
        mask[int(rng.integers(k))] = True
        return mask
    return rng.random(k) >= p


def training_step(bundle, docs, qa_pairs, keep_mask, slot_weight=0.0):
    """One batch: returns the scalar loss tensor (backward is the caller's).

    Every QA pair's source document must be present in the batch.  The
    aggregation for each question sees all K modulations; dropout affects
    gradients only.

    slot_weight > 0 adds the same grounding term used when the base LM is
    pretrained: each fused slot, read out through the LM's tied embedding
    table, must predict the matching answer token.  A freshly initialized
    aggregator emits modulations far from anything the pretrained expander
    and LM can read, so the QA loss alone sits at the no-information
    plateau; the grounding term gives the aggregator a direct target.
    Dropout stays unbiased because the term reaches the amortizer only
    through the same (possibly stop-gradient-wrapped) modulations.
    """
    doc_ids = {d.doc_id for d in docs}
    for qa in qa_pairs:
        if qa.doc_id not in doc_ids:
            raise BatchError(f"QA references document {qa.doc_id!r} not in batch")
    if len(keep_mask) != len(docs):
        raise BatchError("keep_mask length must equal the document count")

    mods = []
    for doc, keep in zip(docs, keep_mask):
        m = bundle.amortizer.amortize(doc.ids, doc_id=doc.doc_id)
        if not keep:
            m = Modulation(T.stop_gradient(m.tokens), source_doc_id=m.source_doc_id)
        mods.append(m)

    losses = []
    slot_losses = []
    n_tokens = bundle.amortizer.config.n_tokens
    for qa in qa_pairs:
        q = bundle.qencoder.encode(qa.question_ids)
        fused, _ = bundle.aggregator.aggregate(q, mods)
        prefix = bundle.expander.expand(fused)
        losses.append(bundle.lm.answer_nll(qa.question_ids, qa.answer_ids, prefix))
        if slot_weight > 0.0:
            n_slots = min(n_tokens, len(qa.answer_ids))
            slot_logits = T.matmul(
                T.slice_rows(fused.tokens, 0, n_slots),
                T.transpose(bundle.lm.tok_emb),
            )
            slot_losses.append(
                T.cross_entropy_from_logits(slot_logits, qa.answer_ids[:n_slots])
            )
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    total = T.scale(total, 1.0 / len(losses))
    if slot_losses:
        aux = slot_losses[0]
        for extra in slot_losses[1:]:
            aux = T.add(aux, extra)
        total = T.add(total, T.scale(aux, slot_weight / len(slot_losses)))
    return total


def _lr_at(step, steps_per_epoch, cfg: TrainConfig):
    warm_steps = cfg.warmup_epochs * steps_per_epoch
    if warm_steps > 0 and step < warm_steps:
        return cfg.lr * (step + 1) / warm_steps
    return cfg.lr


def meta_train(bundle, corpus, cfg: TrainConfig, log=None, checkpoint_fn=None):
    """Epoch loop with first-epoch LR warmup, Adam, and per-step logging.

    log: optional callable taking a metrics record dict.
    checkpoint_fn: optional callable (bundle, epoch) run after each epoch.
    """
    docs = [d for d in corpus.documents if corpus.qa_for(d.doc_id)]
    if len(docs) < cfg.k_train:
        raise BatchError(
            f"corpus has {len(docs)} usable documents, need >= {cfg.k_train}"
        )
    # The amortizer arrives with a working document->prefix encoding from
    # base-LM pretraining; a full-rate meta-training signal computed against
    # a still-random aggregator would destroy that encoding before the
    # aggregator can learn to use it, so the amortizer trains at a reduced
    # rate while the question encoder, aggregator, and expander train fully.
    amort_params = bundle.amortizer.params()
    amort_ids = {id(p) for p in amort_params}
    other_params = [p for p in bundle.trainable_params() if id(p) not in amort_ids]
    params = amort_params + other_params
    opt_amort = T.Adam(amort_params)
    opt_other = T.Adam(other_params)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = len(docs) // cfg.k_train
    step = 0
    t0 = time.time()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(docs))
        for b in range(steps_per_epoch):
            batch = [docs[i] for i in order[b * cfg.k_train : (b + 1) * cfg.k_train]]
            qa_pairs = []
            for doc in batch:
                cands = corpus.qa_for(doc.doc_id)
                qa_pairs.append(cands[int(rng.integers(len(cands)))])
            mask = dropout_mask(
                cfg.k_train, cfg.dropout_p, cfg.min_mode,
                seed=cfg.seed * 1_000_003 + step,
            )
            loss = training_step(bundle, batch, qa_pairs, mask,
                                 slot_weight=cfg.slot_weight)
            loss.backward()
            T.clip_global_norm(params, cfg.clip_norm)
            lr = _lr_at(step, steps_per_epoch, cfg)
            opt_amort.step(lr * cfg.amortizer_lr_scale)
            opt_other.step(lr)
            opt_amort.zero_grad()
            opt_other.zero_grad()
            if log is not None:
                log(
                    {
                        "step": step,
                        "epoch": epoch,
                        "loss": float(loss.data),
                        "lr": lr,
                        "kept_documents": int(mask.sum()),
                        "wall_time": time.time() - t0,
                    }
                )
            step += 1
        if checkpoint_fn is not None:
            checkpoint_fn(bundle, epoch)
    bundle.trained = True
    return bundle


def pretrain_base(lm, corpus, steps, lr, seed=0, log=None,
                  amortizer=None, expander=None, qencoder=None,
                  aggregator=None, qa_batch=8, agg_group=4, agg_qa=2,
                  agg_start=0.5):
    """Next-token training of the base LM on corpus text and QA format.

    The corpus here is a pretraining corpus whose facts are disjoint from
    any adaptation stream; it teaches style, not stream content.

    When an amortizer and expander are supplied they train jointly with the
    LM on prefix-conditioned QA, so the LM learns to read answers out of
    prefix positions before it freezes.  Both networks keep their weights
    afterwards, giving later meta-training a working single-document path.

    Joint mode adds grounding terms that solve two cold-start problems:

    * Answer grounding: each modulation slot, read out through the LM's
      tied embedding table, must predict the matching answer token.
      Without it the LM has no reason to attend to uninformative prefixes,
      so the amortizer never receives gradient and the QA loss stays at
      the no-information plateau.
    * Topic grounding: through shared per-position auxiliary projections,
      the pooled modulation must predict the characters of the question's
      tail (the token span naming what is asked about).  When a question
      encoder is also supplied, its pooled output is grounded on the same
      span through the same projections.  This forces modulations to carry
      a retrievable description of their document, aligned with how
      questions are encoded — without it, later attention over a memory
      bank has no learnable signal for picking the right document.

    When an aggregator is also supplied (which requires the question
    encoder), each step additionally answers agg_qa questions through
    aggregation over a group of agg_group documents' modulations, with the
    fused output grounded on the answer.  Retrieval trained only during
    meta-training memorizes that corpus's small key set; trained here, over
    the pretraining corpus's thousands of keys, it is forced to generalize.
    The aggregated terms start at step agg_start * steps: switched on from
    the beginning, their gradients pull the amortizer toward serving the
    still-random aggregator and the single-document channel never forms.
    """
    if lm.frozen:
        raise ValueError("base LM is already frozen")
    if (amortizer is None) != (expander is None):
        raise ValueError("amortizer and expander must be supplied together")
    if qencoder is not None and amortizer is None:
        raise ValueError("qencoder grounding requires amortizer and expander")
    if aggregator is not None and qencoder is None:
        raise ValueError("aggregator pretraining requires a question encoder")
    params = lm.params()
    rng = np.random.default_rng(seed)
    topic_projs = None
    n_tok = 0
    if amortizer is not None:
        params = params + amortizer.params() + expander.params()
        d = lm.config.d_model
        n_tok = amortizer.config.n_tokens
        # Auxiliary per-position readouts of the POOLED representation; the
        # topic then lives in a subspace shared by every slot instead of
        # competing with the per-slot answer digits.  Discarded after
        # pretraining; only the structure they induce in the networks stays.
        topic_projs = [
            T.parameter(rng, (d, d), std=1.0 / np.sqrt(d)) for _ in range(n_tok)
        ]
        params = params + topic_projs
        if qencoder is not None:
            params = params + qencoder.params()
        if aggregator is not None:
            params = params + aggregator.params()
    opt = T.Adam(params)
    qa = list(corpus.qa_pairs)
    docs = list(corpus.documents)
    doc_by_id = {d.doc_id: d for d in docs}
    qa_by_doc = {}
    for pair in qa:
        qa_by_doc.setdefault(pair.doc_id, []).append(pair)
    pool = None
    if n_tok:
        pool = T.as_tensor(np.full((1, n_tok), 1.0 / n_tok))

    def topic_loss(tokens, topic):
        pooled = T.matmul(pool, tokens)  # [1, d]
        rows = T.concat([T.matmul(pooled, p) for p in topic_projs[: len(topic)]])
        logits = T.matmul(rows, T.transpose(lm.tok_emb))
        return T.cross_entropy_from_logits(logits, topic)

    t0 = time.time()
    for step in range(steps):
        # group -> (weight, [terms]); the grounding terms guide but must not
        # crowd out the QA channel itself, hence the reduced weights.
        groups = {"lm": (1.0, []), "qa": (1.0, []),
                  "answer_slots": (0.5, []), "topic": (0.5, []),
                  "agg_qa": (1.0, []), "agg_slots": (0.5, []),
                  "agg_attn": (1.0, [])}
        doc = docs[int(rng.integers(len(docs)))]
        groups["lm"][1].append(lm.next_token_loss(doc.ids))
        if qa:
            pair = qa[int(rng.integers(len(qa)))]
            seq = pair.question_ids + pair.answer_ids + [EOA]
            groups["lm"][1].append(lm.next_token_loss(seq))
            if amortizer is not None:
                for _ in range(qa_batch):
                    pair = qa[int(rng.integers(len(qa)))]
                    src = doc_by_id[pair.doc_id]
                    m = amortizer.amortize(src.ids)
                    prefix = expander.expand(m)
                    groups["qa"][1].append(
                        lm.answer_nll(pair.question_ids, pair.answer_ids, prefix)
                    )
                    n_slots = min(n_tok, len(pair.answer_ids))
                    slot_logits = T.matmul(
                        T.slice_rows(m.tokens, 0, n_slots), T.transpose(lm.tok_emb)
                    )
                    groups["answer_slots"][1].append(
                        T.cross_entropy_from_logits(
                            slot_logits, pair.answer_ids[:n_slots]
                        )
                    )
                    # Topic grounding target: the question's tail (minus the
                    # final punctuation token) names what is asked about.
                    q_ids = pair.question_ids
                    topic = q_ids[:-1][-n_tok:]
                    if topic:
                        groups["topic"][1].append(topic_loss(m.tokens, topic))
                        if qencoder is not None:
                            groups["topic"][1].append(
                                topic_loss(qencoder.encode(q_ids), topic)
                            )
                if aggregator is not None and step >= agg_start * steps:
                    picks = rng.choice(len(docs), size=agg_group, replace=False)
                    group_docs = [docs[i] for i in picks]
                    mods = [amortizer.amortize(d.ids, d.doc_id) for d in group_docs]
                    asked = [d for d in group_docs if qa_by_doc.get(d.doc_id)]
                    rng.shuffle(asked)
                    for d in asked[:agg_qa]:
                        cands = qa_by_doc[d.doc_id]
                        pair = cands[int(rng.integers(len(cands)))]
                        qe = qencoder.encode(pair.question_ids)
                        fused, _ = aggregator.aggregate(qe, mods)
                        prefix = expander.expand(fused)
                        groups["agg_qa"][1].append(
                            lm.answer_nll(pair.question_ids, pair.answer_ids, prefix)
                        )
                        n_slots = min(n_tok, len(pair.answer_ids))
                        slot_logits = T.matmul(
                            T.slice_rows(fused.tokens, 0, n_slots),
                            T.transpose(lm.tok_emb),
                        )
                        groups["agg_slots"][1].append(
                            T.cross_entropy_from_logits(
                                slot_logits, pair.answer_ids[:n_slots]
                            )
                        )
                        # Attention supervision: the gold document is known
                        # here, so the final fusion block is told directly
                        # where its mass belongs.  Without this the
                        # aggregator settles into uniform attention (the
                        # fused mixture already halves the QA loss) and the
                        # remaining gradient toward sharp retrieval is too
                        # weak to escape that optimum.
                        att = aggregator.blocks[-1].last_att
                        h, tq, nk = att.data.shape
                        flat = T.reshape(att, (h * tq, nk))
                        avg = T.matmul(
                            T.as_tensor(np.full((1, h * tq), 1.0 / (h * tq))),
                            flat,
                        )
                        gold = group_docs.index(d)
                        sel = np.zeros((nk, 1))
                        sel[gold * n_tok : (gold + 1) * n_tok] = 1.0
                        p_gold = T.matmul(avg, T.as_tensor(sel))
                        groups["agg_attn"][1].append(
                            T.mean_all(
                                T.sub(T.as_tensor(np.ones((1, 1))), p_gold)
                            )
                        )
        loss = None
        total_w = 0.0
        record = {}
        for name, (w, terms) in groups.items():
            if not terms:
                continue
            g = terms[0]
            for extra in terms[1:]:
                g = T.add(g, extra)
            g = T.scale(g, 1.0 / len(terms))
            record[name] = float(g.data)
            total_w += w
            part = T.scale(g, w)
            loss = part if loss is None else T.add(loss, part)
        loss = T.scale(loss, 1.0 / total_w)
        loss.backward()
        T.clip_global_norm(params, 1.0)
        opt.step(lr)
        opt.zero_grad()
        if log is not None and (step % 100 == 0 or step == steps - 1):
            record.update(
                {
                    "step": step,
                    "loss": float(loss.data),
                    "lr": lr,
                    "wall_time": time.time() - t0,
                }
            )
            log(record)
    lm.freeze()
    return lm
