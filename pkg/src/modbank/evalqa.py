"""Experiment protocols: stream adaptation, QA scoring, retention, perplexity.

All adaptation and evaluation here is gradient-free: forward passes only,
with no tape construction and no parameter mutation.
"""

from __future__ import annotations

import math
import re
import string

import numpy as np

from . import tensor as T
from .aggregator import attention_report
from .bank import MemoryBank, MemoryInstrument, hierarchical_aggregate
from .data import detokenize
from .lm import PrefixKV

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(text):
    """SQuAD-style: lowercase, no punctuation, no articles, single spaces."""
    text = text.lower().translate(_PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def em_score(prediction, gold):
    return 1.0 if normalize_answer(prediction) == normalize_answer(gold) else 0.0


def f1_score(prediction, gold):
    pred_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens or not gold_tokens:
        return 1.0 if pred_tokens == gold_tokens else 0.0
    common = {}
    for t in pred_tokens:
        common[t] = common.get(t, 0) + 1
    overlap = 0
    for t in gold_tokens:
        if common.get(t, 0) > 0:
            common[t] -= 1
            overlap += 1
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


class AdaptationError(RuntimeError):
    pass


def adapt_stream(bundle, stream, bank_limit=0, reduction="nn-average", seed=0,
                 bank=None):
    """Amortize each streamed document in order and store it.

    Training-free: runs with the tape disabled and mutates no parameters.
    When bank_limit > 0 the chosen reduction triggers on overflow.
    """
    if not bundle.trained:
        raise AdaptationError("bundle is not trained; run meta-training first")
    if not stream.documents:
        raise AdaptationError("empty document stream")
    if bank is None:
        bank = MemoryBank(bundle.config.n_tokens, bundle.config.d_model)
    with T.no_grad():
        for doc in stream.documents:
            m = bundle.amortizer.amortize(doc.ids, doc_id=doc.doc_id)
            bank.insert(doc.doc_id, m)
            if bank_limit > 0 and len(bank) > bank_limit:
                bank.reduce(reduction, bank_limit, seed=seed)
    return bank


def answer_question(bundle, bank, question_ids, m_tokens=None, instrument=None,
                    max_new=16):
    """Encode, aggregate hierarchically, expand, greedy-decode. Returns
    (predicted ids, AttentionTrace of the final aggregation call)."""
    if m_tokens is None:
        m_tokens = bundle.config.m_tokens
    with T.no_grad():
        q = bundle.qencoder.encode(question_ids)
        mods = bank.modulations() if isinstance(bank, MemoryBank) else list(bank)
        fused, trace = hierarchical_aggregate(
            bundle.aggregator, q, mods, m_tokens, instrument=instrument
        )
        prefix = bundle.expander.expand(fused)
        pred = bundle.lm.greedy_decode(question_ids, prefix, max_new=max_new)
    return pred, trace


def evaluate(bundle, bank, qa_pairs, m_tokens=None, instrument=None):
    """Per-question EM/F1 records plus means."""
    records = []
    for i, qa in enumerate(qa_pairs):
        pred_ids, _ = answer_question(
            bundle, bank, qa.question_ids, m_tokens, instrument=instrument
        )
        pred = detokenize(pred_ids)
        records.append(
            {
                "question": qa.question,
                "gold": qa.answer,
                "prediction": pred,
                "em": em_score(pred, qa.answer),
                "f1": f1_score(pred, qa.answer),
                "step": i,
            }
        )
    n = max(len(records), 1)
    mean_em = sum(r["em"] for r in records) / n
    mean_f1 = sum(r["f1"] for r in records) / n
    return records, mean_em, mean_f1


def unadapted_baseline(bundle, qa_pairs):
    """Greedy decoding from the frozen base LM with no modulation."""
    records = []
    with T.no_grad():
        for qa in qa_pairs:
            pred = detokenize(bundle.lm.greedy_decode(qa.question_ids, None, max_new=16))
            records.append(
                {"em": em_score(pred, qa.answer), "f1": f1_score(pred, qa.answer)}
            )
    n = max(len(records), 1)
    return sum(r["em"] for r in records) / n, sum(r["f1"] for r in records) / n


class RetentionError(RuntimeError):
    pass


def retention_curve(bundle, stream, probe_size, increment=None, m_tokens=None):
    """F1 on the first probe_size docs' questions as the stream grows.

    Returns a list of records; retention at each checkpoint is F1_t / F1_0.
    The probe QA set is frozen once and never re-sampled.
    """
    docs = stream.documents
    if probe_size > len(docs):
        raise RetentionError("probe_size exceeds stream length")
    if increment is None:
        increment = max(1, (len(docs) - probe_size) // 7)
    probe_qa = [qa for d in docs[:probe_size] for qa in stream.qa_for(d.doc_id)]
    if not probe_qa:
        raise RetentionError("probe documents carry no QA pairs")

    bank = MemoryBank(bundle.config.n_tokens, bundle.config.d_model)
    with T.no_grad():
        for doc in docs[:probe_size]:
            bank.insert(doc.doc_id, bundle.amortizer.amortize(doc.ids, doc.doc_id))
    _, _, f1_0 = evaluate(bundle, bank, probe_qa, m_tokens)
    if f1_0 == 0.0:
        raise RetentionError("probe F1 is zero; retention ratio is undefined")
    curve = [{"streamed": probe_size, "f1": f1_0, "retention": 1.0}]
    pos = probe_size
    while pos < len(docs):
        nxt = min(pos + increment, len(docs))
        with T.no_grad():
            for doc in docs[pos:nxt]:
                bank.insert(doc.doc_id, bundle.amortizer.amortize(doc.ids, doc.doc_id))
        pos = nxt
        _, _, f1_t = evaluate(bundle, bank, probe_qa, m_tokens)
        curve.append({"streamed": pos, "f1": f1_t, "retention": f1_t / f1_0})
    return curve


class OnlinePrefixFinetuner:
    """Strawman baseline: one shared prefix finetuned per document with SGD.

    The base LM stays frozen; only the prefix tensors are updated, document
    by document, which makes it forget earlier documents.
    """

    def __init__(self, lm, n_tokens, sgd_lr=0.05, sgd_steps=10, seed=0):
        rng = np.random.default_rng(seed)
        self.lm = lm
        self.keys = [T.parameter(rng, (n_tokens, lm.config.d_model))
                     for _ in range(lm.config.n_layers)]
        self.values = [T.parameter(rng, (n_tokens, lm.config.d_model))
                       for _ in range(lm.config.n_layers)]
        self.sgd_lr = sgd_lr
        self.sgd_steps = sgd_steps

    def _prefix(self):
        return PrefixKV(self.keys, self.values)

    def adapt(self, doc):
        params = self.keys + self.values
        for _ in range(self.sgd_steps):
            logits = self.lm.forward_with_prefix(doc.ids, self._prefix())
            loss = T.cross_entropy_from_logits(
                T.slice_rows(logits, 0, len(doc.ids) - 1), doc.ids[1:]
            )
            loss.backward()
            for p in params:
                if p.grad is not None:
                    p.data -= self.sgd_lr * p.grad
                    p.grad = None

    def evaluate(self, qa_pairs):
        records = []
        with T.no_grad():
            for qa in qa_pairs:
                pred = detokenize(
                    self.lm.greedy_decode(qa.question_ids, self._prefix(), max_new=16)
                )
                records.append(f1_score(pred, qa.answer))
        return sum(records) / max(len(records), 1)

    def retention_curve(self, stream, probe_size, increment=None):
        docs = stream.documents
        if increment is None:
            increment = max(1, (len(docs) - probe_size) // 7)
        probe_qa = [qa for d in docs[:probe_size] for qa in stream.qa_for(d.doc_id)]
        for doc in docs[:probe_size]:
            self.adapt(doc)
        f1_0 = self.evaluate(probe_qa)
        curve = [{"streamed": probe_size, "f1": f1_0, "retention": 1.0}]
        if f1_0 == 0.0:
            return curve  # nothing learned; curve cannot be normalized further
        pos = probe_size
        while pos < len(docs):
            nxt = min(pos + increment, len(docs))
            for doc in docs[pos:nxt]:
                self.adapt(doc)
            pos = nxt
            f1_t = self.evaluate(probe_qa)
            curve.append({"streamed": pos, "f1": f1_t, "retention": f1_t / f1_0})
        return curve


def lm_eval(bundle, bank, adapted_docs, unseen_docs, split_frac=0.1, m_tokens=None):
    """Perplexity of each document's tail given its head as the query.

    The head (first ceil(split_frac * len) tokens) drives the aggregation;
    perplexity is measured on the remainder under the fused modulation.
    """
    results = {"adapted": [], "unseen": []}
    records = []
    for cohort, docs in (("adapted", adapted_docs), ("unseen", unseen_docs)):
        for doc in docs:
            n = len(doc.ids)
            k = math.ceil(split_frac * n)
            if k == 0 or k >= n:
                records.append(
                    {"metric": "perplexity", "cohort": cohort,
                     "doc_id": doc.doc_id, "skipped": "document too short"}
                )
                continue
            head, tail = doc.ids[:k], doc.ids[k:]
            with T.no_grad():
                q = bundle.qencoder.encode(head)
                fused, _ = hierarchical_aggregate(
                    bundle.aggregator, q, bank.modulations(),
                    m_tokens or bundle.config.m_tokens,
                )
                prefix = bundle.expander.expand(fused)
                ppl = bundle.lm.perplexity(head, tail, prefix)
            results[cohort].append(ppl)
            records.append(
                {"metric": "perplexity", "cohort": cohort,
                 "doc_id": doc.doc_id, "value": ppl}
            )
    means = {
        cohort: (sum(v) / len(v) if v else float("nan"))
        for cohort, v in results.items()
    }
    return means, records


def aggregate_bench(bundle, bank, qa_pairs, m_values):
    """Sweep M: peak attention elements and F1 per value, plus the full-set
    aggregation cost for reference."""
    t = bundle.config.n_tokens
    k = len(bank)
    rows = []
    for m in m_values:
        instrument = MemoryInstrument()
        _, _, f1 = evaluate(bundle, bank, qa_pairs, m_tokens=m, instrument=instrument)
        rows.append(
            {
                "m_tokens": m,
                "peak_attention_elements": instrument.peak_attention_elements,
                "f1": f1,
                "aggregator_calls": instrument.total_aggregation_calls,
            }
        )
    full_cost = t * (k * t)
    return {"full_attention_elements": full_cost, "sweep": rows}


def gold_attention_accuracy(bundle, eval_qa, corpus, n_distractors=5, seed=0):
    """Fraction of questions whose gold document wins the final-block mass.

    Each question is aggregated over its gold document plus n_distractors
    random other documents.
    """
    rng = np.random.default_rng(seed)
    others = {d.doc_id: d for d in corpus.documents}
    hits = 0
    total = 0
    with T.no_grad():
        for qa in eval_qa:
            pool = [doc_id for doc_id in others if doc_id != qa.doc_id]
            picks = list(rng.choice(len(pool), size=n_distractors, replace=False))
            docs = [others[qa.doc_id]] + [others[pool[i]] for i in picks]
            mods = [bundle.amortizer.amortize(d.ids, d.doc_id) for d in docs]
            q = bundle.qencoder.encode(qa.question_ids)
            _, trace = bundle.aggregator.aggregate(q, mods)
            masses = attention_report(trace)
            winner = max(masses, key=masses.get)
            hits += int(winner == qa.doc_id)
            total += 1
    return hits / max(total, 1)
