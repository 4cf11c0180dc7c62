"""Question-conditioned fusion of a set of modulations into a single one.

The question encoder is a smaller copy of the amortizer topology.  The
aggregation network is four cross-attention blocks; the encoded question is
the initial query and the concatenated modulation tokens are keys/values at
every block.  No positional information touches the bank tokens, so the
output is permutation-invariant in the modulation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .amortizer import Amortizer, AmortizerConfig, CrossAttentionBlock, Modulation

N_BLOCKS = 4


class EmptyMemoryError(ValueError):
    """Aggregation was asked to run over an empty set of modulations."""


@dataclass
class AttentionTrace:
    """Head-averaged attention weights per block for one aggregation call."""

    block_weights: list = field(default_factory=list)  # each [T_query, K*T]
    doc_ids: list = field(default_factory=list)
    tokens_per_doc: int = 0


class QuestionEncoder:
    """Smaller amortizer (single encoder layer) applied to question tokens."""

    def __init__(self, config: AmortizerConfig, seed=0):
        cfg = AmortizerConfig(
            d_model=config.d_model,
            n_heads=config.n_heads,
            n_tokens=config.n_tokens,
            n_encoder_layers=1,
            vocab_size=config.vocab_size,
            max_doc_len=config.max_doc_len,
        )
        self.net = Amortizer(cfg, seed=seed)
        self.config = cfg

    def params(self):
        return self.net.params()

    def encode(self, question_ids):
        if not list(question_ids):
            raise ValueError("cannot encode an empty question")
        return self.net.amortize(question_ids).tokens  # QueryTokens [T, d]


class Aggregator:
    """h: (query tokens, {modulations}) -> one modulation."""

    def __init__(self, d_model, n_heads, seed=0):
        rng = np.random.default_rng(seed)
        self.d_model = d_model
        self.blocks = [
            CrossAttentionBlock(rng, d_model, n_heads) for _ in range(N_BLOCKS)
        ]
        self.ln_f_g, self.ln_f_b = T.ones_param((d_model,)), T.zeros_param((d_model,))
        self.last_trace = None

    def params(self):
        out = []
        for b in self.blocks:
            out.extend(b.params())
        out.extend([self.ln_f_g, self.ln_f_b])
        return out

    def aggregate(self, query_tokens, modulations, instrument=None):
        """Fuse modulations into one, conditioned on the query tokens.

        Returns (Modulation, AttentionTrace).  Raises EmptyMemoryError on an
        empty modulation set.
        """
        mods = list(modulations)
        if not mods:
            raise EmptyMemoryError("aggregation over an empty memory")
        t = query_tokens.shape[0]
        for m in mods:
            if m.tokens.shape != query_tokens.shape:
                raise T.ShapeError(
                    f"modulation shape {m.tokens.shape} != query {query_tokens.shape}"
                )
        kv = T.concat([m.tokens for m in mods], axis=0) if len(mods) > 1 else mods[0].tokens
        if instrument is not None:
            instrument.record_call()
        trace = AttentionTrace(
            doc_ids=[m.source_doc_id for m in mods], tokens_per_doc=t
        )
        x = query_tokens
        for i, block in enumerate(self.blocks):
            # The final block carries no query-side residual: the fused
            # output is then a function of the attended modulations alone
            # (the query only steers the attention weights).  With the
            # residual in place the query stream reaches the output
            # directly and training can bypass the memory entirely by
            # memorizing question-answer pairs in the block weights.
            last = i == len(self.blocks) - 1
            x, weights = block(x, kv, instrument=instrument, residual=not last)
            trace.block_weights.append(weights)
        x = T.layer_norm(x, self.ln_f_g, self.ln_f_b)
        self.last_trace = trace
        return Modulation(tokens=x), trace


def attention_report(trace: AttentionTrace, doc_ids=None):
    """Final-block attention mass per document, averaged over query tokens."""
    if trace is None or not trace.block_weights:
        raise ValueError("no attention trace recorded")
    final = trace.block_weights[-1]  # [T_query, K*T]
    t = trace.tokens_per_doc
    ids = doc_ids if doc_ids is not None else trace.doc_ids
    k = final.shape[1] // t
    if len(ids) != k:
        raise ValueError(f"{len(ids)} doc ids for {k} segments")
    per_doc = final.reshape(final.shape[0], k, t).sum(axis=2)  # [T_query, K]
    mass = per_doc.mean(axis=0)
    return dict(zip(ids, mass.tolist()))
