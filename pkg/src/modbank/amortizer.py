"""Amortization network: compress a token sequence into T modulation tokens.

Encoder-decoder topology: a small bidirectional transformer encoder over the
document, then T learnable query tokens cross-attending to the encoder
output, then one independent two-layer MLP per output token.  A linear
expander maps a modulation to per-layer key/value prefixes for the base LM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import MAX_DOC_LEN, VOCAB_SIZE
from .lm import PrefixKV, TransformerLayer, _linear_params
from .tensor import Tensor


@dataclass
class Modulation:
    """T x d block of soft-prompt-shaped tokens for one document."""

    tokens: Tensor
    source_doc_id: str | None = None

    @property
    def shape(self):
        return self.tokens.shape


class CrossAttentionBlock:
    """Pre-LN cross-attention + feed-forward, both with residuals."""

    def __init__(self, rng, d, n_heads):
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.ln_q_g, self.ln_q_b = T.ones_param((d,)), T.zeros_param((d,))
        self.ln_kv_g, self.ln_kv_b = T.ones_param((d,)), T.zeros_param((d,))
        self.wq, self.bq = _linear_params(rng, d, d)
        self.wk, self.bk = _linear_params(rng, d, d)
        self.wv, self.bv = _linear_params(rng, d, d)
        self.wo, self.bo = _linear_params(rng, d, d)
        self.ln2_g, self.ln2_b = T.ones_param((d,)), T.zeros_param((d,))
        self.w1, self.b1 = _linear_params(rng, d, 4 * d)
        self.w2, self.b2 = _linear_params(rng, 4 * d, d)

    def params(self):
        return [
            self.ln_q_g, self.ln_q_b, self.ln_kv_g, self.ln_kv_b,
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
            self.wo, self.bo,
            self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2,
        ]

    def _split(self, x, n):
        return T.transpose(T.reshape(x, (n, self.n_heads, self.d_head)), (1, 0, 2))

    def __call__(self, query, kv, instrument=None, residual=True):
        """query [n_q, d] attends over kv [n_k, d]; no positional treatment.

        Returns (output [n_q, d], head-averaged attention weights [n_q, n_k]).

        residual=False drops the query-side skip connection, so the output
        is built only from attended values (the query still shapes the
        attention weights).  Used as the final fusion block: it guarantees
        the fused content comes from the attended set, not from the query
        stream itself.
        """
        n_q, n_k = query.shape[0], kv.shape[0]
        if instrument is not None:
            instrument.record_attention(n_q, n_k)
        hq = T.layer_norm(query, self.ln_q_g, self.ln_q_b)
        hk = T.layer_norm(kv, self.ln_kv_g, self.ln_kv_b)
        q = self._split(T.add(T.matmul(hq, self.wq), self.bq), n_q)
        k = self._split(T.add(T.matmul(hk, self.wk), self.bk), n_k)
        v = self._split(T.add(T.matmul(hk, self.wv), self.bv), n_k)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.d_head))
        att = T.softmax_rows(scores)
        # kept for training objectives that supervise where attention goes;
        # the returned per-call weights are detached summaries
        self.last_att = att
        ctx = T.matmul(att, v)
        merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (n_q, self.n_heads * self.d_head))
        proj = T.add(T.matmul(merged, self.wo), self.bo)
        x = T.add(query, proj) if residual else proj
        h2 = T.layer_norm(x, self.ln2_g, self.ln2_b)
        ff = T.add(T.matmul(T.gelu(T.add(T.matmul(h2, self.w1), self.b1)), self.w2), self.b2)
        weights = att.data.mean(axis=0)
        return T.add(x, ff), weights


@dataclass
class AmortizerConfig:
    d_model: int = 32
    n_heads: int = 2
    n_tokens: int = 4  # T
    n_encoder_layers: int = 2
    vocab_size: int = VOCAB_SIZE
    max_doc_len: int = MAX_DOC_LEN


class Amortizer:
    """g: token ids -> Modulation of exactly T tokens, any input length."""

    def __init__(self, config: AmortizerConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        d, t = c.d_model, c.n_tokens
        self.tok_emb = T.parameter(rng, (c.vocab_size, d))
        self.pos_emb = T.parameter(rng, (c.max_doc_len, d))
        self.encoder = [
            TransformerLayer(rng, d, c.n_heads) for _ in range(c.n_encoder_layers)
        ]
        self.queries = T.parameter(rng, (t, d))
        self.decoder = CrossAttentionBlock(rng, d, c.n_heads)
        # final layer norm keeps head inputs at unit scale; without it the
        # pre-LN residual stream leaves them near init scale and the heads
        # emit modulations too faint to carry any gradient signal
        self.ln_f_g, self.ln_f_b = T.ones_param((d,)), T.zeros_param((d,))
        # one two-layer MLP per output token, batched as [T, d, 2d] / [T, 2d, d];
        # fan-in-scaled init so output modulations start at usable magnitude
        self.head_w1 = T.parameter(rng, (t, d, 2 * d), std=1.0 / np.sqrt(d))
        self.head_b1 = T.zeros_param((t, 1, 2 * d))
        self.head_w2 = T.parameter(rng, (t, 2 * d, d), std=1.0 / np.sqrt(2 * d))
        self.head_b2 = T.zeros_param((t, 1, d))

    def params(self):
        out = [self.tok_emb, self.pos_emb, self.queries,
               self.ln_f_g, self.ln_f_b,
               self.head_w1, self.head_b1, self.head_w2, self.head_b2]
        for layer in self.encoder:
            out.extend(layer.params())
        out.extend(self.decoder.params())
        return out

    def amortize(self, doc_ids, doc_id=None):
        doc_ids = list(doc_ids)
        if not doc_ids:
            raise ValueError("cannot amortize an empty document")
        if len(doc_ids) > self.config.max_doc_len:
            raise ValueError(
                f"document length {len(doc_ids)} exceeds {self.config.max_doc_len}"
            )
        n = len(doc_ids)
        x = T.add(T.take_rows(self.tok_emb, doc_ids), T.slice_rows(self.pos_emb, 0, n))
        full = np.zeros((n, n))  # bidirectional: nothing blocked
        for layer in self.encoder:
            x = layer(x, full)
        dec, _ = self.decoder(self.queries, x)
        dec = T.layer_norm(dec, self.ln_f_g, self.ln_f_b)
        t, d = self.config.n_tokens, self.config.d_model
        h = T.reshape(dec, (t, 1, d))
        h = T.gelu(T.add(T.matmul(h, self.head_w1), self.head_b1))
        h = T.add(T.matmul(h, self.head_w2), self.head_b2)
        return Modulation(tokens=T.reshape(h, (t, d)), source_doc_id=doc_id)


class PrefixExpander:
    """Shared per-layer linear maps from a modulation to key/value prefixes."""

    def __init__(self, d_model, n_lm_layers, seed=0):
        rng = np.random.default_rng(seed)
        self.d_model = d_model
        self.n_lm_layers = n_lm_layers
        # fan-in-scaled init: a std-0.02 map would shrink an O(1) modulation
        # into a prefix too small to compete for attention in the frozen LM
        std = 1.0 / np.sqrt(d_model)
        self.key_maps = [
            (T.parameter(rng, (d_model, d_model), std=std), T.zeros_param((d_model,)))
            for _ in range(n_lm_layers)
        ]
        self.value_maps = [
            (T.parameter(rng, (d_model, d_model), std=std), T.zeros_param((d_model,)))
            for _ in range(n_lm_layers)
        ]

    def params(self):
        out = []
        for w, b in self.key_maps:
            out.extend([w, b])
        for w, b in self.value_maps:
            out.extend([w, b])
        return out

    def expand(self, m: Modulation) -> PrefixKV:
        if m.tokens.shape[1] != self.d_model:
            raise T.ShapeError(
                f"modulation dimension {m.tokens.shape[1]} != expander {self.d_model}"
            )
        keys = [T.add(T.matmul(m.tokens, w), b) for w, b in self.key_maps]
        values = [T.add(T.matmul(m.tokens, w), b) for w, b in self.value_maps]
        return PrefixKV(keys, values)
