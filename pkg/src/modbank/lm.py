"""Frozen decoder-only toy LM with per-layer prefix key/value injection.

The prefix (P-Tuning-v2 style) is concatenated in front of every layer's
keys and values.  Prefix positions get no positional embedding and emit no
logits; gradients flow into the prefix but never into the LM parameters
once the model is frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import EOA, VOCAB_SIZE
from .tensor import Tensor


@dataclass
class LMConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def d_head(self):
        return self.d_model // self.n_heads


class PrefixKV:
    """Per-layer key and value prefixes, each [T_p, d_model]."""

    def __init__(self, keys, values):
        if len(keys) != len(values):
            raise T.ShapeError("prefix keys and values must cover the same layers")
        lens = {k.shape[0] for k in keys} | {v.shape[0] for v in values}
        if len(lens) > 1:
            raise T.ShapeError("all layers must share one prefix length")
        self.keys = list(keys)
        self.values = list(values)

    @property
    def length(self):
        return self.keys[0].shape[0] if self.keys else 0

    @property
    def n_layers(self):
        return len(self.keys)


def _linear_params(rng, d_in, d_out):
    return T.parameter(rng, (d_in, d_out)), T.zeros_param((d_out,))


class TransformerLayer:
    def __init__(self, rng, d, n_heads):
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.ln1_g, self.ln1_b = T.ones_param((d,)), T.zeros_param((d,))
        self.wq, self.bq = _linear_params(rng, d, d)
        self.wk, self.bk = _linear_params(rng, d, d)
        self.wv, self.bv = _linear_params(rng, d, d)
        self.wo, self.bo = _linear_params(rng, d, d)
        self.ln2_g, self.ln2_b = T.ones_param((d,)), T.zeros_param((d,))
        self.w1, self.b1 = _linear_params(rng, d, 4 * d)
        self.w2, self.b2 = _linear_params(rng, 4 * d, d)

    def params(self):
        return [
            self.ln1_g, self.ln1_b,
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
            self.wo, self.bo,
            self.ln2_g, self.ln2_b,
            self.w1, self.b1, self.w2, self.b2,
        ]

    def _split_heads(self, x, n):
        # [n, d] -> [heads, n, d_head]
        return T.transpose(T.reshape(x, (n, self.n_heads, self.d_head)), (1, 0, 2))

    def __call__(self, x, mask, prefix_k=None, prefix_v=None):
        """mask: additive [n_q, n_k] numpy array (0 allowed, -inf blocked)."""
        n = x.shape[0]
        h = T.layer_norm(x, self.ln1_g, self.ln1_b)
        q = T.add(T.matmul(h, self.wq), self.bq)
        k = T.add(T.matmul(h, self.wk), self.bk)
        v = T.add(T.matmul(h, self.wv), self.bv)
        if prefix_k is not None:
            k = T.concat([prefix_k, k], axis=0)
            v = T.concat([prefix_v, v], axis=0)
        n_k = k.shape[0]
        qh = self._split_heads(q, n)
        kh = self._split_heads(k, n_k)
        vh = self._split_heads(v, n_k)
        scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(self.d_head))
        scores = T.add(scores, Tensor(mask))
        att = T.softmax_rows(scores)
        ctx = T.matmul(att, vh)  # [heads, n, d_head]
        merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (n, self.n_heads * self.d_head))
        x = T.add(x, T.add(T.matmul(merged, self.wo), self.bo))
        h2 = T.layer_norm(x, self.ln2_g, self.ln2_b)
        ff = T.add(T.matmul(T.gelu(T.add(T.matmul(h2, self.w1), self.b1)), self.w2), self.b2)
        return T.add(x, ff)


def causal_mask(n, n_prefix=0):
    """Additive mask: position i may attend to all prefix keys and keys <= i."""
    m = np.full((n, n_prefix + n), -1e30)
    m[:, :n_prefix] = 0.0
    idx = np.arange(n)
    for i in range(n):
        m[i, n_prefix : n_prefix + i + 1] = 0.0
    del idx
    return m


class BaseLM:
    """Decoder-only LM; construct trainable, then freeze() after pretraining."""

    def __init__(self, config: LMConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.tok_emb = T.parameter(rng, (c.vocab_size, c.d_model))
        self.pos_emb = T.parameter(rng, (c.max_len, c.d_model))
        self.layers = [TransformerLayer(rng, c.d_model, c.n_heads) for _ in range(c.n_layers)]
        self.lnf_g, self.lnf_b = T.ones_param((c.d_model,)), T.zeros_param((c.d_model,))
        self.frozen = False

    def params(self):
        out = [self.tok_emb, self.pos_emb, self.lnf_g, self.lnf_b]
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def freeze(self):
        for p in self.params():
            p.requires_grad = False
            p.grad = None
        self.frozen = True

    def checksum(self):
        return float(sum(np.abs(p.data).sum() for p in self.params()))

    def _check_tokens(self, tokens):
        tokens = list(tokens)
        if len(tokens) > self.config.max_len:
            raise ValueError(
                f"input length {len(tokens)} exceeds max_len {self.config.max_len}"
            )
        for t in tokens:
            if not 0 <= t < self.config.vocab_size:
                raise ValueError(f"token id {t} out of range")
        return tokens

    def forward_with_prefix(self, tokens, prefix: PrefixKV | None = None):
        """Next-token logits [n, V] for the sequence, conditioned on the prefix."""
        tokens = self._check_tokens(tokens)
        n = len(tokens)
        if n == 0:
            raise ValueError("empty input")
        use_prefix = prefix is not None and prefix.length > 0
        if use_prefix and prefix.n_layers != self.config.n_layers:
            raise T.ShapeError(
                f"prefix covers {prefix.n_layers} layers, LM has {self.config.n_layers}"
            )
        n_p = prefix.length if use_prefix else 0
        x = T.add(T.take_rows(self.tok_emb, tokens), T.slice_rows(self.pos_emb, 0, n))
        mask = causal_mask(n, n_p)
        for li, layer in enumerate(self.layers):
            if use_prefix:
                x = layer(x, mask, prefix.keys[li], prefix.values[li])
            else:
                x = layer(x, mask)
        x = T.layer_norm(x, self.lnf_g, self.lnf_b)
        return T.matmul(x, T.transpose(self.tok_emb))

    def next_token_loss(self, tokens):
        """Mean NLL of tokens[1:] given their preceding context."""
        tokens = self._check_tokens(tokens)
        if len(tokens) < 2:
            raise ValueError("need at least two tokens for next-token loss")
        logits = self.forward_with_prefix(tokens)
        return T.cross_entropy_from_logits(
            T.slice_rows(logits, 0, len(tokens) - 1), tokens[1:]
        )

    def answer_nll(self, question, answer, prefix: PrefixKV | None = None):
        """Cross-entropy over answer tokens (plus end-of-answer) only."""
        question = list(question)
        answer = list(answer)
        if not answer:
            raise ValueError("empty answer")
        if not question:
            raise ValueError("empty question")
        tokens = question + answer + [EOA]
        self._check_tokens(tokens)
        logits = self.forward_with_prefix(tokens, prefix)
        n = len(tokens)
        targets = tokens[1:]
        mask = np.zeros(n - 1, dtype=bool)
        mask[len(question) - 1 :] = True
        return T.cross_entropy_from_logits(T.slice_rows(logits, 0, n - 1), targets, mask)

    def greedy_decode(self, prompt, prefix: PrefixKV | None = None, max_new=16):
        """Argmax decoding; stops at end-of-answer; ties break to lowest id."""
        if not prompt:
            raise ValueError("empty prompt")
        out = []
        tokens = list(prompt)
        with T.no_grad():
            for _ in range(max_new):
                logits = self.forward_with_prefix(tokens, prefix)
                nxt = int(np.argmax(logits.data[-1]))
                if nxt == EOA:
                    break
                out.append(nxt)
                tokens.append(nxt)
                if len(tokens) >= self.config.max_len:
                    break
        return out

    def perplexity(self, context, continuation, prefix: PrefixKV | None = None):
        """exp(mean NLL) of the continuation given the context."""
        context = list(context)
        continuation = list(continuation)
        if not continuation:
            raise ValueError("empty continuation")
        tokens = context + continuation
        with T.no_grad():
            logits = self.forward_with_prefix(tokens, prefix)
            n = len(tokens)
            mask = np.zeros(n - 1, dtype=bool)
            mask[max(len(context) - 1, 0) :] = True
            loss = T.cross_entropy_from_logits(
                T.slice_rows(logits, 0, n - 1), tokens[1:], mask
            )
        return float(np.exp(loss.data))
