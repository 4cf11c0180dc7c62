"""Amortization network and prefix expansion."""

import numpy as np
import pytest

from modbank import tensor as T
from modbank.amortizer import Amortizer, AmortizerConfig, Modulation, PrefixExpander
from modbank.data import tokenize
from modbank.lm import BaseLM, LMConfig


def small_amortizer(seed=0, t=3, d=16):
    return Amortizer(AmortizerConfig(d_model=d, n_heads=2, n_tokens=t), seed=seed)


class TestAmortize:
    def test_output_shape_fixed_regardless_of_length(self):
        am = small_amortizer(t=3, d=16)
        for text in ("hi", "a much longer document with many more tokens."):
            m = am.amortize(tokenize(text))
            assert m.shape == (3, 16)

    def test_source_doc_id_recorded(self):
        am = small_amortizer()
        m = am.amortize([3, 4, 5], doc_id="doc-1")
        assert m.source_doc_id == "doc-1"

    def test_determinism_bit_exact(self):
        a = small_amortizer(seed=5).amortize([3, 4, 5]).tokens.data
        b = small_amortizer(seed=5).amortize([3, 4, 5]).tokens.data
        assert (a == b).all()

    def test_different_documents_differ(self):
        am = small_amortizer()
        a = am.amortize(tokenize("the code for ab is 1.")).tokens.data
        b = am.amortize(tokenize("the code for cd is 2.")).tokens.data
        assert not np.allclose(a, b)

    def test_rejects_empty_document(self):
        with pytest.raises(ValueError):
            small_amortizer().amortize([])

    def test_rejects_overlong_document(self):
        am = small_amortizer()
        with pytest.raises(ValueError):
            am.amortize([3] * (am.config.max_doc_len + 1))

    def test_gradient_flows_to_every_parameter_group(self):
        am = small_amortizer()
        m = am.amortize([3, 4, 5, 6])
        T.sum_all(T.mul(m.tokens, m.tokens)).backward()
        for p in (am.queries, am.head_w1, am.head_w2, am.tok_emb):
            assert p.grad is not None and np.abs(p.grad).sum() > 0

    def test_per_token_heads_are_independent(self):
        # Zeroing one head's weights must change only that output row.
        am1 = small_amortizer(seed=2)
        am2 = small_amortizer(seed=2)
        am2.head_w2.data[1] = 0.0
        am2.head_b2.data[1] = 0.0
        a = am1.amortize([3, 4, 5]).tokens.data
        b = am2.amortize([3, 4, 5]).tokens.data
        assert (a[0] == b[0]).all()
        assert (a[2] == b[2]).all()
        assert not np.allclose(a[1], b[1])
        assert np.allclose(b[1], 0.0)

    def test_no_tape_under_no_grad(self):
        am = small_amortizer()
        with T.no_grad():
            m = am.amortize([3, 4, 5])
        assert m.tokens._parents == ()
        assert not m.tokens.requires_grad


class TestPrefixExpander:
    def test_shapes_cover_all_lm_layers(self):
        ex = PrefixExpander(16, n_lm_layers=3, seed=0)
        m = Modulation(tokens=T.Tensor(np.random.default_rng(0).normal(size=(4, 16))))
        prefix = ex.expand(m)
        assert prefix.n_layers == 3
        assert prefix.length == 4
        for k, v in zip(prefix.keys, prefix.values):
            assert k.shape == (4, 16)
            assert v.shape == (4, 16)

    def test_expand_is_affine_in_the_modulation(self):
        ex = PrefixExpander(16, n_lm_layers=2, seed=0)
        rng = np.random.default_rng(1)
        m1 = rng.normal(size=(4, 16))
        m2 = rng.normal(size=(4, 16))
        p1 = ex.expand(Modulation(tokens=T.Tensor(m1)))
        p2 = ex.expand(Modulation(tokens=T.Tensor(m2)))
        pm = ex.expand(Modulation(tokens=T.Tensor(0.5 * (m1 + m2))))
        for a, b, mid in zip(p1.keys, p2.keys, pm.keys):
            assert np.allclose(0.5 * (a.data + b.data), mid.data, atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        ex = PrefixExpander(16, n_lm_layers=2)
        with pytest.raises(T.ShapeError):
            ex.expand(Modulation(tokens=T.Tensor(np.zeros((4, 8)))))

    def test_gradient_through_lm_reaches_modulation(self):
        lm = BaseLM(LMConfig(d_model=16, n_layers=2, n_heads=2, max_len=64), seed=0)
        lm.freeze()
        ex = PrefixExpander(16, n_lm_layers=2, seed=1)
        rng = np.random.default_rng(2)
        tokens = T.Tensor(rng.normal(0, 0.5, (3, 16)), requires_grad=True)

        def loss_value():
            prefix = ex.expand(Modulation(tokens=tokens))
            return lm.answer_nll([3, 4, 5], [6, 7], prefix)

        loss = loss_value()
        loss.backward()
        grad = tokens.grad.copy()
        assert np.abs(grad).sum() > 0
        direction = rng.normal(size=tokens.shape)
        h = 1e-6
        orig = tokens.data.copy()
        tokens.data = orig + h * direction
        lp = float(loss_value().data)
        tokens.data = orig - h * direction
        lmn = float(loss_value().data)
        tokens.data = orig
        fd = (lp - lmn) / (2 * h)
        assert float((grad * direction).sum()) == pytest.approx(fd, rel=1e-4, abs=1e-8)
