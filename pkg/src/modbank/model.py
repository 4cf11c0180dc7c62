"""The full model bundle: frozen LM plus the three trainable networks."""

from __future__ import annotations

from .aggregator import Aggregator, QuestionEncoder
from .amortizer import Amortizer, AmortizerConfig, PrefixExpander
from .config import RunConfig
from .lm import BaseLM, LMConfig


class ModelBundle:
    """Frozen base LM, amortizer, question encoder, aggregator, expander."""

    def __init__(self, config: RunConfig, seed=None):
        self.config = config
        seed = config.seed if seed is None else seed
        lm_cfg = LMConfig(
            vocab_size=config.vocab_size,
            d_model=config.d_model,
            n_layers=config.n_layers,
            n_heads=config.n_heads,
            max_len=config.max_len,
        )
        amort_cfg = AmortizerConfig(
            d_model=config.d_model,
            n_heads=config.n_heads,
            n_tokens=config.n_tokens,
            n_encoder_layers=config.amort_encoder_layers,
            vocab_size=config.vocab_size,
            max_doc_len=config.max_doc_len,
        )
        self.lm = BaseLM(lm_cfg, seed=seed)
        self.amortizer = Amortizer(amort_cfg, seed=seed + 1)
        self.expander = PrefixExpander(config.d_model, config.n_layers, seed=seed + 2)
        self.qencoder = QuestionEncoder(amort_cfg, seed=seed + 3)
        self.aggregator = Aggregator(config.d_model, config.n_heads, seed=seed + 4)
        self.base_pretrained = False
        self.trained = False

    def trainable_params(self):
        return (
            self.amortizer.params()
            + self.expander.params()
            + self.qencoder.params()
            + self.aggregator.params()
        )

    def all_params(self):
        return self.lm.params() + self.trainable_params()

    def checksums(self):
        """Per-network parameter checksums, for frozen/purity assertions."""
        import numpy as np

        def s(params):
            return float(sum(np.abs(p.data).sum() for p in params))

        return {
            "lm": s(self.lm.params()),
            "amortizer": s(self.amortizer.params()),
            "expander": s(self.expander.params()),
            "qencoder": s(self.qencoder.params()),
            "aggregator": s(self.aggregator.params()),
        }
