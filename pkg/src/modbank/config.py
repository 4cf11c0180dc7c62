"""Flat key=value run configuration."""

from __future__ import annotations

from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model dims
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    n_tokens: int = 4          # T: modulation tokens per document
    max_len: int = 256
    max_doc_len: int = 128
    amort_encoder_layers: int = 2
    # training
    k_train: int = 8
    n_qa: int = 8
    dropout_p: float = 0.5
    min_mode: bool = False
    lr: float = 1e-3
    warmup_epochs: int = 1
    epochs: int = 50
    pretrain_steps: int = 12000
    pretrain_lr: float = 1e-3
    # adaptation / aggregation
    m_tokens: int = 512        # M: subgroup cardinality for hierarchical aggregation
    bank_limit: int = 0        # 0 = unconstrained
    reduction: str = "nn-average"
    # paths
    checkpoint_path: str = "bundle.ckpt"
    bank_path: str = "memory.bank"
    corpus_path: str = ""
    metrics_path: str = ""
    # global seed
    seed: int = 0

    def __post_init__(self):
        if self.n_tokens > self.m_tokens:
            raise ConfigError(
                f"m_tokens ({self.m_tokens}) must be >= n_tokens ({self.n_tokens})"
            )
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ConfigError("dropout_p must be in [0, 1]")
        if self.k_train < 1:
            raise ConfigError("k_train must be >= 1")


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(name, raw):
    kind = _FIELDS[name]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean for {name}: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def load_config(path) -> RunConfig:
    """Parse a key=value file; unknown keys are rejected."""
    overrides = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in _FIELDS:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            overrides[key] = _parse_value(key, raw)
    return RunConfig(**overrides)


def save_config(config: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(RunConfig):
            value = getattr(config, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            fh.write(f"{f.name}={value}\n")
