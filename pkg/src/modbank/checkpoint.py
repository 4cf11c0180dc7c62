"""Binary checkpoints for the full model bundle.

Format (integers little-endian uint32 unless noted):
  magic "MACCKPT1" | version=1
  header: vocab_size d_model n_layers n_heads max_len n_tokens max_doc_len
          amort_encoder_layers
  flags: base_pretrained (u8) | trained (u8)
  then every parameter tensor as float32 little-endian, in the fixed order
  given by ModelBundle.all_params().
"""

from __future__ import annotations

import struct

import numpy as np

from .config import RunConfig
from .model import ModelBundle

MAGIC = b"MACCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class BadVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def save_bundle(bundle: ModelBundle, path):
    c = bundle.config
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(
            struct.pack(
                "<8I",
                c.vocab_size, c.d_model, c.n_layers, c.n_heads,
                c.max_len, c.n_tokens, c.max_doc_len, c.amort_encoder_layers,
            )
        )
        fh.write(struct.pack("<BB", int(bundle.base_pretrained), int(bundle.trained)))
        for p in bundle.all_params():
            fh.write(p.data.astype("<f4").tobytes())


def load_bundle(path, config: RunConfig | None = None) -> ModelBundle:
    """Rebuild a bundle; header dims override the given config's dims."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {off}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    magic = take(len(MAGIC))
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise BadVersionError(f"unsupported checkpoint version {version}")
    dims = struct.unpack("<8I", take(32))
    base_pretrained, trained = struct.unpack("<BB", take(2))
    if config is None:
        config = RunConfig()
    cfg = RunConfig(
        **{
            **config.__dict__,
            "vocab_size": dims[0],
            "d_model": dims[1],
            "n_layers": dims[2],
            "n_heads": dims[3],
            "max_len": dims[4],
            "n_tokens": dims[5],
            "max_doc_len": dims[6],
            "amort_encoder_layers": dims[7],
        }
    )
    bundle = ModelBundle(cfg)
    for p in bundle.all_params():
        raw = take(p.data.size * 4)
        p.data = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(p.data.shape)
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes in checkpoint")
    bundle.lm.freeze()
    bundle.base_pretrained = bool(base_pretrained)
    bundle.trained = bool(trained)
    return bundle
