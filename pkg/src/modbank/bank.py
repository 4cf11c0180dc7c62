"""Persistent store of modulations, hierarchical aggregation, reductions.

Bank file format (all integers little-endian uint32):
  magic "MACBANK1" | version=1 | T | d | count
  per entry: doc_id byte length | doc_id UTF-8 | T*d float32 little-endian
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .aggregator import EmptyMemoryError
from .amortizer import Modulation
from .tensor import Tensor

MAGIC = b"MACBANK1"
VERSION = 1


class BankError(ValueError):
    pass


class BadMagicError(BankError):
    pass


class BadVersionError(BankError):
    pass


class TruncatedBankError(BankError):
    pass


class DuplicateDocError(BankError):
    pass


@dataclass
class BankEntry:
    doc_id: str
    modulation: Modulation
    insertion_index: int


class MemoryInstrument:
    """Attention-map size accounting for one aggregation call."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.peak_attention_elements = 0
        self.total_aggregation_calls = 0
        self.levels_executed = 0

    def record_attention(self, q_len, k_len):
        self.peak_attention_elements = max(self.peak_attention_elements, q_len * k_len)

    def record_call(self):
        self.total_aggregation_calls += 1

    def record_level(self):
        self.levels_executed += 1


class MemoryBank:
    """Ordered, unique-id collection of same-shaped modulations."""

    def __init__(self, n_tokens, d_model):
        self.n_tokens = n_tokens
        self.d_model = d_model
        self.entries: list[BankEntry] = []
        self._next_index = 0

    def __len__(self):
        return len(self.entries)

    def doc_ids(self):
        return [e.doc_id for e in self.entries]

    def modulations(self):
        return [e.modulation for e in self.entries]

    def insert(self, doc_id, modulation: Modulation):
        if any(e.doc_id == doc_id for e in self.entries):
            raise DuplicateDocError(f"doc_id {doc_id!r} already stored")
        if modulation.tokens.shape != (self.n_tokens, self.d_model):
            raise BankError(
                f"modulation shape {modulation.tokens.shape} != "
                f"({self.n_tokens}, {self.d_model})"
            )
        if modulation.source_doc_id is None:
            modulation = Modulation(modulation.tokens, source_doc_id=doc_id)
        self.entries.append(BankEntry(doc_id, modulation, self._next_index))
        self._next_index += 1

    # -- reduction strategies -------------------------------------------------

    def _check_target(self, target_size):
        if target_size > len(self.entries):
            raise BankError(
                f"target size {target_size} exceeds bank size {len(self.entries)}"
            )
        if target_size < 0:
            raise BankError("target size must be >= 0")

    def reduce_random_prune(self, target_size, seed):
        """Keep a uniformly random subset, preserving order."""
        self._check_target(target_size)
        rng = np.random.default_rng(seed)
        keep = sorted(rng.choice(len(self.entries), size=target_size, replace=False))
        self.entries = [self.entries[i] for i in keep]

    @staticmethod
    def _merge(a: BankEntry, b: BankEntry) -> BankEntry:
        tokens = Tensor(0.5 * (a.modulation.tokens.data + b.modulation.tokens.data))
        doc_id = f"avg({a.doc_id}+{b.doc_id})"
        return BankEntry(doc_id, Modulation(tokens, source_doc_id=doc_id), a.insertion_index)

    def reduce_pair_average(self, target_size, seed):
        """Repeatedly average two random entries until target size is reached."""
        self._check_target(target_size)
        rng = np.random.default_rng(seed)
        while len(self.entries) > target_size:
            i, j = sorted(rng.choice(len(self.entries), size=2, replace=False))
            merged = self._merge(self.entries[i], self.entries[j])
            self.entries[i] = merged
            del self.entries[j]

    def _nearest_pair(self):
        """Argmin cosine distance over all pairs; ties by insertion indices."""
        flat = np.stack([e.modulation.tokens.data.ravel() for e in self.entries])
        norms = np.linalg.norm(flat, axis=1)
        best = None
        n = len(self.entries)
        for i in range(n):
            for j in range(i + 1, n):
                if norms[i] == 0.0 or norms[j] == 0.0:
                    dist = 1.0
                else:
                    dist = 1.0 - float(flat[i] @ flat[j]) / (norms[i] * norms[j])
                key = (
                    dist,
                    self.entries[i].insertion_index,
                    self.entries[j].insertion_index,
                )
                if best is None or key < best[0]:
                    best = (key, i, j)
        return best[1], best[2]

    def reduce_nn_average(self, target_size):
        """Repeatedly merge the closest pair by cosine distance (deterministic)."""
        self._check_target(target_size)
        if len(self.entries) > target_size and len(self.entries) < 2:
            raise BankError("need at least 2 entries to reduce")
        while len(self.entries) > target_size and len(self.entries) >= 2:
            i, j = self._nearest_pair()
            merged = self._merge(self.entries[i], self.entries[j])
            self.entries[i] = merged
            del self.entries[j]

    REDUCTIONS = ("random-prune", "pair-average", "nn-average")

    def reduce(self, strategy, target_size, seed=0):
        if strategy == "random-prune":
            self.reduce_random_prune(target_size, seed)
        elif strategy == "pair-average":
            self.reduce_pair_average(target_size, seed)
        elif strategy == "nn-average":
            self.reduce_nn_average(target_size)
        else:
            raise BankError(
                f"unknown reduction strategy {strategy!r}; valid: {self.REDUCTIONS}"
            )

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IIII", VERSION, self.n_tokens, self.d_model,
                                 len(self.entries)))
            for e in self.entries:
                raw = e.doc_id.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(e.modulation.tokens.data.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        off = 0

        def take(n):
            nonlocal off
            if off + n > len(blob):
                raise TruncatedBankError(f"bank file truncated at byte {off}")
            chunk = blob[off : off + n]
            off += n
            return chunk

        magic = take(len(MAGIC))
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}")
        version, t, d, count = struct.unpack("<IIII", take(16))
        if version != VERSION:
            raise BadVersionError(f"unsupported bank version {version}")
        bank = cls(t, d)
        for _ in range(count):
            (id_len,) = struct.unpack("<I", take(4))
            doc_id = take(id_len).decode("utf-8")
            values = np.frombuffer(take(t * d * 4), dtype="<f4").astype(np.float64)
            bank.insert(doc_id, Modulation(Tensor(values.reshape(t, d)), doc_id))
        return bank


def hierarchical_aggregate(aggregator, query_tokens, modulations, m_tokens,
                           instrument=None):
    """Divide-and-conquer aggregation over contiguous subgroups of M tokens.

    Groups ceil(M/T) modulations (= M tokens) at a time, aggregates each
    group with the same aggregator and query, and repeats on the outputs
    until a single modulation remains.  Equals plain aggregation bit-for-bit
    whenever all tokens fit in one group.
    """
    mods = list(modulations)
    if not mods:
        raise EmptyMemoryError("hierarchical aggregation over an empty memory")
    t = query_tokens.shape[0]
    if m_tokens < t:
        raise BankError(f"subgroup cardinality M={m_tokens} must be >= T={t}")
    group_size = math.ceil(m_tokens / t)
    if group_size < 2:
        group_size = 2  # guarantees each level shrinks the set
    trace = None
    while True:
        if instrument is not None:
            instrument.record_level()
        if len(mods) <= group_size:
            out, trace = aggregator.aggregate(query_tokens, mods, instrument)
            return out, trace
        nxt = []
        for start in range(0, len(mods), group_size):
            out, trace = aggregator.aggregate(
                query_tokens, mods[start : start + group_size], instrument
            )
            nxt.append(out)
        mods = nxt
