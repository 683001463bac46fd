"""TF-IDF ranking of memory indices against background batches and top-t selection."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .memory import BatchAccessCounts, count_batch_accesses
from .model import forward_loss

__all__ = [
    "BatchAccessCounts",
    "BackgroundIndexStore",
    "TrainableSet",
    "build_background_store",
    "tfidf_scores",
    "tf_only_scores",
    "uniform_scores",
    "select_top_t",
]


@dataclass(frozen=True)
class BackgroundIndexStore:
    """Document frequency of each memory index over ``num_batches`` background batches."""

    doc_freq: MappingProxyType
    num_batches: int
    corpus_label: str = ""

    def __post_init__(self):
        if self.num_batches < 1:
            raise ConfigError("background store needs at least one batch")
        frozen = MappingProxyType({int(k): int(v) for k, v in sorted(dict(self.doc_freq).items())})
        for i, df in frozen.items():
            if not 1 <= df <= self.num_batches:
                raise ValueError(f"doc_freq[{i}]={df} outside [1, {self.num_batches}]")
        object.__setattr__(self, "doc_freq", frozen)

    @classmethod
    def from_counts(cls, per_batch, corpus_label: str = "") -> "BackgroundIndexStore":
        """Build from one ``BatchAccessCounts`` (or plain index->count dict) per background batch."""
        per_batch = list(per_batch)
        if not per_batch:
            raise ConfigError("background store needs at least one batch")
        df: dict = {}
        for counts in per_batch:
            for i, c in getattr(counts, "counts", counts).items():
                if c > 0:
                    df[i] = df.get(i, 0) + 1
        return cls(df, len(per_batch), corpus_label)

    def to_bytes(self) -> bytes:
        """Stable serialization: label, B, then sorted (index, doc_freq) pairs as little-endian int64."""
        label = self.corpus_label.encode("utf-8")
        pairs = np.array(sorted(self.doc_freq.items()), dtype="<i8").reshape(-1, 2)
        header = struct.pack("<I", len(label)) + label + struct.pack("<qq", self.num_batches, pairs.shape[0])
        return header + pairs.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "BackgroundIndexStore":
        (n_label,) = struct.unpack_from("<I", blob, 0)
        label = blob[4 : 4 + n_label].decode("utf-8")
        off = 4 + n_label
        num_batches, n_pairs = struct.unpack_from("<qq", blob, off)
        off += 16
        if len(blob) != off + 16 * n_pairs:
            raise ValueError("background store blob has the wrong length")
        pairs = np.frombuffer(blob, dtype="<i8", offset=off).reshape(-1, 2)
        return cls({int(i): int(df) for i, df in pairs}, int(num_batches), label)

    def summary(self) -> str:
        return json.dumps({"label": self.corpus_label, "B": self.num_batches, "indices": len(self.doc_freq)})


@dataclass(frozen=True)
class TrainableSet:
    """Selected memory indices in rank order (score descending, index ascending on ties)."""

    indices: tuple
    scores: tuple
    t_requested: int

    def __len__(self):
        return len(self.indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)


def build_background_store(batches, model, corpus_label: str = "") -> BackgroundIndexStore:
    """Run the frozen model over each batch and record which indices every batch touched."""
    batches = list(batches)
    if not batches:
        raise ConfigError("build_background_store: empty batch list")
    per_batch = []
    with nx.no_grad():
        for batch in batches:
            _, record = forward_loss(model, batch, record_accesses=True)
            per_batch.append(count_batch_accesses([record]))
    return BackgroundIndexStore.from_counts(per_batch, corpus_label)


def tfidf_scores(batch_counts: BatchAccessCounts, store: BackgroundIndexStore) -> dict:
    """``c(i)/sum_j c(j) * ln((B + 1) / (df(i) + 1))`` for every index accessed in the batch."""
    counts = batch_counts.counts
    if not counts:
        return {}
    total = sum(counts.values())
    b = store.num_batches
    df = store.doc_freq
    return {i: (c / total) * math.log((b + 1) / (df.get(i, 0) + 1)) for i, c in counts.items() if c > 0}


def tf_only_scores(batch_counts: BatchAccessCounts) -> dict:
    counts = batch_counts.counts
    if not counts:
        return {}
    total = sum(counts.values())
    return {i: c / total for i, c in counts.items() if c > 0}


def uniform_scores(batch_counts: BatchAccessCounts) -> dict:
    """Equal score for every accessed index; ranking then falls back to index order."""
    return {i: 1.0 for i, c in batch_counts.counts.items() if c > 0}


def select_top_t(scores: dict, t: int) -> TrainableSet:
    if t < 1:
        raise ConfigError(f"top-t selection needs t >= 1, got {t}")
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:t]
    return TrainableSet(tuple(i for i, _ in ranked), tuple(s for _, s in ranked), t)
