"""Product-key memory layer: exact top-k retrieval, value readout, silu gating, access logging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .numerics import Parameter, RowGradMask, Tensor


@dataclass(frozen=True)
class MemoryConfig:
    mem_size: int = 4096
    topk: int = 8
    n_mem_heads: int = 2
    value_dim: int = 64
    key_dim: int = 32

    def __post_init__(self):
        for name in ("mem_size", "topk", "n_mem_heads", "value_dim", "key_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"memory.{name} must be positive")
        root = math.isqrt(self.mem_size)
        if root * root != self.mem_size:
            raise ConfigError(f"memory.mem_size={self.mem_size} is not a perfect square")
        if self.topk > root:
            raise ConfigError(f"memory.topk={self.topk} exceeds sqrt(mem_size)={root}")
        if self.key_dim % 2:
            raise ConfigError(f"memory.key_dim={self.key_dim} must be even")

    @property
    def n_keys(self) -> int:
        return math.isqrt(self.mem_size)


@dataclass
class MemoryLayerParams:
    config: MemoryConfig
    query: list  # per head [d_model, key_dim]
    keys1: list  # per head [sqrt(N), key_dim/2]
    keys2: list
    values: Parameter  # shared [N, value_dim]
    gate_in: Parameter  # W1 [d_model, value_dim]
    gate_out: Parameter  # W2 [value_dim, d_model]

    def parameters(self) -> list[Parameter]:
        return [*self.query, *self.keys1, *self.keys2, self.values, self.gate_in, self.gate_out]


def init_memory_params(cfg: MemoryConfig, d_model: int, rng: np.random.Generator, *, residual_std: float,
                       dtype=np.float32, prefix: str = "memory") -> MemoryLayerParams:
    half = cfg.key_dim // 2

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(dtype)

    query, keys1, keys2 = [], [], []
    for h in range(cfg.n_mem_heads):
        query.append(Parameter(f"{prefix}.query.{h}", normal((d_model, cfg.key_dim), d_model ** -0.5)))
        keys1.append(Parameter(f"{prefix}.keys1.{h}", normal((cfg.n_keys, half), half ** -0.5)))
        keys2.append(Parameter(f"{prefix}.keys2.{h}", normal((cfg.n_keys, half), half ** -0.5)))
    return MemoryLayerParams(
        config=cfg,
        query=query,
        keys1=keys1,
        keys2=keys2,
        values=Parameter(f"{prefix}.values", normal((cfg.mem_size, cfg.value_dim), cfg.value_dim ** -0.5)),
        gate_in=Parameter(f"{prefix}.gate_in", normal((d_model, cfg.value_dim), d_model ** -0.5)),
        gate_out=Parameter(f"{prefix}.gate_out", normal((cfg.value_dim, d_model), residual_std)),
    )


def _stable_topk(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on negated scores: descending, lower index first on ties
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def product_key_select(half1: np.ndarray, half2: np.ndarray, k: int):
    """Row-wise exact top-k over all composite keys from half-score matrices.

    ``half1``/``half2`` are ``[R, sqrt(N)]``. Returns ``(flat, i1, i2)``, each
    ``[R, k]``, ordered by composite score descending with ties going to the
    lower flat index.
    """
    n_keys = half1.shape[-1]
    if k > n_keys:
        raise ConfigError(f"topk={k} exceeds number of half keys {n_keys}")
    top1 = _stable_topk(half1, k)
    top2 = _stable_topk(half2, k)
    s1 = np.take_along_axis(half1, top1, axis=-1)
    s2 = np.take_along_axis(half2, top2, axis=-1)
    n_rows = half1.shape[0]
    cand_score = (s1[:, :, None] + s2[:, None, :]).reshape(n_rows, k * k)
    cand_i1 = np.repeat(top1, k, axis=1)
    cand_i2 = np.tile(top2, (1, k))
    cand_flat = cand_i1 * n_keys + cand_i2
    order = np.lexsort((cand_flat, -cand_score), axis=-1)[:, :k]
    return (
        np.take_along_axis(cand_flat, order, axis=-1),
        np.take_along_axis(cand_i1, order, axis=-1),
        np.take_along_axis(cand_i2, order, axis=-1),
    )


def product_key_topk(q_half1, q_half2, keys1, keys2, k: int):
    """Exact top-k composite keys for one query.

    The composite key of flat index ``i1 * sqrt(N) + i2`` is
    ``concat(keys1[i1], keys2[i2])``. Returns ``(indices, scores)`` as lists.
    """
    keys1, keys2 = np.asarray(keys1), np.asarray(keys2)
    if k > keys1.shape[0]:
        raise ConfigError(f"topk={k} exceeds sqrt(N)={keys1.shape[0]}")
    h1 = (keys1 @ np.asarray(q_half1))[None, :]
    h2 = (keys2 @ np.asarray(q_half2))[None, :]
    flat, i1, i2 = product_key_select(h1, h2, k)
    scores = h1[0, i1[0]] + h2[0, i2[0]]
    return flat[0].tolist(), scores.tolist()


@dataclass
class AccessRecord:
    """Memory accesses of one forward call, restricted to non-pad positions.

    ``indices`` and ``weights`` are ``[P, n_heads, k]``; ``positions`` holds the
    flat (batch * seq) row id of each of the P recorded positions.
    """

    indices: np.ndarray
    weights: np.ndarray
    positions: np.ndarray

    @property
    def n_positions(self) -> int:
        return int(self.positions.shape[0])

    def index_set(self) -> set:
        return set(np.unique(self.indices).tolist())


@dataclass
class BatchAccessCounts:
    """Access count c(i) per memory index for one batch; only indices with c(i) >= 1 appear."""

    counts: dict = field(default_factory=dict)

    def total(self) -> int:
        return sum(self.counts.values())

    def __len__(self):
        return len(self.counts)


def memory_forward(params: MemoryLayerParams, x: Tensor, pad_mask=None, value_mask: RowGradMask | None = None):
    """Memory lookup for rows of ``x`` ([R, d_model]).

    Per head the query is projected, split into halves and matched against the
    half-key tables; the k best composite keys are softmax-weighted over their
    own scores and read out from the shared value table. Head readouts are
    summed, gated by ``silu(x @ gate_in)`` and projected by ``gate_out``.
    """
    cfg = params.config
    if x.data.ndim != 2:
        raise ShapeError(f"memory_forward expects [rows, d_model], got {x.shape}")
    n_rows = x.shape[0]
    half = cfg.key_dim // 2
    keep = np.ones(n_rows, bool) if pad_mask is None else np.asarray(pad_mask, bool).reshape(n_rows)
    table = params.values if value_mask is None else nx.mask_row_grads(params.values, value_mask)

    readout = None
    head_idx, head_w = [], []
    for h in range(cfg.n_mem_heads):
        q = nx.matmul(x, params.query[h])
        s1 = nx.matmul(nx.slice_last(q, 0, half), nx.transpose(params.keys1[h]))
        s2 = nx.matmul(nx.slice_last(q, half, cfg.key_dim), nx.transpose(params.keys2[h]))
        flat, i1, i2 = product_key_select(s1.data, s2.data, cfg.topk)
        scores = nx.add(nx.take_along_rows(s1, i1), nx.take_along_rows(s2, i2))
        w = nx.softmax_rows(scores)
        y = nx.weighted_row_sum(table, flat, w)
        readout = y if readout is None else nx.add(readout, y)
        head_idx.append(flat)
        head_w.append(w.data)

    gate = nx.silu(nx.matmul(x, params.gate_in))
    out = nx.matmul(nx.mul(readout, gate), params.gate_out)
    positions = np.flatnonzero(keep)
    record = AccessRecord(
        indices=np.stack(head_idx, axis=1)[positions],
        weights=np.stack(head_w, axis=1)[positions],
        positions=positions,
    )
    return out, record


def count_batch_accesses(records) -> BatchAccessCounts:
    """Sum occurrences of each memory index over positions, heads and sequences."""
    arrays = [np.asarray(r.indices).ravel() for r in records]
    if not arrays or sum(a.size for a in arrays) == 0:
        return BatchAccessCounts({})
    idx, cnt = np.unique(np.concatenate(arrays), return_counts=True)
    return BatchAccessCounts(dict(zip(idx.tolist(), cnt.tolist())))
