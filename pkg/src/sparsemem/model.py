"""Tiny pre-LN decoder-only transformer whose middle FFN is a product-key memory layer."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, LengthError, ShapeError
from .memory import AccessRecord, MemoryConfig, MemoryLayerParams, init_memory_params, memory_forward
from .numerics import Parameter, RowGradMask, Tensor

PAD_ID = 0

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_layers: int = 4
    n_attn_heads: int = 4
    ffn_mult: int = 4
    memory_layer_index: int = 2
    max_seq_len: int = 32
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    seed: int = 0
    dtype: str = "float32"
    init_std: float = 0.02

    def validate(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_attn_heads", "ffn_mult", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.memory_layer_index < self.n_layers:
            raise ConfigError(f"memory_layer_index={self.memory_layer_index} outside [0, {self.n_layers})")
        if self.d_model % self.n_attn_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_attn_heads={self.n_attn_heads}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")
        return self

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        mem = d.pop("memory", {})
        return cls(memory=mem if isinstance(mem, MemoryConfig) else MemoryConfig(**mem), **d)


@dataclass
class Batch:
    """Token matrix with masks. ``loss_mask[b, p]`` marks token p as a prediction target."""

    tokens: np.ndarray
    loss_mask: np.ndarray
    pad_mask: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        if self.tokens.ndim != 2 or self.loss_mask.shape != self.tokens.shape or self.pad_mask.shape != self.tokens.shape:
            raise ShapeError(
                f"batch shapes disagree: tokens {self.tokens.shape}, loss_mask {self.loss_mask.shape}, "
                f"pad_mask {self.pad_mask.shape}"
            )
        if np.any(self.loss_mask & ~self.pad_mask):
            raise ValueError("loss_mask marks padding positions")

    @property
    def shape(self):
        return self.tokens.shape


def _causal_bias(n: int, dtype) -> np.ndarray:
    return np.triu(np.full((n, n), -1e9, dtype=dtype), k=1)


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict, memory: MemoryLayerParams):
        self.config = config
        self.params = params
        self.memory = memory
        # weight name -> (A [in, r], B [r, out], scale); filled by training.lora_attach
        self.lora: dict = {}

    def parameters(self) -> dict:
        out = dict(self.params)
        for p in self.memory.parameters():
            out[p.name] = p
        for a, b, _ in self.lora.values():
            out[a.name] = a
            out[b.name] = b
        return out

    def base_parameters(self) -> dict:
        out = dict(self.params)
        for p in self.memory.parameters():
            out[p.name] = p
        return out

    def set_trainable(self, names):
        """Make exactly the named parameters trainable."""
        names = set(names)
        params = self.parameters()
        unknown = names - set(params)
        if unknown:
            raise KeyError(f"unknown parameters {sorted(unknown)}")
        for name, p in params.items():
            p.trainable = name in names

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.base_parameters().values())

    def _linear(self, x: Tensor, name: str) -> Tensor:
        out = nx.matmul(x, self.params[name])
        if name in self.lora:
            a, b, s = self.lora[name]
            out = nx.add(out, nx.scale(nx.matmul(nx.matmul(x, a), b), s))
        return out

    def _attention(self, a: Tensor, i: int, n_batch: int, n_seq: int) -> Tensor:
        cfg = self.config
        n_heads = cfg.n_attn_heads
        dh = cfg.d_model // n_heads

        def split(t):
            return nx.transpose(nx.reshape(t, (n_batch, n_seq, n_heads, dh)), (0, 2, 1, 3))

        q = split(self._linear(a, f"layers.{i}.attn.wq"))
        k = split(self._linear(a, f"layers.{i}.attn.wk"))
        v = split(self._linear(a, f"layers.{i}.attn.wv"))
        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        probs = nx.softmax_rows(nx.add(scores, _causal_bias(n_seq, scores.dtype)))
        ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (n_batch * n_seq, cfg.d_model))
        return self._linear(ctx, f"layers.{i}.attn.wo")

    def logits(self, tokens, pad_mask=None, value_mask: RowGradMask | None = None):
        """Logits ``[B*S, vocab]`` and the memory layer's access record."""
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ShapeError(f"tokens must be [batch, seq], got {tokens.shape}")
        n_batch, n_seq = tokens.shape
        if n_seq > cfg.max_seq_len:
            raise LengthError(f"sequence length {n_seq} exceeds max_seq_len={cfg.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
        if pad_mask is None:
            pad_mask = np.ones_like(tokens, dtype=bool)
        p = self.params
        h = nx.add(nx.gather_rows(p["embed"], tokens.ravel()), nx.gather_rows(p["pos"], np.tile(np.arange(n_seq), n_batch)))
        record = None
        for i in range(cfg.n_layers):
            a = nx.layer_norm(h, p[f"layers.{i}.ln1.gain"], p[f"layers.{i}.ln1.bias"])
            h = nx.add(h, self._attention(a, i, n_batch, n_seq))
            a = nx.layer_norm(h, p[f"layers.{i}.ln2.gain"], p[f"layers.{i}.ln2.bias"])
            if i == cfg.memory_layer_index:
                m, record = memory_forward(self.memory, a, pad_mask.ravel(), value_mask)
            else:
                m = self._linear(nx.silu(self._linear(a, f"layers.{i}.ffn.w_in")), f"layers.{i}.ffn.w_out")
            h = nx.add(h, m)
        h = nx.layer_norm(h, p["ln_f.gain"], p["ln_f.bias"])
        return nx.matmul(h, nx.transpose(p["embed"])), record

    def clone(self) -> "TransformerModel":
        other = init_model(self.config, _skip_init=True)
        other.load_state(self.state())
        return other

    def state(self) -> dict:
        """Base parameter arrays by name (copies)."""
        return {name: p.data.copy() for name, p in self.base_parameters().items()}

    def load_state(self, state: dict):
        params = self.base_parameters()
        if set(state) != set(params):
            raise KeyError(f"state mismatch: missing {sorted(set(params) - set(state))}, extra {sorted(set(state) - set(params))}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data[...] = arr

    def astype(self, dtype: str) -> "TransformerModel":
        other = init_model(dataclasses.replace(self.config, dtype=dtype), _skip_init=True)
        other.load_state(self.state())
        return other


def init_model(config: ModelConfig, _skip_init: bool = False) -> TransformerModel:
    """Build a model with scaled normal init; deterministic in ``config.seed``."""
    config.validate()
    dtype = config.np_dtype
    rng = nx.make_rng(config.seed)
    d, std = config.d_model, config.init_std
    resid_std = std / math.sqrt(config.n_layers)
    ffn = config.ffn_mult * d

    def normal(shape, s):
        if _skip_init:
            return np.zeros(shape, dtype)
        return (rng.standard_normal(shape) * s).astype(dtype)

    params = {}

    def add(name, value):
        params[name] = Parameter(name, value)

    add("embed", normal((config.vocab_size, d), std))
    add("pos", normal((config.max_seq_len, d), std))
    for i in range(config.n_layers):
        add(f"layers.{i}.ln1.gain", np.ones(d, dtype))
        add(f"layers.{i}.ln1.bias", np.zeros(d, dtype))
        for w in ("wq", "wk", "wv"):
            add(f"layers.{i}.attn.{w}", normal((d, d), std))
        add(f"layers.{i}.attn.wo", normal((d, d), resid_std))
        add(f"layers.{i}.ln2.gain", np.ones(d, dtype))
        add(f"layers.{i}.ln2.bias", np.zeros(d, dtype))
        if i != config.memory_layer_index:
            add(f"layers.{i}.ffn.w_in", normal((d, ffn), std))
            add(f"layers.{i}.ffn.w_out", normal((ffn, d), resid_std))
    add("ln_f.gain", np.ones(d, dtype))
    add("ln_f.bias", np.zeros(d, dtype))
    memory = init_memory_params(config.memory, d, rng, residual_std=resid_std, dtype=dtype)
    return TransformerModel(config, params, memory)


def expected_num_parameters(config: ModelConfig) -> int:
    d, L, m = config.d_model, config.n_layers, config.memory
    per_layer = 4 * d * d + 4 * d
    ffn = 2 * d * config.ffn_mult * d
    mem = m.n_mem_heads * (d * m.key_dim + 2 * m.n_keys * (m.key_dim // 2)) + m.mem_size * m.value_dim + 2 * d * m.value_dim
    return config.vocab_size * d + config.max_seq_len * d + L * per_layer + (L - 1) * ffn + 2 * d + mem


def _targets(batch: Batch):
    targets = np.zeros_like(batch.tokens)
    targets[:, :-1] = batch.tokens[:, 1:]
    mask = np.zeros_like(batch.loss_mask)
    mask[:, :-1] = batch.loss_mask[:, 1:]
    return targets.ravel(), mask.ravel()


def forward_loss(model: TransformerModel, batch: Batch, record_accesses: bool = False,
                 value_mask: RowGradMask | None = None):
    """Masked next-token loss; optionally also the pad-excluded memory access record."""
    logits, record = model.logits(batch.tokens, batch.pad_mask, value_mask)
    targets, mask = _targets(batch)
    loss = nx.cross_entropy_masked(logits, targets, mask)
    return loss, (record if record_accesses else None)


def per_sequence_nll(model: TransformerModel, batch: Batch) -> np.ndarray:
    """Mean masked NLL of each row, without recording a graph."""
    with nx.no_grad():
        logits, _ = model.logits(batch.tokens, batch.pad_mask)
    targets, mask = _targets(batch)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    nll = np.log(np.exp(z).sum(axis=-1)) - z[np.arange(z.shape[0]), targets]
    nll = (nll * mask).reshape(batch.shape)
    return nll.sum(axis=1) / np.maximum(mask.reshape(batch.shape).sum(axis=1), 1)


def greedy_answers(model: TransformerModel, prompts, answer_len: int) -> list:
    """Argmax-decode ``answer_len`` tokens after each prompt (ties go to the lower id)."""
    max_len = model.config.max_seq_len
    lengths = np.array([len(p) for p in prompts], dtype=np.int64)
    if lengths.size == 0:
        return []
    if lengths.min() < 1:
        raise LengthError("empty prompt")
    if lengths.max() > max_len - answer_len:
        raise LengthError(f"prompt of length {lengths.max()} leaves no room for {answer_len} answer tokens")
    if answer_len == 0:
        return [[] for _ in prompts]
    width = int(lengths.max()) + answer_len - 1
    buf = np.full((len(prompts), width), PAD_ID, dtype=np.int64)
    for r, p in enumerate(prompts):
        buf[r, : len(p)] = p
    rows = np.arange(len(prompts))
    out = np.zeros((len(prompts), answer_len), dtype=np.int64)
    with nx.no_grad():
        for step in range(answer_len):
            cur = lengths + step
            used = int(cur.max())
            pad = np.arange(used)[None, :] < cur[:, None]
            logits, _ = model.logits(buf[:, :used], pad)
            last = logits.data.reshape(len(prompts), used, -1)[rows, cur - 1]
            tok = np.argmax(last, axis=-1)
            out[:, step] = tok
            if step + 1 < answer_len:
                buf[rows, cur] = tok
    return out.tolist()


def greedy_answer(model: TransformerModel, prompt, answer_len: int) -> list:
    return greedy_answers(model, [list(prompt)], answer_len)[0]
