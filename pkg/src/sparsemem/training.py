"""Optimizers and per-method update steps (sparse memory, all-memory, TF-only, full, LoRA)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .memory import count_batch_accesses
from .model import Batch, TransformerModel, forward_loss
from .numerics import Parameter, RowGradMask
from .ranking import BackgroundIndexStore, select_top_t, tf_only_scores, tfidf_scores, uniform_scores

VALUES = "memory.values"
METHODS = ("sparse_memory", "memory_all", "memory_tf_only", "full", "lora")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 1.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None

    def validate(self):
        if self.kind not in ("sgd", "adamw"):
            raise ConfigError(f"optimizer kind must be 'sgd' or 'adamw', got {self.kind!r}")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")
        return self


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float = 4.0
    target: str = "all_linear"
    lr: float | None = None  # overrides the optimizer lr when set

    def validate(self):
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.target not in ("all_linear", "attention_only"):
            raise ConfigError(f"LoRA target must be 'all_linear' or 'attention_only', got {self.target!r}")
        return self


@dataclass(frozen=True)
class MethodSpec:
    method: str = "sparse_memory"
    t: int | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lora: LoraConfig | None = None

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        needs_t = self.method in ("sparse_memory", "memory_tf_only")
        if needs_t and self.t is None:
            raise ConfigError(f"method {self.method} requires t")
        if not needs_t and self.t is not None:
            raise ConfigError(f"method {self.method} does not take t")
        if needs_t and self.t < 1:
            raise ConfigError(f"t must be >= 1, got {self.t}")
        if (self.method == "lora") != (self.lora is not None):
            raise ConfigError("a LoRA config is required for method 'lora' and only for it")
        self.optimizer.validate()
        if self.lora is not None:
            self.lora.validate()
        return self

    def label(self) -> str:
        o = self.optimizer
        parts = [self.method, f"{o.kind}", f"lr={o.lr:g}"]
        if self.t is not None:
            parts.append(f"t={self.t}")
        if self.lora is not None:
            parts.append(f"r={self.lora.rank},a={self.lora.alpha:g},{self.lora.target}")
        return " ".join(parts)

    @classmethod
    def from_dict(cls, d: dict) -> "MethodSpec":
        d = dict(d)
        opt = d.pop("optimizer", {})
        lora = d.pop("lora", None)
        return cls(
            optimizer=opt if isinstance(opt, OptimizerConfig) else OptimizerConfig(**opt),
            lora=lora if lora is None or isinstance(lora, LoraConfig) else LoraConfig(**lora),
            **d,
        )


@dataclass
class StepReport:
    step: int
    method: str
    loss: float
    n_trainable: int
    lr: float
    grad_norm: float
    trained_indices: tuple = ()

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "method": self.method,
            "loss": self.loss,
            "n_trainable": self.n_trainable,
            "lr": self.lr,
            "grad_norm": self.grad_norm,
        }


# -- optimizers ----------------------------------------------------------------


def _row_view(p: Parameter, rows):
    return p.grad if rows is None else p.grad[rows]


def _clip_factor(params, rows: dict, max_norm: float | None) -> float:
    if max_norm is None:
        return 1.0
    sq = sum(float(np.sum(_row_view(p, rows.get(p.name)) ** 2)) for p in params)
    norm = np.sqrt(sq)
    return 1.0 if norm <= max_norm else max_norm / (norm + 1e-12)


def sgd_update(params, lr: float, rows: dict | None = None, grad_scale: float = 1.0):
    """Plain SGD ``theta -= lr * g``; ``rows`` restricts a parameter's update to the given row indices."""
    rows = rows or {}
    for p in params:
        r = rows.get(p.name)
        if r is None:
            p.data -= (lr * grad_scale) * p.grad
        else:
            p.data[r] -= (lr * grad_scale) * p.grad[r]


class _RowMoments:
    """AdamW moments allocated lazily, one slot per row that has ever been trained."""

    def __init__(self, n_rows: int, width: int, dtype):
        self.slot_of = np.full(n_rows, -1, dtype=np.int64)
        self.m = np.zeros((0, width), dtype)
        self.v = np.zeros((0, width), dtype)
        self.steps = np.zeros(0, dtype=np.int64)

    def slots(self, rows: np.ndarray) -> np.ndarray:
        missing = rows[self.slot_of[rows] < 0]
        if missing.size:
            start = self.steps.size
            self.slot_of[missing] = np.arange(start, start + missing.size)
            width = self.m.shape[1]
            self.m = np.concatenate([self.m, np.zeros((missing.size, width), self.m.dtype)])
            self.v = np.concatenate([self.v, np.zeros((missing.size, width), self.v.dtype)])
            self.steps = np.concatenate([self.steps, np.zeros(missing.size, np.int64)])
        return self.slot_of[rows]

    @property
    def n_allocated(self) -> int:
        return int(self.steps.size)


@dataclass
class AdamWState:
    dense: dict = field(default_factory=dict)  # name -> [m, v, step]
    rows: dict = field(default_factory=dict)  # name -> _RowMoments


def adamw_update(state: AdamWState, params, cfg: OptimizerConfig, rows: dict | None = None,
                 grad_scale: float = 1.0):
    """Decoupled-weight-decay Adam with bias correction.

    For a row-restricted parameter only the listed rows move: their moments and
    per-row step counts advance and decay applies to them alone.
    """
    rows = rows or {}
    b1, b2, lr, wd, eps = cfg.beta1, cfg.beta2, cfg.lr, cfg.weight_decay, cfg.eps
    for p in params:
        r = rows.get(p.name)
        if r is None:
            m, v, t = state.dense.setdefault(p.name, [np.zeros_like(p.data), np.zeros_like(p.data), 0])
            g = p.grad * grad_scale
            t += 1
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            state.dense[p.name][2] = t
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            if wd:
                p.data *= 1 - lr * wd
            p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        else:
            r = np.asarray(r, dtype=np.int64)
            if r.size == 0:
                continue
            store = state.rows.get(p.name)
            if store is None:
                store = state.rows[p.name] = _RowMoments(p.shape[0], int(np.prod(p.shape[1:])), p.dtype)
            s = store.slots(r)
            g = p.grad[r].reshape(r.size, -1) * grad_scale
            store.steps[s] += 1
            t = store.steps[s][:, None]
            store.m[s] = b1 * store.m[s] + (1 - b1) * g
            store.v[s] = b2 * store.v[s] + (1 - b2) * g * g
            m_hat = store.m[s] / (1 - b1 ** t)
            v_hat = store.v[s] / (1 - b2 ** t)
            cur = p.data[r].reshape(r.size, -1)
            if wd:
                cur = cur * (1 - lr * wd)
            cur = cur - lr * m_hat / (np.sqrt(v_hat) + eps)
            p.data[r] = cur.reshape(p.data[r].shape).astype(p.dtype, copy=False)


class Optimizer:
    """Holds an optimizer config plus any AdamW state across steps."""

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg.validate()
        self.state = AdamWState()

    def step(self, params, rows: dict | None = None):
        params = [p for p in params if p.trainable]
        scale = _clip_factor(params, rows or {}, self.cfg.grad_clip)
        if self.cfg.kind == "sgd":
            sgd_update(params, self.cfg.lr, rows, scale)
        else:
            adamw_update(self.state, params, self.cfg, rows, scale)


def make_optimizer(cfg: OptimizerConfig) -> Optimizer:
    return Optimizer(cfg)


# -- LoRA ----------------------------------------------------------------------


@dataclass
class LoraAdapters:
    config: LoraConfig
    factors: dict  # weight name -> (A, B)
    scale: float

    def parameters(self) -> list:
        return [p for pair in self.factors.values() for p in pair]


def lora_targets(model: TransformerModel, target: str) -> list:
    names = []
    for i in range(model.config.n_layers):
        names += [f"layers.{i}.attn.{w}" for w in ("wq", "wk", "wv", "wo")]
        if target == "all_linear" and i != model.config.memory_layer_index:
            names += [f"layers.{i}.ffn.w_in", f"layers.{i}.ffn.w_out"]
    return names


def lora_attach(model: TransformerModel, cfg: LoraConfig, seed: int = 0) -> LoraAdapters:
    """Attach ``W + (alpha / r) * A @ B`` adapters with ``B = 0``; freezes the base model."""
    cfg.validate()
    rng = nx.make_rng(seed, stream=7)
    dtype = model.config.np_dtype
    factors = {}
    for name in lora_targets(model, cfg.target):
        n_in, n_out = model.params[name].shape
        if cfg.rank > min(n_in, n_out):
            raise ConfigError(f"LoRA rank {cfg.rank} exceeds min dim of {name} {model.params[name].shape}")
        a = Parameter(f"lora.{name}.A", (rng.standard_normal((n_in, cfg.rank)) / np.sqrt(n_in)).astype(dtype))
        b = Parameter(f"lora.{name}.B", np.zeros((cfg.rank, n_out), dtype))
        factors[name] = (a, b)
    adapters = LoraAdapters(cfg, factors, cfg.alpha / cfg.rank)
    model.lora = {name: (a, b, adapters.scale) for name, (a, b) in factors.items()}
    model.set_trainable([p.name for p in adapters.parameters()])
    return adapters


def lora_detach(model: TransformerModel):
    model.lora = {}


# -- steps -----------------------------------------------------------------------


def _require_memory(model: TransformerModel):
    if getattr(model, "memory", None) is None:
        raise ConfigError("model has no memory layer")


def _grad_norm(params, rows: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(_row_view(p, rows.get(p.name)).astype(np.float64) ** 2)) for p in params)))


def _memory_step(model, batch, opt: Optimizer, rank_fn, t, method: str, step: int) -> StepReport:
    _require_memory(model)
    model.set_trainable([VALUES])
    values = model.memory.values
    mask = RowGradMask()
    loss, record = forward_loss(model, batch, record_accesses=True, value_mask=mask)
    counts = count_batch_accesses([record])
    selected = select_top_t(rank_fn(counts), t if t is not None else max(len(counts), 1))
    rows = np.zeros(values.shape[0], dtype=bool)
    trained = np.sort(selected.as_array())
    rows[trained] = True
    mask.rows = rows
    nx.zero_grads([values])
    nx.backward(loss)
    row_map = {VALUES: trained}
    gnorm = _grad_norm([values], row_map)
    opt.step([values], row_map)
    return StepReport(step, method, float(loss.data), len(trained), opt.cfg.lr, gnorm, tuple(trained.tolist()))


def sparse_memory_step(model: TransformerModel, batch: Batch, store: BackgroundIndexStore, t: int,
                       opt: Optimizer, *, step: int = 0, ranking: str = "tfidf") -> StepReport:
    """Train only the value rows of the top-t memory indices for this batch.

    ``ranking`` is ``"tfidf"`` (against ``store``), ``"tf"`` or ``"uniform"``.
    """
    if t is None or t < 1:
        raise ConfigError(f"sparse_memory_step needs t >= 1, got {t}")
    if ranking == "tfidf":
        if store is None:
            raise ConfigError("TF-IDF ranking needs a background store")
        rank_fn = lambda c: tfidf_scores(c, store)  # noqa: E731
    elif ranking == "tf":
        rank_fn = tf_only_scores
    elif ranking == "uniform":
        rank_fn = uniform_scores
    else:
        raise ConfigError(f"unknown ranking {ranking!r}")
    method = {"tfidf": "sparse_memory", "tf": "memory_tf_only", "uniform": "sparse_memory_uniform"}[ranking]
    return _memory_step(model, batch, opt, rank_fn, t, method, step)


def memory_all_step(model: TransformerModel, batch: Batch, opt: Optimizer, *, step: int = 0) -> StepReport:
    """Train the value rows of every index accessed on the batch; everything else frozen."""
    return _memory_step(model, batch, opt, uniform_scores, None, "memory_all", step)


def full_step(model: TransformerModel, batch: Batch, opt: Optimizer, *, step: int = 0) -> StepReport:
    names = list(model.base_parameters())
    model.set_trainable(names)
    params = [model.parameters()[n] for n in names]
    loss, _ = forward_loss(model, batch)
    nx.zero_grads(params)
    nx.backward(loss)
    gnorm = _grad_norm(params, {})
    opt.step(params)
    return StepReport(step, "full", float(loss.data), sum(p.data.size for p in params), opt.cfg.lr, gnorm)


def lora_step(model: TransformerModel, adapters: LoraAdapters, batch: Batch, opt: Optimizer, *,
              step: int = 0) -> StepReport:
    params = adapters.parameters()
    model.set_trainable([p.name for p in params])
    loss, _ = forward_loss(model, batch)
    nx.zero_grads(params)
    nx.backward(loss)
    gnorm = _grad_norm(params, {})
    opt.step(params)
    return StepReport(step, "lora", float(loss.data), sum(p.data.size for p in params), opt.cfg.lr, gnorm)


class MethodRunner:
    """Binds a model to one finetuning method and its optimizer state."""

    def __init__(self, model: TransformerModel, spec: MethodSpec, store: BackgroundIndexStore | None = None,
                 seed: int = 0):
        spec.validate()
        if spec.method == "sparse_memory" and store is None:
            raise ConfigError("sparse_memory needs a background store")
        self.model = model
        self.spec = spec
        self.store = store
        opt_cfg = spec.optimizer
        if spec.lora is not None and spec.lora.lr is not None:
            opt_cfg = dataclasses.replace(opt_cfg, lr=spec.lora.lr)
        self.opt = make_optimizer(opt_cfg)
        self.adapters = lora_attach(model, spec.lora, seed) if spec.method == "lora" else None

    def step(self, batch: Batch, step: int) -> StepReport:
        m = self.spec.method
        if m == "sparse_memory":
            return sparse_memory_step(self.model, batch, self.store, self.spec.t, self.opt, step=step)
        if m == "memory_tf_only":
            return sparse_memory_step(self.model, batch, None, self.spec.t, self.opt, step=step, ranking="tf")
        if m == "memory_all":
            return memory_all_step(self.model, batch, self.opt, step=step)
        if m == "full":
            return full_step(self.model, batch, self.opt, step=step)
        return lora_step(self.model, self.adapters, batch, self.opt, step=step)

    def trainable_params_per_batch(self, last: StepReport | None) -> int:
        """Trainable scalar count of one step: selected rows times value width for memory methods."""
        if last is None:
            return 0
        if self.spec.method in ("sparse_memory", "memory_tf_only", "memory_all"):
            return last.n_trainable * self.model.memory.values.shape[1]
        return last.n_trainable
