"""Continual-learning protocol: pretrain a base, stream new facts, measure learning and forgetting."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .. import numerics as nx
from ..errors import ConfigError, TrainingFailure
from ..memory import count_batch_accesses
from ..model import ModelConfig, TransformerModel, forward_loss, greedy_answers, init_model, per_sequence_nll
from ..ranking import BackgroundIndexStore, build_background_store
from ..training import MethodRunner, MethodSpec, OptimizerConfig, full_step, make_optimizer
from .checkpoint import Checkpoint, canonical_json, rng_state
from .data import FactDataset, fact_batch, generate_fact_universe, make_batch

# rng stream ids, so each consumer draws from its own counter space
_PRETRAIN_STREAM = 11
_BACKGROUND_STREAM = 12
_ORDER_STREAM = 13


def _from_dict(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class DataConfig:
    n_pretrain: int = 256
    n_stream: int = 200
    n_templates: int = 8
    subject_len: int = 2
    n_filler: int = 20000
    n_heldout_filler: int = 64
    qa_fraction: float = 0.5  # share of set A whose questions appear in pretraining

    def validate(self):
        if not 0.0 < self.qa_fraction <= 1.0:
            raise ConfigError("qa_fraction must lie in (0, 1]")
        if min(self.n_pretrain, self.n_stream) < 1:
            raise ConfigError("both fact sets must be nonempty")
        return self


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 3000
    seq_len: int = 32
    n_statements: int = 12  # per batch
    n_questions: int = 8
    n_filler: int = 12
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig("adamw", 3e-3))
    eval_every: int = 250
    target_acc: float = 0.9
    background_batches: int = 100

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        opt = d.pop("optimizer", None)
        if opt is not None and not isinstance(opt, OptimizerConfig):
            d["optimizer"] = _from_dict(OptimizerConfig, opt)
        elif opt is not None:
            d["optimizer"] = opt
        return _from_dict(cls, d)


@dataclass(frozen=True)
class StreamConfig:
    method: MethodSpec = field(default_factory=lambda: MethodSpec("sparse_memory", t=100, optimizer=OptimizerConfig("sgd", 50.0)))
    batch_size: int = 16
    seq_len: int = 32
    paraphrases_per_fact: int = 16
    steps_per_fact: int = 10
    eval_every: int = 10  # in facts
    n_facts: int | None = None  # None streams all of set B
    background: str = "pretrain"  # or "stream": rank against the stream's own batches

    def validate(self):
        if self.paraphrases_per_fact != self.batch_size:
            raise ConfigError("paraphrases_per_fact must equal batch_size")
        if self.steps_per_fact < 1 or self.eval_every < 1:
            raise ConfigError("steps_per_fact and eval_every must be >= 1")
        if self.background not in ("pretrain", "stream"):
            raise ConfigError(f"background must be 'pretrain' or 'stream', got {self.background!r}")
        self.method.validate()
        return self

    @property
    def t(self):
        return self.method.t

    @classmethod
    def from_dict(cls, d: dict) -> "StreamConfig":
        d = dict(d)
        if "method" in d and not isinstance(d["method"], MethodSpec):
            d["method"] = MethodSpec.from_dict(d["method"])
        return _from_dict(cls, d)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            model=ModelConfig.from_dict(d.get("model", {})),
            data=_from_dict(DataConfig, d.get("data", {})),
            pretrain=PretrainConfig.from_dict(d.get("pretrain", {})),
            stream=StreamConfig.from_dict(d.get("stream", {})),
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, model=dataclasses.replace(self.model, seed=seed))


@dataclass
class EvalReport:
    step: int
    facts_seen: int
    target_acc: float
    heldout_acc: float
    heldout_nll: float
    trained_rows: int = 0  # distinct value rows updated so far (memory methods)
    max_row_updates: int = 0
    loss: float | None = None

    def to_record(self) -> dict:
        return dataclasses.asdict(self)


def make_dataset(cfg: ExperimentConfig) -> FactDataset:
    d = cfg.data.validate()
    return generate_fact_universe(cfg.model.seed, d.n_pretrain, d.n_stream, d.n_templates,
                                  vocab_size=cfg.model.vocab_size, subject_len=d.subject_len,
                                  n_filler=d.n_filler, n_heldout_filler=d.n_heldout_filler)


def n_qa_facts(dataset: FactDataset, data_cfg: DataConfig) -> int:
    return max(1, int(round(len(dataset.pretrain_facts) * data_cfg.qa_fraction)))


def pretrain_batch(dataset: FactDataset, cfg: ExperimentConfig, rng: np.random.Generator):
    """Set-A statements, set-A question/answer pairs and filler, mixed i.i.d."""
    p, L, facts = cfg.pretrain, dataset.layout, dataset.pretrain_facts
    n_qa = n_qa_facts(dataset, cfg.data)
    seqs = [facts[i].statement(int(j), L)
            for i, j in zip(rng.integers(len(facts), size=p.n_statements), rng.integers(dataset.n_templates, size=p.n_statements))]
    seqs += [facts[i].qa_sequence(L) for i in rng.integers(n_qa, size=p.n_questions)]
    seqs += [dataset.filler_corpus[i] for i in rng.integers(len(dataset.filler_corpus), size=p.n_filler)]
    return make_batch(seqs, p.seq_len)


def qa_accuracy(model: TransformerModel, facts, layout) -> float:
    if not facts:
        return 0.0
    answers = greedy_answers(model, [f.question_prompt(layout) for f in facts], len(facts[0].object))
    return float(np.mean([a == list(f.object) for a, f in zip(answers, facts)]))


def heldout_nll(model: TransformerModel, dataset: FactDataset, seq_len: int = 32) -> float:
    return float(per_sequence_nll(model, make_batch(dataset.heldout_filler, seq_len)).mean())


def evaluate(model: TransformerModel, dataset: FactDataset, target_facts=None, seq_len: int = 32,
             step: int = 0, facts_seen: int = 0) -> EvalReport:
    """Exact-match QA on set A (held out) and the target facts, plus filler NLL."""
    target = dataset.stream_facts if target_facts is None else target_facts
    return EvalReport(
        step=step,
        facts_seen=facts_seen,
        target_acc=qa_accuracy(model, list(target), dataset.layout),
        heldout_acc=qa_accuracy(model, dataset.pretrain_facts, dataset.layout),
        heldout_nll=heldout_nll(model, dataset, seq_len),
    )


def pretrain_base(dataset: FactDataset, cfg: ExperimentConfig, steps: int | None = None, log=None):
    """Train a base on set A plus filler; returns (model, checkpoint, curve).

    The checkpoint carries a background store built from fresh pretraining-style
    batches. Raises TrainingFailure with the curve if set-A accuracy stays below
    the configured target.
    """
    steps = cfg.pretrain.steps if steps is None else steps
    model = init_model(cfg.model)
    opt = make_optimizer(cfg.pretrain.optimizer)
    rng = nx.make_rng(cfg.model.seed, _PRETRAIN_STREAM)
    curve = []
    for step in range(steps):
        rep = full_step(model, pretrain_batch(dataset, cfg, rng), opt, step=step)
        if (step + 1) % cfg.pretrain.eval_every == 0 or step + 1 == steps:
            acc = qa_accuracy(model, dataset.pretrain_facts, dataset.layout)
            point = {"step": step + 1, "loss": rep.loss, "heldout_acc": acc, "heldout_nll": heldout_nll(model, dataset)}
            curve.append(point)
            if log is not None:
                log(point)
    if not curve or curve[-1]["heldout_acc"] < cfg.pretrain.target_acc:
        final = curve[-1]["heldout_acc"] if curve else 0.0
        raise TrainingFailure(f"set-A accuracy {final:.3f} below {cfg.pretrain.target_acc} after {steps} steps", curve)
    store = pretrain_background(model, dataset, cfg)
    ckpt = Checkpoint.from_model(model, store, rng_state(rng), {"experiment": cfg.to_dict(), "curve": curve})
    return model, ckpt, curve


def pretrain_background(model, dataset: FactDataset, cfg: ExperimentConfig) -> BackgroundIndexStore:
    rng = nx.make_rng(cfg.model.seed, _BACKGROUND_STREAM)
    batches = [pretrain_batch(dataset, cfg, rng) for _ in range(cfg.pretrain.background_batches)]
    return build_background_store(batches, model, "pretrain")


def stream_facts(dataset: FactDataset, stream: StreamConfig, seed: int) -> list:
    """The ordered facts of one stream: a seed-dependent draw from set B."""
    n = len(dataset.stream_facts) if stream.n_facts is None else stream.n_facts
    if not 1 <= n <= len(dataset.stream_facts):
        raise ConfigError(f"n_facts must lie in [1, {len(dataset.stream_facts)}]")
    order = nx.make_rng(seed, _ORDER_STREAM).permutation(len(dataset.stream_facts))[:n]
    return [dataset.stream_facts[i] for i in order]


def stream_background(model, dataset: FactDataset, stream: StreamConfig, facts) -> BackgroundIndexStore:
    """Background built from the stream's own training batches."""
    batches = [fact_batch(f, dataset.layout, stream.batch_size, stream.seq_len) for f in facts]
    return build_background_store(batches, model, "stream")


def run_continual_stream(model: TransformerModel, dataset: FactDataset, stream: StreamConfig,
                         store: BackgroundIndexStore | None, seed: int = 0, on_report=None) -> list:
    """Present facts one at a time, ``steps_per_fact`` updates each, evaluating every ``eval_every`` facts.

    Target accuracy is measured over the fixed set of all facts in this stream,
    so it starts near chance and rises as facts are learned.
    """
    stream.validate()
    facts = stream_facts(dataset, stream, seed)
    if stream.background == "stream" and stream.method.method == "sparse_memory":
        store = stream_background(model, dataset, stream, facts)
    runner = MethodRunner(model, stream.method, store, seed=seed)
    reports = []
    touched = np.zeros(model.memory.values.shape[0], dtype=np.int64)

    def emit(step, n_seen, loss):
        rep = evaluate(model, dataset, facts, stream.seq_len, step, n_seen)
        rep.trained_rows = int(np.count_nonzero(touched))
        rep.max_row_updates = int(touched.max())
        rep.loss = loss
        reports.append(rep)
        if on_report is not None:
            on_report(rep)

    emit(0, 0, None)
    step = 0
    for i, fact in enumerate(facts):
        batch = fact_batch(fact, dataset.layout, stream.batch_size, stream.seq_len)
        for _ in range(stream.steps_per_fact):
            last = runner.step(batch, step)
            touched[list(last.trained_indices)] += 1
            step += 1
        if (i + 1) % stream.eval_every == 0 or i + 1 == len(facts):
            emit(step, i + 1, last.loss)
    return reports


def metrics_jsonl(records) -> bytes:
    """One canonical JSON object per line; equal inputs give equal bytes."""
    return b"".join(canonical_json(r) + b"\n" for r in records)


def core_set_from_index_sets(sets) -> set:
    sets = [set(s) for s in sets]
    return set.intersection(*sets) if sets else set()


def compute_core_set(model: TransformerModel, fact, layout, paraphrases=None, seq_len: int = 32):
    """Indices shared by every paraphrase and the question, plus per-token core membership.

    Returns ``(core, membership)`` where core is a sorted index array and
    membership lists, for each sequence (paraphrases first, question last), the
    number of that token's accessed indices that fall in the core set.
    """
    if paraphrases is None:
        paraphrases = [fact.statement(i, layout) for i in range(len(fact.statement_templates))]
    seqs = list(paraphrases) + [fact.question_prompt(layout)]
    per_seq = []
    with nx.no_grad():
        for s in seqs:
            _, rec = forward_loss(model, make_batch([s], seq_len), record_accesses=True)
            per_seq.append(rec.indices.reshape(rec.n_positions, -1))
    core = core_set_from_index_sets(np.unique(ix).tolist() for ix in per_seq)
    core_arr = np.array(sorted(core), dtype=np.int64)
    membership = [np.isin(ix, core_arr).sum(axis=1).tolist() for ix in per_seq]
    return core_arr, membership


SWEEP_COLUMNS = ("label", "method", "optimizer", "lr", "t", "lora_rank", "lora_alpha", "target_acc",
                 "heldout_acc", "heldout_acc_drop", "heldout_nll", "heldout_nll_increase",
                 "trainable_params_per_batch", "status")


def _sweep_row(spec: MethodSpec, status="ok") -> dict:
    return {
        "label": spec.label(), "method": spec.method, "optimizer": spec.optimizer.kind, "lr": spec.optimizer.lr,
        "t": spec.t, "lora_rank": spec.lora.rank if spec.lora else None,
        "lora_alpha": spec.lora.alpha if spec.lora else None, "status": status,
    }


def run_arm(base: TransformerModel, dataset: FactDataset, stream: StreamConfig, store, seed: int) -> dict:
    """One stream from a copy of ``base``; returns a flat result row."""
    model = base.clone()
    reports = run_continual_stream(model, dataset, stream, store, seed)
    first, last = reports[0], reports[-1]
    runner_params = _trainable_per_batch(model, stream, dataset, store, seed)
    row = _sweep_row(stream.method)
    row.update(
        target_acc=last.target_acc, heldout_acc=last.heldout_acc,
        heldout_acc_drop=first.heldout_acc - last.heldout_acc, heldout_nll=last.heldout_nll,
        heldout_nll_increase=last.heldout_nll - first.heldout_nll, trainable_params_per_batch=runner_params,
        seed=seed, background=stream.background,
    )
    return row


def _trainable_per_batch(model, stream: StreamConfig, dataset, store, seed) -> int:
    spec = stream.method
    if spec.method in ("sparse_memory", "memory_tf_only"):
        return spec.t * model.memory.values.shape[1]
    if spec.method == "full":
        return model.num_parameters()
    if spec.method == "lora":
        return sum(p.data.size for p in model.parameters().values() if p.trainable)
    # memory_all: rows accessed by the first fact batch of the stream
    fact = stream_facts(dataset, stream, seed)[0]
    with nx.no_grad():
        _, rec = forward_loss(model, fact_batch(fact, dataset.layout, stream.batch_size, stream.seq_len), record_accesses=True)
    return len(count_batch_accesses([rec])) * model.memory.values.shape[1]


def pareto_sweep(grid, base: TransformerModel, dataset: FactDataset, stream: StreamConfig,
                 store, seed: int = 0) -> list:
    """Run one stream per MethodSpec; a failing run becomes a row with its error, the rest continue."""
    rows = []
    for spec in grid:
        try:
            rows.append(run_arm(base, dataset, dataclasses.replace(stream, method=spec), store, seed))
        except Exception as exc:  # a broken arm must not abort the sweep
            rows.append(_sweep_row(spec, status=f"failed: {type(exc).__name__}: {exc}"))
    return rows


def sweep_csv(rows) -> str:
    extra = sorted({k for r in rows for k in r} - set(SWEEP_COLUMNS))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(SWEEP_COLUMNS) + extra, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in writer.fieldnames})
    return buf.getvalue()


def ablate(base: TransformerModel, dataset: FactDataset, stream: StreamConfig, store, seeds=(0,),
           arms=("tfidf", "tf_only", "memory_all", "stream_background")) -> list:
    """Ranking and background-corpus arms sharing the stream's optimizer and t."""
    t, opt = stream.method.t or 100, stream.method.optimizer
    specs = {
        "tfidf": (MethodSpec("sparse_memory", t=t, optimizer=opt), "pretrain"),
        "tf_only": (MethodSpec("memory_tf_only", t=t, optimizer=opt), "pretrain"),
        "memory_all": (MethodSpec("memory_all", optimizer=opt), "pretrain"),
        "stream_background": (MethodSpec("sparse_memory", t=t, optimizer=opt), "stream"),
    }
    rows = []
    for seed in seeds:
        for arm in arms:
            spec, bg = specs[arm]
            cfg = dataclasses.replace(stream, method=spec, background=bg)
            try:
                row = run_arm(base, dataset, cfg, store, seed)
            except Exception as exc:
                row = _sweep_row(spec, status=f"failed: {type(exc).__name__}: {exc}")
            row.update(arm=arm, seed=seed)
            rows.append(row)
    return rows


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)
