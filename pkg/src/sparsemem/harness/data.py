"""Synthetic subject-relation-object facts, their renderings, and a filler corpus."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, LengthError
from ..model import PAD_ID, Batch
from ..numerics import make_rng

BOS, EOS, QMARK, DOT = 1, 2, 3, 4
_N_SPECIAL = 5

# S = subject tokens, R = relation, O = object; anything else is a function word
STATEMENT_TEMPLATES = (
    ("the", "R", "of", "S", "is", "O", "."),
    ("S", "has", "R", "O", "."),
    ("O", "is", "the", "R", "of", "S", "."),
    ("for", "S", ",", "the", "R", "is", "O", "."),
    ("we", "know", "that", "S", "has", "the", "R", "O", "."),
    ("the", "R", "for", "S", "was", "O", "."),
    ("about", "S", ":", "the", "R", "is", "O", "."),
    ("O", "was", "known", "as", "the", "R", "of", "S", "."),
)
QUESTION_TEMPLATE = ("what", "is", "the", "R", "of", "S", "?")


@dataclass(frozen=True)
class VocabLayout:
    """Disjoint token-id ranges ``[start, stop)`` for each token role."""

    words: dict
    relations: range
    entities: range
    values: range
    filler: range
    vocab_size: int

    @classmethod
    def for_vocab(cls, vocab_size: int, n_relations: int = 16, n_values: int = 64) -> "VocabLayout":
        names = sorted({w for t in STATEMENT_TEMPLATES + (QUESTION_TEMPLATE,) for w in t} - {"S", "R", "O", ".", "?"})
        words = {".": DOT, "?": QMARK}
        words.update({w: _N_SPECIAL + i for i, w in enumerate(names)})
        start = _N_SPECIAL + len(names)
        remaining = vocab_size - start - n_relations - n_values
        if remaining < 16:
            raise ConfigError(f"vocab_size={vocab_size} too small for the synthetic token layout")
        n_entities = remaining // 2
        rel = range(start, start + n_relations)
        ent = range(rel.stop, rel.stop + n_entities)
        val = range(ent.stop, ent.stop + n_values)
        fil = range(val.stop, vocab_size)
        return cls(words, rel, ent, val, fil, vocab_size)


@dataclass(frozen=True)
class FactRecord:
    fact_id: int
    subject: tuple
    relation: tuple
    object: tuple
    statement_templates: tuple
    question_template: int = 0

    def _render(self, template, layout: VocabLayout) -> list:
        out = []
        for sym in template:
            if sym == "S":
                out += self.subject
            elif sym == "R":
                out += self.relation
            elif sym == "O":
                out += self.object
            else:
                out.append(layout.words[sym])
        return out

    def statement(self, i: int, layout: VocabLayout) -> list:
        """Paraphrase ``i`` (cycling over this fact's templates) framed by BOS/EOS."""
        tid = self.statement_templates[i % len(self.statement_templates)]
        return [BOS] + self._render(STATEMENT_TEMPLATES[tid], layout) + [EOS]

    def question_prompt(self, layout: VocabLayout) -> list:
        return [BOS] + self._render(QUESTION_TEMPLATE, layout)

    def qa_sequence(self, layout: VocabLayout) -> list:
        return self.question_prompt(layout) + list(self.object) + [EOS]

    @property
    def key(self) -> tuple:
        return (self.subject, self.relation)


@dataclass
class FactDataset:
    pretrain_facts: list  # held-out knowledge (set A)
    stream_facts: list  # new knowledge (set B)
    filler_corpus: list  # pretraining filler sequences
    heldout_filler: list  # fixed filler sample for held-out NLL, generated apart from filler_corpus
    layout: VocabLayout
    seed: int
    n_templates: int
    transitions: np.ndarray = field(repr=False, default=None)


def _filler_chain(layout: VocabLayout, rng: np.random.Generator, branching: int = 3):
    n = len(layout.filler)
    succ = np.stack([rng.choice(n, size=branching, replace=False) for _ in range(n)])
    probs = np.array([0.6, 0.3, 0.1][:branching])
    return succ, probs / probs.sum()


def sample_filler(succ, probs, layout: VocabLayout, rng: np.random.Generator, n: int,
                  min_len: int = 10, max_len: int = 20) -> list:
    """Sequences from a sparse first-order Markov chain over the filler tokens."""
    base = layout.filler.start
    out = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        cur = int(rng.integers(len(layout.filler)))
        seq = [BOS, base + cur]
        choices = rng.choice(len(probs), size=length - 1, p=probs)
        for c in choices:
            cur = int(succ[cur, c])
            seq.append(base + cur)
        seq.append(EOS)
        out.append(seq)
    return out


def generate_fact_universe(seed: int, n_pretrain: int, n_stream: int, n_templates: int = 8,
                           vocab_size: int = 512, subject_len: int = 2, n_filler: int = 2000,
                           n_heldout_filler: int = 64) -> FactDataset:
    """Deterministic fact universe with disjoint pretraining and stream sets.

    Facts are distinct (subject, relation) pairs drawn without replacement, so
    the two sets share no pair; objects are drawn independently per fact.
    """
    if not 1 <= n_templates <= len(STATEMENT_TEMPLATES):
        raise ConfigError(f"n_templates must lie in [1, {len(STATEMENT_TEMPLATES)}]")
    layout = VocabLayout.for_vocab(vocab_size)
    n_ent, n_rel = len(layout.entities), len(layout.relations)
    capacity = n_ent ** subject_len * n_rel
    total = n_pretrain + n_stream
    if total > capacity // 2:
        raise ConfigError(f"{total} facts need more (subject, relation) pairs than the vocabulary provides ({capacity})")
    rng = make_rng(seed, stream=1)
    picked = set()
    keys = []
    while len(keys) < total:
        draw = rng.integers(0, capacity, size=2 * (total - len(keys)))
        for code in draw.tolist():
            if code not in picked:
                picked.add(code)
                keys.append(code)
                if len(keys) == total:
                    break
    objects = rng.integers(0, len(layout.values), size=total)
    facts = []
    for fid, (code, obj) in enumerate(zip(keys, objects.tolist())):
        rel, subj_code = code % n_rel, code // n_rel
        subject = []
        for _ in range(subject_len):
            subject.append(layout.entities.start + subj_code % n_ent)
            subj_code //= n_ent
        facts.append(
            FactRecord(
                fact_id=fid,
                subject=tuple(subject),
                relation=(layout.relations.start + rel,),
                object=(layout.values.start + obj,),
                statement_templates=tuple(range(n_templates)),
            )
        )
    succ, probs = _filler_chain(layout, make_rng(seed, stream=2))
    filler = sample_filler(succ, probs, layout, make_rng(seed, stream=3), n_filler)
    heldout = sample_filler(succ, probs, layout, make_rng(seed, stream=4), n_heldout_filler)
    return FactDataset(facts[:n_pretrain], facts[n_pretrain:], filler, heldout, layout, seed, n_templates, succ)


def make_batch(sequences, seq_len: int) -> Batch:
    """Right-pad sequences to ``seq_len``; every real token after BOS is a loss target."""
    tokens = np.full((len(sequences), seq_len), PAD_ID, dtype=np.int64)
    for r, s in enumerate(sequences):
        if len(s) > seq_len:
            raise LengthError(f"sequence of length {len(s)} exceeds seq_len={seq_len}")
        tokens[r, : len(s)] = s
    lengths = np.array([len(s) for s in sequences])
    pad_mask = np.arange(seq_len)[None, :] < lengths[:, None]
    loss_mask = pad_mask.copy()
    loss_mask[:, 0] = False
    return Batch(tokens, loss_mask, pad_mask)


def fact_batch(fact: FactRecord, layout: VocabLayout, batch_size: int, seq_len: int) -> Batch:
    """One fact's paraphrases filling a batch, each padded to ``seq_len``."""
    return make_batch([fact.statement(i, layout) for i in range(batch_size)], seq_len)


def chunk_batch(facts, layout: VocabLayout, batch_size: int, seq_len: int) -> Batch:
    """Several facts in one batch with a different paraphrase on every row."""
    seqs = [facts[i % len(facts)].statement(i // len(facts) + i, layout) for i in range(batch_size)]
    return make_batch(seqs, seq_len)
