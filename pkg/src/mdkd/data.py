"""Corpus handling: vocab, tokenization, TSV ingestion, batching, and a
synthetic sentence-pair task.

Tokenization is whitespace-lowercase against a generated vocab, packed
BERT-style: [CLS] a [SEP] for single sentences, [CLS] a [SEP] b [SEP] for
pairs, padded to max_len with segment ids 0 over the a-span and 1 over the
b-span. When a pair overflows, tokens are dropped from the longer span first.

The synthetic task is a paraphrase stand-in: two bags of symbol tokens are
labeled 1 exactly when their overlap coefficient |a & b| / min(|a|, |b|)
reaches 0.5. Generation is constructive (the overlap size is sampled per
target label, from well-separated high/low bands), so labels are exact and
classes stay balanced by alternation.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")


class Vocab:
    """Dense token -> id map with the four reserved ids fixed."""

    def __init__(self, tokens=()):
        self._ids = {tok: i for i, tok in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self._ids:
            self._ids[token] = len(self._ids)
        return self._ids[token]

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def tokens(self) -> list[str]:
        out = [None] * len(self._ids)
        for tok, i in self._ids.items():
            out[i] = tok
        return out

    def save(self, path: str) -> None:
        write_atomic(path, "".join(tok + "\n" for tok in self.tokens()))

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]
        if tuple(lines[:4]) != RESERVED:
            raise DataError(f"{path}: first four vocab entries must be {RESERVED}, got {lines[:4]}")
        return cls(lines[4:])


@dataclass(frozen=True)
class Example:
    text_a: str
    text_b: str | None = None
    label: int | None = None


@dataclass
class Batch:
    ids: np.ndarray        # [N, L] token ids
    mask: np.ndarray       # [N, L] bool, True on real tokens
    segments: np.ndarray   # [N, L] 0 for the a-span, 1 for the b-span
    labels: np.ndarray | None = None


def tokenize(example: Example, vocab: Vocab, max_len: int):
    """Pack one example into (ids, mask, segments) lists of length max_len."""
    if max_len < 4:
        raise ConfigError(f"max_len must be >= 4, got {max_len}")
    toks_a = example.text_a.lower().split()
    toks_b = example.text_b.lower().split() if example.text_b is not None else None
    # budget excludes [CLS] and the trailing [SEP](s)
    budget = max_len - 2 - (1 if toks_b is not None else 0)
    if toks_b is None:
        toks_a = toks_a[:budget]
    else:
        while len(toks_a) + len(toks_b) > budget:
            if len(toks_a) > len(toks_b):
                toks_a.pop()
            else:
                toks_b.pop()
    ids = [CLS_ID] + [vocab.id_of(t) for t in toks_a] + [SEP_ID]
    segments = [0] * len(ids)
    if toks_b is not None:
        ids += [vocab.id_of(t) for t in toks_b] + [SEP_ID]
        segments += [1] * (len(toks_b) + 1)
    mask = [1] * len(ids)
    pad = max_len - len(ids)
    return ids + [PAD_ID] * pad, mask + [0] * pad, segments + [0] * pad


@dataclass(frozen=True)
class TsvSchema:
    """Column indices into a tab-separated file; text_b/label may be absent."""

    text_a: int = 0
    text_b: int | None = 1
    label: int | None = 2
    skip_header: bool = False


def load_tsv(path: str, schema: TsvSchema = TsvSchema(),
             n_classes: int | None = None) -> tuple[list[Example], int]:
    """Read examples; returns (examples, n_malformed). Lines missing a needed
    column are counted as malformed and skipped; an out-of-range label is a
    hard error naming the line."""
    examples: list[Example] = []
    malformed = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if schema.skip_header and lineno == 1:
                continue
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            needed = [schema.text_a] + [c for c in (schema.text_b, schema.label) if c is not None]
            if max(needed) >= len(cols):
                malformed += 1
                continue
            label = None
            if schema.label is not None:
                try:
                    label = int(cols[schema.label])
                except ValueError:
                    malformed += 1
                    continue
                if label < 0 or (n_classes is not None and label >= n_classes):
                    raise DataError(f"{path}:{lineno}: label {label} outside 0..{(n_classes or 1) - 1}")
            text_b = cols[schema.text_b] if schema.text_b is not None else None
            examples.append(Example(cols[schema.text_a], text_b, label))
    return examples, malformed


def save_tsv(examples, path: str) -> None:
    lines = []
    for ex in examples:
        cols = [ex.text_a, ex.text_b if ex.text_b is not None else "",
                str(ex.label) if ex.label is not None else ""]
        lines.append("\t".join(cols) + "\n")
    write_atomic(path, "".join(lines))


def write_atomic(path: str, text: str) -> None:
    """Write via a temp file + rename so failures leave no partial output."""
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def make_batch(examples, vocab: Vocab, max_len: int, trim: bool = True) -> Batch:
    rows = [tokenize(ex, vocab, max_len) for ex in examples]
    ids = np.array([r[0] for r in rows], dtype=np.intp)
    mask = np.array([r[1] for r in rows], dtype=bool)
    segments = np.array([r[2] for r in rows], dtype=np.intp)
    if trim:
        # padding columns carry exactly zero attention, so dropping all-pad
        # tail columns changes nothing numerically and saves quadratic work
        keep = max(int(mask.sum(axis=1).max()), 1)
        ids, mask, segments = ids[:, :keep], mask[:, :keep], segments[:, :keep]
    labels = None
    if all(ex.label is not None for ex in examples):
        labels = np.array([ex.label for ex in examples], dtype=np.intp)
    return Batch(ids, mask, segments, labels)


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic per-epoch shuffle; a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch, 0x5B]).permutation(n)


def iter_batches(examples, vocab: Vocab, max_len: int, batch_size: int,
                 seed: int | None = None, epoch: int = 0):
    """Yield Batches; shuffled when a seed is given, corpus order otherwise."""
    idx = batch_order(len(examples), seed, epoch) if seed is not None else np.arange(len(examples))
    for start in range(0, len(examples), batch_size):
        chunk = [examples[i] for i in idx[start:start + batch_size]]
        yield make_batch(chunk, vocab, max_len)


# ---------------------------------------------------------------------------
# Synthetic overlap task
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTask:
    """Bag-overlap sentence pairs: label 1 iff overlap coefficient >= threshold.

    hi_band/lo_band are the overlap-coefficient ranges sampled for positive
    and negative pairs; keeping them off the threshold gives a margin that a
    small model can learn.
    """

    n_symbols: int = 30
    min_tokens: int = 3
    max_tokens: int = 6
    threshold: float = 0.5
    hi_band: tuple[float, float] = (0.7, 1.0)
    lo_band: tuple[float, float] = (0.0, 0.3)

    def __post_init__(self):
        if self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise ConfigError("SyntheticTask: need 1 <= min_tokens <= max_tokens")
        if self.n_symbols < 2 * self.max_tokens:
            raise ConfigError(f"SyntheticTask: n_symbols={self.n_symbols} too small for "
                              f"disjoint pairs of {self.max_tokens} tokens")
        if not (self.lo_band[1] < self.threshold <= self.hi_band[0]):
            raise ConfigError("SyntheticTask: bands must straddle the threshold")

    def vocab(self) -> Vocab:
        width = len(str(self.n_symbols - 1))
        return Vocab(f"w{i:0{width}d}" for i in range(self.n_symbols))


def overlap_label(text_a: str, text_b: str, threshold: float = 0.5) -> int:
    """Reference labeling rule, usable as an oracle on generated text."""
    a, b = set(text_a.split()), set(text_b.split())
    return int(len(a & b) / min(len(a), len(b)) >= threshold)


def gen_synthetic(task: SyntheticTask, n: int, seed: int) -> tuple[list[Example], Vocab]:
    """Deterministic corpus of n labeled pairs, classes balanced by alternation."""
    if n < 1:
        raise ConfigError(f"gen_synthetic: n must be >= 1, got {n}")
    vocab = task.vocab()
    symbols = vocab.tokens()[4:]
    rng = np.random.default_rng([seed, 0xD5])
    examples = []
    for i in range(n):
        target = i % 2
        ka = int(rng.integers(task.min_tokens, task.max_tokens + 1))
        kb = int(rng.integers(task.min_tokens, task.max_tokens + 1))
        m = min(ka, kb)
        if target == 1:
            lo = math.ceil(task.hi_band[0] * m)
            hi = math.floor(task.hi_band[1] * m)
        else:
            lo = math.ceil(task.lo_band[0] * m)
            hi = math.floor(task.lo_band[1] * m)
        o = int(rng.integers(lo, hi + 1))
        draw = rng.choice(len(symbols), size=ka + kb - o, replace=False)
        shared, only_a, only_b = draw[:o], draw[o:ka], draw[ka:]
        toks_a = [symbols[j] for j in np.concatenate([shared, only_a])]
        toks_b = [symbols[j] for j in np.concatenate([shared, only_b])]
        rng.shuffle(toks_a)
        rng.shuffle(toks_b)
        ex = Example(" ".join(toks_a), " ".join(toks_b), target)
        assert overlap_label(ex.text_a, ex.text_b, task.threshold) == target
        examples.append(ex)
    return examples, vocab
