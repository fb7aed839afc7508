"""Corpus ingestion, vocabulary handling, batching, and a synthetic
planted-rationale corpus whose gold masks are known by construction.

Corpus files are UTF-8 JSON lines: ``{"tokens": [str, ...], "label": int,
"rationale": [0/1, ...]?}``. Vocabulary files hold one token per line with
line number = id - 2; ids 0 (padding) and 1 (unknown) are reserved.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PAD_ID = 0
UNK_ID = 1
RESERVED = ("<pad>", "<unk>")


class CorpusFormatError(ValueError):
    """A corpus record violates the line format; message carries the line number."""


@dataclass
class Example:
    """One tokenized text with its class label and optional gold rationale."""

    tokens: list[int]
    label: int
    gold_rationale: list[int] | None = None

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("example must contain at least one token")
        if self.gold_rationale is not None and len(self.gold_rationale) != len(self.tokens):
            raise ValueError(
                f"rationale length {len(self.gold_rationale)} != token length {len(self.tokens)}")


class Vocabulary:
    """Bijection between token strings and dense ids; 0 = padding, 1 = unknown."""

    def __init__(self, tokens: Sequence[str] = ()):
        self._token_to_id: dict[str, int] = {RESERVED[0]: PAD_ID, RESERVED[1]: UNK_ID}
        self._id_to_token: list[str] = list(RESERVED)
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token in self._token_to_id:
            return self._token_to_id[token]
        idx = len(self._id_to_token)
        self._token_to_id[token] = idx
        self._id_to_token.append(token)
        return idx

    def encode(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def decode(self, idx: int) -> str:
        return self._id_to_token[idx]

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self._id_to_token[2:]:
                f.write(t + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f])


@dataclass
class Corpus:
    examples: list[Example]
    vocab: Vocabulary

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    @property
    def num_classes(self) -> int:
        return max((e.label for e in self.examples), default=0) + 1

    def has_gold(self) -> bool:
        return any(e.gold_rationale is not None for e in self.examples)


def load_corpus(path: str | Path, vocab: Vocabulary | None = None) -> Corpus:
    """Read a JSON-lines corpus; builds the vocabulary when none is given.

    Unknown tokens map to the unknown id when a fixed vocabulary is passed.
    An empty file yields an empty corpus.
    """
    build = vocab is None
    vocab = vocab if vocab is not None else Vocabulary()
    examples: list[Example] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                tokens = rec["tokens"]
                label = rec["label"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise CorpusFormatError(f"line {lineno}: malformed record ({e})") from None
            if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                raise CorpusFormatError(f"line {lineno}: tokens must be an array of strings")
            if not isinstance(label, int) or label < 0:
                raise CorpusFormatError(f"line {lineno}: label must be a nonnegative integer")
            rationale = rec.get("rationale")
            if rationale is not None:
                if len(rationale) != len(tokens) or not all(r in (0, 1) for r in rationale):
                    raise CorpusFormatError(
                        f"line {lineno}: rationale must be 0/1 and match token length")
            ids = [vocab.add(t) if build else vocab.encode(t) for t in tokens]
            try:
                examples.append(Example(ids, label, rationale))
            except ValueError as e:
                raise CorpusFormatError(f"line {lineno}: {e}") from None
    return Corpus(examples, vocab)


def save_corpus(path: str | Path, corpus: Corpus) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in corpus.examples:
            rec: dict = {"tokens": [corpus.vocab.decode(t) for t in e.tokens],
                         "label": e.label}
            if e.gold_rationale is not None:
                rec["rationale"] = e.gold_rationale
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synthetic planted-rationale corpus


@dataclass
class SynthConfig:
    """Controls the synthetic corpus: each example gets ``signals_per_example``
    tokens from its class's signal set planted at random positions; those
    positions are the gold rationale, everything else is neutral noise."""

    vocab_size: int = 200
    num_examples: int = 2000
    min_length: int = 20
    max_length: int = 40
    num_classes: int = 2
    signal_tokens_per_class: int = 5
    signals_per_example: int = 3
    noise: str = "uniform"  # or "zipf"
    seed: int = 0

    def __post_init__(self):
        reserved = 2 + self.num_classes * self.signal_tokens_per_class
        if self.vocab_size <= reserved:
            raise ValueError(f"vocab_size {self.vocab_size} leaves no neutral tokens")
        if not (1 <= self.min_length <= self.max_length):
            raise ValueError("need 1 <= min_length <= max_length")
        if self.signals_per_example >= self.min_length:
            raise ValueError(
                f"signals_per_example {self.signals_per_example} must be < min_length "
                f"{self.min_length}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.noise not in ("uniform", "zipf"):
            raise ValueError(f"unknown noise distribution {self.noise!r}")


def signal_token_ids(config: SynthConfig) -> list[list[int]]:
    """Per-class disjoint signal token id sets, laid out after the reserved ids."""
    k = config.signal_tokens_per_class
    return [list(range(2 + c * k, 2 + (c + 1) * k)) for c in range(config.num_classes)]


def generate_synthetic(config: SynthConfig) -> Corpus:
    """Build a corpus that is perfectly classifiable from its gold rationales.

    Token id i is named ``t{i:03d}``; ids below ``2 + classes * signals`` are
    the class signal sets, the rest are neutral and never carry label signal.
    """
    rng = np.random.default_rng(config.seed)
    signals = signal_token_ids(config)
    neutral_start = 2 + config.num_classes * config.signal_tokens_per_class
    neutral = np.arange(neutral_start, config.vocab_size)
    if config.noise == "zipf":
        weights = 1.0 / np.arange(1, neutral.size + 1)
        noise_p = weights / weights.sum()
    else:
        noise_p = None

    vocab = Vocabulary([f"t{i:03d}" for i in range(2, config.vocab_size)])
    examples = []
    for _ in range(config.num_examples):
        label = int(rng.integers(config.num_classes))
        length = int(rng.integers(config.min_length, config.max_length + 1))
        tokens = rng.choice(neutral, size=length, p=noise_p)
        positions = rng.choice(length, size=config.signals_per_example, replace=False)
        planted = rng.choice(signals[label], size=config.signals_per_example)
        tokens[positions] = planted
        gold = np.zeros(length, dtype=int)
        gold[positions] = 1
        examples.append(Example([int(t) for t in tokens], label, [int(g) for g in gold]))
    return Corpus(examples, vocab)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """A padded batch; ``valid`` marks real tokens, padding uses id 0."""

    tokens: np.ndarray          # (N, L) int
    valid: np.ndarray           # (N, L) float, 1.0 at real tokens
    labels: np.ndarray          # (N,) int
    lengths: np.ndarray         # (N,) int
    indices: np.ndarray         # (N,) positions in the source corpus
    gold: np.ndarray | None     # (N, L) 0/1, None if any example lacks one

    def __len__(self) -> int:
        return len(self.labels)


def make_batch(examples: Sequence[Example], indices: Sequence[int]) -> Batch:
    lengths = np.array([len(e.tokens) for e in examples])
    width = int(lengths.max())
    n = len(examples)
    tokens = np.full((n, width), PAD_ID, dtype=np.int64)
    valid = np.zeros((n, width))
    for i, e in enumerate(examples):
        tokens[i, : lengths[i]] = e.tokens
        valid[i, : lengths[i]] = 1.0
    gold = None
    if all(e.gold_rationale is not None for e in examples):
        gold = np.zeros((n, width), dtype=np.int64)
        for i, e in enumerate(examples):
            gold[i, : lengths[i]] = e.gold_rationale
    return Batch(tokens, valid, np.array([e.label for e in examples]),
                 lengths, np.asarray(indices), gold)


def batch_iterator(corpus: Corpus, batch_size: int, seed: int, epoch: int,
                   shuffle: bool = True) -> Iterator[Batch]:
    """Yield padded batches covering the corpus exactly once.

    The visit order is a pure function of (seed, epoch); each batch is padded
    to its own longest example.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(corpus))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(order)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield make_batch([corpus.examples[i] for i in idx], idx)
