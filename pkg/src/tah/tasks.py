"""Synthetic corpora with heterogeneous token difficulty, tokenization and batching.

Every sequence carries an answer key with one letter per character:

* ``i`` input: random operand/source symbols, never supervised
* ``f`` format: separators and operators, predictable from the template
* ``c`` computation: symbols whose value must be computed from earlier input
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import torch

from .errors import ConfigError, EmptyCorpusError, TokenizationError

PAD = "<pad>"
KINDS = ("mod-chain", "copy", "brackets")
SUPERVISED = frozenset("fc")

_ALPHABETS = {
    "mod-chain": "0123456789+=;",
    "copy": "abcdefghijklmnop>;",
    "brackets": "()[]=YN;",
}

_DEFAULT_KNOBS = {
    "mod-chain": {"modulus": 5, "chain_length": 4, "problems": 8},
    "copy": {"length": 8, "alphabet": 8, "transform": "identity", "problems": 3},
    "brackets": {"length": 6, "problems": 6},
}


@dataclass
class RawSequence:
    text: str
    key: str


class Vocabulary:
    """Character-level table; id 0 is padding."""

    def __init__(self, symbols: list[str]):
        if not symbols or symbols[0] != PAD:
            symbols = [PAD] + [s for s in symbols if s != PAD]
        self.symbols = list(symbols)
        self.ids = {s: i for i, s in enumerate(self.symbols)}
        if len(self.ids) != len(self.symbols):
            raise ConfigError("duplicate vocabulary symbols")

    @classmethod
    def for_kind(cls, kind: str) -> "Vocabulary":
        return cls([PAD] + list(_ALPHABETS[kind]))

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def pad_id(self) -> int:
        return 0

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and other.symbols == self.symbols


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    bad = sorted({ch for ch in text if ch not in vocab.ids})
    if bad:
        raise TokenizationError(f"out-of-vocabulary characters: {bad!r}")
    return [vocab.ids[ch] for ch in text]


def detokenize(ids: list[int], vocab: Vocabulary) -> str:
    return "".join(vocab.symbols[i] for i in ids)


def resolve_knobs(kind: str, knobs: dict[str, Any] | None) -> dict[str, Any]:
    if kind not in KINDS:
        raise ConfigError(f"unknown task kind {kind!r}; expected one of {KINDS}")
    out = dict(_DEFAULT_KNOBS[kind])
    for k, v in (knobs or {}).items():
        if k not in out:
            raise ConfigError(f"unknown knob {k!r} for {kind}")
        out[k] = v
    if kind == "mod-chain":
        if not 2 <= out["modulus"] <= 10:
            raise ConfigError("modulus must lie in [2, 10]")
        if out["chain_length"] < 1 or out["problems"] < 1:
            raise ConfigError("chain_length and problems must be >= 1")
    elif kind == "copy":
        if not 1 <= out["alphabet"] <= 16 or out["length"] < 1 or out["problems"] < 1:
            raise ConfigError("copy needs 1 <= alphabet <= 16, length >= 1, problems >= 1")
        if out["transform"] not in ("identity", "reverse", "shift"):
            raise ConfigError("transform must be identity, reverse or shift")
    elif kind == "brackets":
        if out["length"] < 1 or out["problems"] < 1:
            raise ConfigError("length and problems must be >= 1")
    return out


def _mod_chain(rng: np.random.Generator, modulus: int, chain_length: int, problems: int) -> RawSequence:
    text, key = [], []
    for _ in range(problems):
        ops = rng.integers(0, modulus, size=chain_length)
        for j, a in enumerate(ops):
            if j:
                text.append("+")
                key.append("f")
            text.append(str(int(a)))
            key.append("i")
        text.append("=")
        key.append("f")
        text.append(str(int(ops.sum()) % modulus))
        key.append("c")
        text.append(";")
        key.append("f")
    return RawSequence("".join(text), "".join(key))


def _copy(rng: np.random.Generator, length: int, alphabet: int, transform: str, problems: int) -> RawSequence:
    letters = _ALPHABETS["copy"][:alphabet]
    text, key = [], []
    for _ in range(problems):
        src = [letters[i] for i in rng.integers(0, alphabet, size=length)]
        if transform == "reverse":
            tgt = src[::-1]
        elif transform == "shift":
            tgt = [letters[(letters.index(ch) + 1) % alphabet] for ch in src]
        else:
            tgt = list(src)
        text += src + [">"] + tgt + [";"]
        key += ["i"] * length + ["f"] + ["c"] * length + ["f"]
    return RawSequence("".join(text), "".join(key))


def _balanced(s: str) -> bool:
    pairs = {")": "(", "]": "["}
    stack = []
    for ch in s:
        if ch in "([":
            stack.append(ch)
        elif not stack or stack.pop() != pairs[ch]:
            return False
    return not stack


def _brackets(rng: np.random.Generator, length: int, problems: int) -> RawSequence:
    text, key = [], []
    for _ in range(problems):
        s = "".join("()[]"[i] for i in rng.integers(0, 4, size=length))
        text += list(s) + ["=", "Y" if _balanced(s) else "N", ";"]
        key += ["i"] * length + ["f", "c", "f"]
    return RawSequence("".join(text), "".join(key))


def generate_task(kind: str, knobs: dict[str, Any] | None, count: int, seed: int) -> list[RawSequence]:
    """Sequence ``index`` depends only on (kind, knobs, seed, index)."""
    knobs = resolve_knobs(kind, knobs)
    if count < 0:
        raise ConfigError("count must be >= 0")
    make = {"mod-chain": _mod_chain, "copy": _copy, "brackets": _brackets}[kind]
    return [make(np.random.default_rng([seed, i]), **knobs) for i in range(count)]


@dataclass
class TokenizedCorpus:
    vocab: Vocabulary
    sequences: list[list[int]]
    keys: list[str]
    splits: list[str]  # "train" | "val"
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sequences)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def subset(self, split: str) -> "TokenizedCorpus":
        idx = self.indices(split)
        return TokenizedCorpus(
            self.vocab, [self.sequences[i] for i in idx], [self.keys[i] for i in idx],
            [split] * len(idx), dict(self.meta, source_indices=idx),
        )

    def num_tokens(self) -> int:
        return sum(len(s) for s in self.sequences)


def assign_splits(n: int, validation_fraction: float, seed: int) -> list[str]:
    if not 0 <= validation_fraction < 1:
        raise ConfigError("validation_fraction must lie in [0, 1)")
    n_val = int(round(validation_fraction * n))
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    splits = ["train"] * n
    for i in perm[:n_val]:
        splits[int(i)] = "val"
    return splits


def build_corpus(
    kind: str, knobs: dict[str, Any] | None, count: int, seed: int, validation_fraction: float = 0.01,
) -> TokenizedCorpus:
    raw = generate_task(kind, knobs, count, seed)
    if not raw:
        raise EmptyCorpusError("corpus has no sequences")
    vocab = Vocabulary.for_kind(kind)
    seqs = [tokenize(r.text, vocab) for r in raw]
    meta = {"kind": kind, "knobs": resolve_knobs(kind, knobs), "seed": seed, "validation_fraction": validation_fraction}
    return TokenizedCorpus(vocab, seqs, [r.key for r in raw], assign_splits(count, validation_fraction, seed), meta)


# Corpus file: line 1 is a JSON header (vocabulary symbols + metadata, JSON string
# escaping applies); every further line is "<split>\t<space-separated ids>\t<key>".

def write_corpus(path: str | Path, corpus: TokenizedCorpus) -> None:
    header = {"format": "tah-corpus", "version": 1, "vocab": corpus.vocab.symbols, "meta": corpus.meta}
    lines = [json.dumps(header, sort_keys=True)]
    for seq, key, split in zip(corpus.sequences, corpus.keys, corpus.splits):
        lines.append(f"{split}\t{' '.join(map(str, seq))}\t{key}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path: str | Path) -> TokenizedCorpus:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise EmptyCorpusError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != "tah-corpus":
        raise ConfigError(f"{path} is not a tah corpus file")
    vocab = Vocabulary(header["vocab"])
    seqs, keys, splits = [], [], []
    for line in lines[1:]:
        split, ids, key = line.split("\t")
        seq = [int(t) for t in ids.split()] if ids else []
        if any(t >= len(vocab) for t in seq):
            raise TokenizationError("token id outside vocabulary")
        seqs.append(seq)
        keys.append(key)
        splits.append(split)
    return TokenizedCorpus(vocab, seqs, keys, splits, header.get("meta", {}))


@dataclass
class Batch:
    tokens: torch.Tensor  # [B, n] long
    pad_mask: torch.Tensor  # [B, n] real token
    loss_mask: torch.Tensor  # [B, n] position i predicts a supervised token i+1
    targets: torch.Tensor  # [B, n] token i+1 (0 where none)
    indices: list[int]  # corpus index per row, -1 for padding rows


def collate(corpus: TokenizedCorpus, idx: list[int], batch_size: int | None = None) -> Batch:
    rows = batch_size or len(idx)
    n = max((len(corpus.sequences[i]) for i in idx), default=1)
    tokens = torch.zeros(rows, n, dtype=torch.long)
    pad = torch.zeros(rows, n, dtype=torch.bool)
    loss = torch.zeros(rows, n, dtype=torch.bool)
    targets = torch.zeros(rows, n, dtype=torch.long)
    for r, i in enumerate(idx):
        seq, key = corpus.sequences[i], corpus.keys[i]
        L = len(seq)
        tokens[r, :L] = torch.tensor(seq, dtype=torch.long)
        pad[r, :L] = True
        if L > 1:
            targets[r, : L - 1] = torch.tensor(seq[1:], dtype=torch.long)
            loss[r, : L - 1] = torch.tensor([k in SUPERVISED for k in key[1:]])
    return Batch(tokens, pad, loss, targets, list(idx) + [-1] * (rows - len(idx)))


def batches(
    corpus: TokenizedCorpus, batch_size: int, max_len: int, seed: int, epoch: int,
    split: str | None = "train", shuffle: bool = True,
) -> Iterator[Batch]:
    """Deterministic batch stream; order is a pure function of (seed, epoch).

    Sequences longer than ``max_len`` are dropped. The last batch is padded
    with empty rows up to ``batch_size``.
    """
    pool = [i for i in (corpus.indices(split) if split else range(len(corpus)))
            if len(corpus.sequences[i]) <= max_len]
    if not pool:
        raise EmptyCorpusError("no sequences left after length filtering")
    if shuffle:
        perm = np.random.default_rng([seed, epoch]).permutation(len(pool))
        pool = [pool[int(j)] for j in perm]
    for s in range(0, len(pool), batch_size):
        yield collate(corpus, pool[s:s + batch_size], batch_size)


def count_batches(corpus: TokenizedCorpus, batch_size: int, max_len: int, split: str | None = "train") -> int:
    pool = [i for i in (corpus.indices(split) if split else range(len(corpus)))
            if len(corpus.sequences[i]) <= max_len]
    return -(-len(pool) // batch_size)
