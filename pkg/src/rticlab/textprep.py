"""Tokenizer, vocabulary, spell correction and caption joining."""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CLS, SEP, UNK, PAD = "[CLS]", "[SEP]", "[UNK]", "[PAD]"
RESERVED = (CLS, SEP, UNK, PAD)

_SPLIT = re.compile("[\\s" + re.escape(string.punctuation) + "]+")
_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def tokenize(text: str) -> list[str]:
    return [t for t in _SPLIT.split(text.lower()) if t]


class Vocabulary:
    """Token -> (index, frequency). Reserved tokens occupy indices 0-3."""

    def __init__(self, frequencies: Mapping[str, int]):
        words = sorted(w for w in frequencies if w not in RESERVED)
        self.tokens: list[str] = list(RESERVED) + words
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        self.freq: dict[str, int] = {t: 0 for t in RESERVED}
        for w in words:
            f = int(frequencies[w])
            if f < 0:
                raise ValueError(f"negative frequency for {w!r}")
            self.freq[w] = f

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index and token not in RESERVED

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.freq == other.freq

    def lookup(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def words(self) -> list[str]:
        return self.tokens[len(RESERVED):]


def build_vocab(corpus: Iterable[str], min_freq: int = 1,
                external: Mapping[str, int] | Iterable[str] | None = None) -> Vocabulary:
    """Corpus tokens seen at least ``min_freq`` times plus every external word.

    Frequencies are corpus counts; an external word list that carries its own
    counts (a mapping) adds them.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts = Counter(corpus)
    freqs = {w: c for w, c in counts.items() if c >= min_freq}
    if external is not None:
        ext = external if isinstance(external, Mapping) else dict.fromkeys(external, 0)
        for w, c in ext.items():
            freqs[w] = counts.get(w, 0) + int(c)
    return Vocabulary(freqs)


def save_vocab(vocab: Vocabulary, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for w in vocab.words():
            fh.write(f"{w}\t{vocab.freq[w]}\n")


def load_vocab(path) -> Vocabulary:
    return Vocabulary(read_word_list(path))


def read_word_list(path) -> dict[str, int]:
    """``token<TAB>frequency`` lines; a missing frequency counts as 0."""
    freqs = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        word, _, freq = line.partition("\t")
        try:
            freqs[word] = int(freq) if freq else 0
        except ValueError:
            raise ValueError(f"{path}:{lineno}: bad frequency {freq!r}") from None
    return freqs


def read_overrides(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected misspelled<TAB>replacement")
        out[parts[0]] = parts[1]
    return out


def edits1(word: str) -> set[str]:
    splits = [(word[:i], word[i:]) for i in range(len(word) + 1)]
    deletes = [a + b[1:] for a, b in splits if b]
    transposes = [a + b[1] + b[0] + b[2:] for a, b in splits if len(b) > 1]
    replaces = [a + c + b[1:] for a, b in splits if b for c in _LETTERS]
    inserts = [a + c + b for a, b in splits for c in _LETTERS]
    return set(deletes + transposes + replaces + inserts)


def spell_correct(token: str, vocab: Vocabulary,
                  overrides: Mapping[str, str] | None = None) -> str:
    """Most frequent in-vocabulary word within edit distance 1, else 2.

    Ties go to the lexicographically smallest word; with no candidate the
    token comes back unchanged.
    """
    if not token:
        raise ValueError("spell_correct needs a non-empty token")
    if overrides and token in overrides:
        return overrides[token]
    if token in vocab:
        return token
    near = edits1(token)
    found = [w for w in near if w in vocab]
    if not found:
        found = [w for w in {e2 for e1 in near for e2 in edits1(e1)} if w in vocab]
    if not found:
        return token
    return min(found, key=lambda w: (-vocab.freq[w], w))


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    source_captions: int


def encode_captions(captions: Sequence[str], vocab: Vocabulary, correct: bool = True,
                    shuffle_seed: int | None = None,
                    reference: Vocabulary | None = None,
                    overrides: Mapping[str, str] | None = None) -> TokenSequence:
    """``[CLS] c1 [SEP] c2 ... [SEP] ck`` as vocabulary indices.

    ``reference`` is the dictionary consulted by spell correction (defaults
    to ``vocab``).
    """
    if not captions:
        raise ValueError("encode_captions needs at least one caption")
    order = list(captions)
    if shuffle_seed is not None:
        perm = np.random.default_rng(shuffle_seed).permutation(len(order))
        order = [order[i] for i in perm]
    ref = reference if reference is not None else vocab
    ids = [vocab.index[CLS]]
    for n, caption in enumerate(order):
        if n:
            ids.append(vocab.index[SEP])
        for tok in tokenize(caption):
            if correct:
                tok = spell_correct(tok, ref, overrides)
            ids.append(vocab.lookup(tok))
    return TokenSequence(tuple(ids), len(order))


def pad_batch(seqs: Sequence[TokenSequence], pad_index: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a common length; returns (ids, mask) with mask 1.0 on real tokens."""
    length = max(len(s.tokens) for s in seqs)
    ids = np.full((len(seqs), length), pad_index, dtype=np.int64)
    mask = np.zeros((len(seqs), length))
    for i, s in enumerate(seqs):
        ids[i, :len(s.tokens)] = s.tokens
        mask[i, :len(s.tokens)] = 1.0
    return ids, mask


def correction_report(captions: Iterable[str], reference: Vocabulary,
                      overrides: Mapping[str, str] | None = None) -> Counter:
    """Counts of (original, corrected) pairs over every caption token that changed."""
    changes = Counter()
    for caption in captions:
        for tok in tokenize(caption):
            fixed = spell_correct(tok, reference, overrides)
            if fixed != tok:
                changes[(tok, fixed)] += 1
    return changes
