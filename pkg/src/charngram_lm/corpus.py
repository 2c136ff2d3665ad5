"""Vocabularies, character n-gram indexing and truncated-BPTT batching."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

BOW = "^"
EOW = "$"
EOS = "<eos>"
UNK = "<unk>"
DEFAULT_SPECIALS = (UNK, EOS)

_PLACEHOLDER = re.compile(r"^<[^<>\s]+>$")


class CorpusError(ValueError):
    pass


def is_placeholder(word: str) -> bool:
    return bool(_PLACEHOLDER.match(word))


@dataclass
class Vocabulary:
    words: list[str]
    id_of: dict[str, int]
    freq: list[int]
    specials: frozenset[int] = frozenset()

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.id_of

    @property
    def unk_id(self) -> int | None:
        return self.id_of.get(UNK)

    def encode(self, tokens: Iterable[str], unknown: str = UNK) -> np.ndarray:
        """Map surfaces to ids; unseen words go to ``unknown`` if it exists."""
        fallback = self.id_of.get(unknown)
        out = []
        for tok in tokens:
            i = self.id_of.get(tok, fallback)
            if i is None:
                raise CorpusError(f"word {tok!r} is not in the vocabulary and there is no {unknown} token")
            out.append(i)
        return np.asarray(out, dtype=np.int64)

    def is_special(self, word_id: int) -> bool:
        return word_id in self.specials

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, w in enumerate(self.words):
                fh.write(f"{w}\t{i}\t{self.freq[i]}\n")

    @classmethod
    def load(cls, path, specials: Iterable[str] = DEFAULT_SPECIALS) -> "Vocabulary":
        words, freq = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                surface, idx, count = line.rstrip("\n").split("\t")
                if int(idx) != lineno:
                    raise CorpusError(f"{path}: line {lineno + 1} has id {idx}, expected {lineno}")
                words.append(surface)
                freq.append(int(count))
        return cls.from_words(words, freq, specials)

    @classmethod
    def from_words(cls, words, freq, specials: Iterable[str] = DEFAULT_SPECIALS) -> "Vocabulary":
        id_of = {w: i for i, w in enumerate(words)}
        if len(id_of) != len(words):
            raise CorpusError("duplicate surface forms in vocabulary")
        named = set(specials)
        special_ids = frozenset(i for i, w in enumerate(words) if w in named or is_placeholder(w))
        return cls(list(words), id_of, list(freq), special_ids)


def read_tokens(path, add_eos: bool = True, eos: str = EOS) -> list[str]:
    """Whitespace tokens of a UTF-8 file, with ``eos`` after every line."""
    tokens = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            words = line.split()
            if not words and not add_eos:
                continue
            tokens.extend(words)
            if add_eos:
                tokens.append(eos)
    return tokens


def tokenize_lines(lines: Iterable[str], add_eos: bool = True, eos: str = EOS) -> list[str]:
    tokens = []
    for line in lines:
        tokens.extend(line.split())
        if add_eos:
            tokens.append(eos)
    return tokens


def build_vocabulary(train_tokens: Iterable[str], specials: Iterable[str] = DEFAULT_SPECIALS) -> Vocabulary:
    """Ids follow first occurrence; listed specials never seen are appended."""
    words: list[str] = []
    id_of: dict[str, int] = {}
    freq: list[int] = []
    for tok in train_tokens:
        i = id_of.get(tok)
        if i is None:
            i = id_of[tok] = len(words)
            words.append(tok)
            freq.append(0)
        freq[i] += 1
    if not words:
        raise CorpusError("empty training corpus")
    specials = list(specials)
    for s in specials:
        if s not in id_of:
            id_of[s] = len(words)
            words.append(s)
            freq.append(0)
    return Vocabulary.from_words(words, freq, specials)


def extract_ngrams(word: str, n: int) -> list[str]:
    if n < 2:
        raise CorpusError("n-gram order must be ≥ 2")
    if not word:
        raise CorpusError("cannot extract n-grams from an empty word")
    padded = BOW + word + EOW
    if len(padded) <= n:
        return [padded]
    return [padded[i : i + n] for i in range(len(padded) - n + 1)]


@dataclass
class NgramIndex:
    """Character n-grams of every vocabulary word, stored ragged.

    ``grams_of_word[w]`` is the id list for word ``w``; ``flat`` and
    ``offsets`` hold the same lists concatenated, so the grams of ``w`` are
    ``flat[offsets[w]:offsets[w + 1]]``.
    """

    n: int
    ngram_id_of: dict[str, int]
    grams_of_word: list[list[int]]
    flat: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)

    @property
    def ngrams(self) -> list[str]:
        out = [""] * len(self.ngram_id_of)
        for g, i in self.ngram_id_of.items():
            out[i] = g
        return out

    def __len__(self):
        return len(self.ngram_id_of)

    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def gather(self, word_ids) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated gram ids and per-word counts for ``word_ids``."""
        word_ids = np.asarray(word_ids, dtype=np.int64)
        lengths = self.lengths()[word_ids]
        if len(word_ids) == 0:
            return np.zeros(0, dtype=np.int64), lengths
        starts = self.offsets[word_ids]
        # position of every output element inside flat
        run_start = np.repeat(starts - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
        pos = run_start + np.arange(lengths.sum())
        return self.flat[pos], lengths

    def save(self, path):
        counts = np.bincount(self.flat, minlength=len(self)) if len(self.flat) else np.zeros(len(self), int)
        with open(path, "w", encoding="utf-8") as fh:
            for i, g in enumerate(self.ngrams):
                fh.write(f"{g}\t{i}\t{counts[i]}\n")


def build_ngram_index(vocab: Vocabulary, n: int) -> NgramIndex:
    ngram_id_of: dict[str, int] = {}
    grams_of_word: list[list[int]] = []
    for i, w in enumerate(vocab.words):
        if i in vocab.specials:
            grams_of_word.append([])
            continue
        ids = []
        for g in extract_ngrams(w, n):
            gid = ngram_id_of.get(g)
            if gid is None:
                gid = ngram_id_of[g] = len(ngram_id_of)
            ids.append(gid)
        grams_of_word.append(ids)
    lengths = [len(g) for g in grams_of_word]
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    flat = np.fromiter((g for gs in grams_of_word for g in gs), dtype=np.int64, count=int(offsets[-1]))
    return NgramIndex(n, ngram_id_of, grams_of_word, flat, offsets)


class BatchStream:
    """Truncated-BPTT slices over ``B`` parallel rows of a token stream.

    The stream is cut into ``B`` contiguous rows of equal length; tokens
    that do not fill the last row are dropped.  Each row is then walked in
    windows of ``bptt`` inputs whose targets are shifted by one, so the
    first token of a row is never a target.  The final window of a row may
    be shorter than ``bptt``.
    """

    def __init__(self, token_ids, batch_size: int, bptt: int):
        token_ids = np.asarray(token_ids, dtype=np.int64)
        if batch_size < 1 or bptt < 1:
            raise CorpusError("batch size and bptt length must be positive")
        need = batch_size * (bptt + 1)
        if len(token_ids) < need:
            raise CorpusError(
                f"corpus too small: {len(token_ids)} tokens, need at least {need} "
                f"for batch size {batch_size} and bptt {bptt}"
            )
        self.batch_size = batch_size
        self.bptt = bptt
        self.row_len = len(token_ids) // batch_size
        self.rows = token_ids[: self.row_len * batch_size].reshape(batch_size, self.row_len)
        self.cursor = 0

    @property
    def token_ids(self) -> np.ndarray:
        return self.rows.reshape(-1)

    def __len__(self):
        return -(-(self.row_len - 1) // self.bptt)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        self.cursor = 0
        return self

    def __next__(self):
        if self.cursor >= self.row_len - 1:
            raise StopIteration
        end = min(self.cursor + self.bptt, self.row_len - 1)
        inputs = self.rows[:, self.cursor : end]
        targets = self.rows[:, self.cursor + 1 : end + 1]
        self.cursor = end
        return inputs, targets


def make_batches(token_ids, batch_size: int, bptt: int) -> BatchStream:
    return BatchStream(token_ids, batch_size, bptt)


@dataclass
class Corpus:
    """Train/valid/test id streams sharing one vocabulary."""

    vocab: Vocabulary
    train: np.ndarray
    valid: np.ndarray | None = None
    test: np.ndarray | None = None

    @classmethod
    def from_files(cls, train, valid=None, test=None, add_eos=True, specials=DEFAULT_SPECIALS, vocab=None):
        train_tokens = read_tokens(train, add_eos)
        if vocab is None:
            vocab = build_vocabulary(train_tokens, specials)
        load = lambda p: None if p is None else vocab.encode(read_tokens(p, add_eos))  # noqa: E731
        return cls(vocab, vocab.encode(train_tokens), load(valid), load(test))


def ptb_paths(root) -> dict[str, Path]:
    root = Path(root)
    return {split: root / f"ptb.{split}.txt" for split in ("train", "valid", "test")}
