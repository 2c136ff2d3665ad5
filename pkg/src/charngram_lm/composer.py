"""Word vectors composed from character n-gram embeddings.

Three encoders are available:

``ms``
    multi-dimensional self-attention: scores ``W_c s_i`` give one weight
    per embedding dimension per n-gram, normalized over the word's n-grams
    separately in every dimension; the word vector is the element-wise
    weighted sum.  No activation and no second projection are applied.
``ss``
    scalar self-attention: one weight ``softmax_i(w . s_i)`` per n-gram.
``sum``
    plain sum of the n-gram embeddings.

Embeddings are stored one per row, so a word's n-gram matrix is ``I x D``
here (the transpose of the column layout) and the attention weights of a
word come back as ``I x D`` as well; :attr:`AttentionRecord.weights`
exposes them as ``D x I``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .corpus import NgramIndex, Vocabulary

ENCODERS = ("ms", "ss", "sum")


class CompositionError(ValueError):
    pass


@dataclass
class AttentionRecord:
    word_id: int | None
    gram_ids: list[int]
    weights: np.ndarray  # D x I for ms, (I,) for ss

    @property
    def per_gram_mean(self) -> np.ndarray:
        if self.weights.ndim == 1:
            return self.weights
        return self.weights.mean(axis=0)


def _encode(encoder, gram_ids, lengths, table, attn):
    """Compose every segment of ``gram_ids``; returns (S x D tensor, weights)."""
    S = nx.embedding_lookup(table, gram_ids)
    seg = nx.Segments(lengths)
    if encoder == "sum":
        return nx.segment_sum(S, seg), None
    if encoder == "ms":
        scores = nx.matmul(S, nx.transpose(attn))
        g = nx.segment_softmax(scores, seg)
        return nx.segment_sum(nx.mul(g, S), seg), g
    if encoder == "ss":
        scores = nx.matmul(S, nx.reshape(attn, (-1, 1)))
        alpha = nx.segment_softmax(scores, seg)
        ones = nx.Tensor(np.ones((1, S.shape[1]), dtype=S.dtype))
        return nx.segment_sum(nx.mul(nx.matmul(alpha, ones), S), seg), alpha
    raise CompositionError(f"unknown encoder {encoder!r}; expected one of {ENCODERS}")


def _single(encoder, gram_ids, table, attn, word_id=None):
    gram_ids = np.asarray(gram_ids, dtype=np.int64)
    if len(gram_ids) == 0:
        raise CompositionError("compose called on gramless word")
    c, w = _encode(encoder, gram_ids, [len(gram_ids)], table, attn)
    c = nx.reshape(c, (table.shape[1],))
    if w is None:
        return c, None
    weights = w.data.T if encoder == "ms" else w.data[:, 0]
    return c, AttentionRecord(word_id, gram_ids.tolist(), weights.copy())


def compose_ms(gram_ids, table: nx.Tensor, W_c: nx.Tensor, word_id=None):
    return _single("ms", gram_ids, table, W_c, word_id)


def compose_ss(gram_ids, table: nx.Tensor, w: nx.Tensor, word_id=None):
    return _single("ss", gram_ids, table, w, word_id)


def compose_sum(gram_ids, table: nx.Tensor) -> nx.Tensor:
    return _single("sum", gram_ids, table, None)[0]


def compose_words(encoder, index: NgramIndex, word_ids, table: nx.Tensor, attn=None) -> nx.Tensor:
    """Composed vectors for ``word_ids`` as rows; gramless words give zeros."""
    word_ids = np.asarray(word_ids, dtype=np.int64)
    lengths = index.lengths()[word_ids]
    has = lengths > 0
    d = table.shape[1]
    if not has.any():
        return nx.Tensor(np.zeros((len(word_ids), d), dtype=table.dtype))
    gram_ids, seg = index.gather(word_ids[has])
    composed, _ = _encode(encoder, gram_ids, seg, table, attn)
    if has.all():
        return composed
    # route gramless words to an appended zero row
    zero = nx.Tensor(np.zeros((1, d), dtype=table.dtype))
    route = np.full(len(word_ids), composed.shape[0], dtype=np.int64)
    route[has] = np.arange(composed.shape[0])
    return nx.embedding_lookup(nx.concat_rows([composed, zero]), route)


def compose_all_vocab(encoder, vocab: Vocabulary, index: NgramIndex, table: nx.Tensor, attn=None) -> nx.Tensor:
    """``V x D`` matrix whose row ``v`` is the composed vector of word ``v``."""
    if len(index.grams_of_word) != len(vocab):
        raise CompositionError(f"n-gram index covers {len(index.grams_of_word)} words, vocabulary has {len(vocab)}")
    return compose_words(encoder, index, np.arange(len(vocab)), table, attn)


def attention_record(encoder, index: NgramIndex, word_id: int, table, attn) -> AttentionRecord | None:
    grams = index.grams_of_word[word_id]
    if not grams:
        raise CompositionError("special tokens have no character composition")
    with nx.no_grad():
        if encoder == "sum":
            return None
        return _single(encoder, grams, table, attn, word_id)[1]
