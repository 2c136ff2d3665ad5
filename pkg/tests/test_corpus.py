from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from charngram_lm.corpus import (
    BatchStream,
    CorpusError,
    NgramIndex,
    Vocabulary,
    build_ngram_index,
    build_vocabulary,
    extract_ngrams,
    make_batches,
    read_tokens,
    tokenize_lines,
)


def brute_ngrams(word, n):
    padded = "^" + word + "$"
    grams = []
    start = 0
    while start + n <= len(padded):
        grams.append("".join(padded[start + k] for k in range(n)))
        start += 1
    return grams or [padded]


words = st.text(alphabet="abcdefghijklmnopqrstuvwxyz'-.0123456789", min_size=1, max_size=30)


class TestExtractNgrams:
    def test_the(self):
        assert extract_ngrams("the", 3) == ["^th", "the", "he$"]

    def test_short_word_is_whole_padded_string(self):
        assert extract_ngrams("a", 3) == ["^a$"]
        assert extract_ngrams("a", 5) == ["^a$"]

    def test_he_bigrams(self):
        assert extract_ngrams("he", 2) == brute_ngrams("he", 2) == ["^h", "he", "e$"]

    def test_order_below_two(self):
        with pytest.raises(CorpusError, match="n-gram order must be ≥ 2"):
            extract_ngrams("the", 1)

    def test_duplicates_kept(self):
        assert extract_ngrams("coco", 2) == ["^c", "co", "oc", "co", "o$"]

    @given(words, st.integers(2, 5))
    def test_matches_brute_force(self, word, n):
        assert extract_ngrams(word, n) == brute_ngrams(word, n)

    @given(words, st.integers(2, 5))
    def test_count_formula(self, word, n):
        L = len(word)
        expected = max(1, L + 2 - n + 1) if L + 2 >= n else 1
        assert len(extract_ngrams(word, n)) == expected

    @given(words, st.integers(2, 5))
    def test_windows_reassemble_padded_word(self, word, n):
        grams = extract_ngrams(word, n)
        rebuilt = grams[0] + "".join(g[-1] for g in grams[1:])
        assert rebuilt == "^" + word + "$"


class TestVocabulary:
    def test_tiny(self):
        v = build_vocabulary(tokenize_lines(["a a b"]), specials=["<eos>"])
        assert len(v) == 3
        assert v.words == ["a", "b", "<eos>"]
        assert v.freq[v.id_of["a"]] == 2
        assert v.specials == {v.id_of["<eos>"]}

    def test_empty(self):
        with pytest.raises(CorpusError, match="empty training corpus"):
            build_vocabulary([])

    def test_unseen_special_appended(self):
        v = build_vocabulary(["x", "y"], specials=["<unk>"])
        assert v.words[-1] == "<unk>" and v.freq[-1] == 0
        np.testing.assert_array_equal(v.encode(["y", "zzz"]), [1, 2])

    def test_placeholder_tokens_are_special(self):
        v = build_vocabulary(["a", "<num>", "b"], specials=[])
        assert v.specials == {1}

    def test_encode_without_unk_raises(self):
        v = build_vocabulary(["a"], specials=[])
        with pytest.raises(CorpusError):
            v.encode(["b"])

    @given(st.lists(st.sampled_from(["x", "yy", "z", "<eos>", "q"]), min_size=1, max_size=50))
    def test_invariants_and_determinism(self, tokens):
        v1 = build_vocabulary(tokens)
        v2 = build_vocabulary(tokens)
        assert v1 == v2
        assert all(v1.id_of[w] == i for i, w in enumerate(v1.words))
        counts = Counter(tokens)
        for i, w in enumerate(v1.words):
            assert v1.freq[i] == counts[w]
            if i not in v1.specials:
                assert v1.freq[i] >= 1
        assert all(0 <= s < len(v1) for s in v1.specials)

    def test_save_load_roundtrip(self, tmp_path):
        v = build_vocabulary(tokenize_lines(["the cat sat", "the mat"]))
        v.save(tmp_path / "vocab.tsv")
        assert Vocabulary.load(tmp_path / "vocab.tsv") == v
        first = (tmp_path / "vocab.tsv").read_text().splitlines()[0]
        assert first == "the\t0\t2"

    def test_read_tokens_appends_eos(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_text(" a b \n c\n", encoding="utf-8")
        assert read_tokens(p) == ["a", "b", "<eos>", "c", "<eos>"]
        assert read_tokens(p, add_eos=False) == ["a", "b", "c"]


class TestNgramIndex:
    def test_single_word(self):
        idx = build_ngram_index(build_vocabulary(["a"], specials=[]), 3)
        assert len(idx) == 1 and idx.ngram_id_of == {"^a$": 0}

    def test_specials_have_no_grams(self):
        v = build_vocabulary(tokenize_lines(["the <unk> thee"]))
        idx = build_ngram_index(v, 3)
        assert idx.grams_of_word[v.id_of["<unk>"]] == []
        assert idx.grams_of_word[v.id_of["<eos>"]] == []
        assert [idx.ngrams[g] for g in idx.grams_of_word[v.id_of["the"]]] == ["^th", "the", "he$"]

    @given(st.lists(words, min_size=1, max_size=20, unique=True), st.integers(2, 5))
    @settings(max_examples=50)
    def test_index_consistency(self, vocab_words, n):
        v = build_vocabulary(vocab_words, specials=["<unk>"])
        idx = build_ngram_index(v, n)
        names = idx.ngrams
        for w_id, w in enumerate(v.words):
            grams = idx.grams_of_word[w_id]
            if w_id in v.specials:
                assert grams == []
                continue
            assert [names[g] for g in grams] == brute_ngrams(w, n)
            gathered, lengths = idx.gather([w_id])
            assert gathered.tolist() == grams and lengths.tolist() == [len(grams)]
        assert sorted(idx.ngram_id_of.values()) == list(range(len(idx)))

    def test_gather_many(self):
        v = build_vocabulary(["ab", "c", "abc"], specials=["<eos>"])
        idx = build_ngram_index(v, 2)
        flat, lengths = idx.gather([2, 3, 0])
        expected = idx.grams_of_word[2] + idx.grams_of_word[3] + idx.grams_of_word[0]
        assert flat.tolist() == expected
        assert lengths.tolist() == [4, 0, 3]

    def test_save_format(self, tmp_path):
        idx = build_ngram_index(build_vocabulary(["aa"], specials=[]), 2)
        idx.save(tmp_path / "ng.tsv")
        assert (tmp_path / "ng.tsv").read_text().splitlines() == ["^a\t0\t1", "aa\t1\t1", "a$\t2\t1"]


class TestBatches:
    def test_single_row(self):
        got = [(x.tolist(), y.tolist()) for x, y in make_batches(np.arange(1, 11), 1, 3)]
        assert got == [([[1, 2, 3]], [[2, 3, 4]]), ([[4, 5, 6]], [[5, 6, 7]]), ([[7, 8, 9]], [[8, 9, 10]])]

    def test_two_rows_even_split(self):
        stream = make_batches(np.arange(1, 11), 2, 2)
        assert stream.rows.tolist() == [[1, 2, 3, 4, 5], [6, 7, 8, 9, 10]]
        xs = np.concatenate([x for x, _ in stream], axis=1)
        assert xs.tolist() == [[1, 2, 3, 4], [6, 7, 8, 9]]

    def test_ptb_row_length(self):
        stream = BatchStream(np.zeros(929_590, dtype=np.int64), 20, 35)
        assert stream.row_len == 929_590 // 20

    def test_too_small(self):
        with pytest.raises(CorpusError, match="need at least 8"):
            make_batches(np.arange(7), 2, 3)

    @given(st.integers(8, 200), st.integers(1, 4), st.integers(1, 6))
    def test_targets_are_next_tokens(self, n, B, T):
        ids = np.arange(n) * 7 % 13
        if n < B * (T + 1):
            return
        stream = make_batches(ids, B, T)
        xs, ys = zip(*stream)
        x, y = np.concatenate(xs, axis=1), np.concatenate(ys, axis=1)
        rows = stream.rows
        assert (x == rows[:, :-1]).all() and (y == rows[:, 1:]).all()
        for b, t in [(0, 0), (B - 1, y.shape[1] - 1)]:
            assert y[b, t] == rows[b, t + 1]
        assert Counter(y.ravel().tolist()) == Counter(rows.ravel().tolist()) - Counter(rows[:, 0].tolist())
        assert all(xb.shape[1] <= T for xb in xs)


def test_ngram_index_is_a_dataclass():
    idx = build_ngram_index(build_vocabulary(["ab"], specials=[]), 2)
    assert isinstance(idx, NgramIndex) and idx.n == 2
