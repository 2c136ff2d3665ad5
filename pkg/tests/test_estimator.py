import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from charngram_lm import CharNgramLM
from charngram_lm.estimator import check_lines, check_words

LINES = ["the cat sat on mat"] * 40
SMALL = dict(embed_dim=8, hidden_dim=8, n_layers=1, dropout=0.0, lr=1.0, clip_norm=5.0, epochs=5,
             batch_size=4, bptt=5, eval_batch_size=1, add_eos=False, specials=[])


def test_get_params_and_clone():
    est = CharNgramLM(encoder="ss", embed_dim=16)
    params = est.get_params()
    assert params["encoder"] == "ss" and params["embed_dim"] == 16
    twin = clone(est)
    assert twin.get_params() == params and twin is not est


def test_fit_score_transform():
    est = CharNgramLM(**SMALL).fit(LINES)
    assert len(est.history_) == 5
    assert est.score(LINES[:10]) == pytest.approx(-np.log(est.perplexity(LINES[:10])), rel=1e-6)
    assert est.perplexity(LINES[:10]) < 5.0
    X = est.transform(["the", "cat"])
    assert X.shape == (2, 8)
    assert len(est.get_feature_names_out()) == 8


def test_fit_is_seeded():
    a = CharNgramLM(**SMALL, random_state=3).fit(LINES)
    b = CharNgramLM(**SMALL, random_state=3).fit(LINES)
    np.testing.assert_array_equal(a.transform("the"), b.transform("the"))


def test_invalid_combination():
    with pytest.raises(ValueError, match="encoder"):
        CharNgramLM(**{**SMALL, "encoder": "none", "input_mode": "char_only"}).fit(LINES)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        CharNgramLM().transform(["the"])


def test_check_lines():
    with pytest.raises(TypeError, match="single string"):
        check_lines("the cat")
    with pytest.raises(TypeError, match="only str"):
        check_lines(["a", 3])
    with pytest.raises(ValueError, match="no tokens"):
        check_lines(["", "   "])
    assert check_lines(iter(["a b"])) == ["a b"]


def test_check_words():
    assert check_words("the") == ["the"]
    with pytest.raises(TypeError):
        check_words(["a", None])
