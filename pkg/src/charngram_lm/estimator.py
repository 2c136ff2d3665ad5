"""scikit-learn style wrapper around corpus building, the model and training."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .corpus import DEFAULT_SPECIALS, build_vocabulary, tokenize_lines
from .lm import LanguageModel, ModelConfig
from .trainer import TrainConfig, position_nll, train


def check_lines(X, name="X") -> list[str]:
    """Validate a corpus given as an iterable of text lines."""
    if isinstance(X, (str, bytes)):
        raise TypeError(f"{name} must be an iterable of lines, not a single string")
    try:
        lines = list(X)
    except TypeError:
        raise TypeError(f"{name} must be an iterable of str, got {type(X).__name__}") from None
    bad = [type(x).__name__ for x in lines if not isinstance(x, str)]
    if bad:
        raise TypeError(f"{name} must contain only str lines, found {bad[0]}")
    if not any(line.split() for line in lines):
        raise ValueError(f"{name} contains no tokens")
    return lines


def check_words(words) -> list[str]:
    if isinstance(words, str):
        return [words]
    words = list(words)
    if not all(isinstance(w, str) for w in words):
        raise TypeError("words must be strings")
    return words


class CharNgramLM(BaseEstimator):
    """LSTM language model whose inputs add composed character n-gram vectors.

    ``fit`` takes an iterable of text lines (whitespace-tokenized) and
    ``score`` returns the negative mean per-token NLL, so larger is better
    as scikit-learn expects.  ``transform`` maps words to the input vectors
    the recurrent layers see.
    """

    def __init__(
        self,
        ngram=3,
        encoder="ms",
        input_mode="word_plus_char",
        tying="tie_E_plus_C",
        embed_dim=200,
        hidden_dim=200,
        n_layers=2,
        dropout=0.2,
        init_range=0.1,
        lr=5.0,
        clip_norm=0.25,
        epochs=10,
        batch_size=20,
        bptt=35,
        eval_batch_size=10,
        decay_factor=0.25,
        patience=1,
        avg_patience=0,
        add_eos=True,
        specials=DEFAULT_SPECIALS,
        dtype="float32",
        random_state=0,
    ):
        self.ngram = ngram
        self.encoder = encoder
        self.input_mode = input_mode
        self.tying = tying
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.dropout = dropout
        self.init_range = init_range
        self.lr = lr
        self.clip_norm = clip_norm
        self.epochs = epochs
        self.batch_size = batch_size
        self.bptt = bptt
        self.eval_batch_size = eval_batch_size
        self.decay_factor = decay_factor
        self.patience = patience
        self.avg_patience = avg_patience
        self.add_eos = add_eos
        self.specials = specials
        self.dtype = dtype
        self.random_state = random_state

    def _model_config(self, vocab_size):
        return ModelConfig(
            vocab_size=vocab_size,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            n_layers=self.n_layers,
            ngram=self.ngram if self.encoder != "none" else 0,
            encoder=self.encoder,
            input_mode=self.input_mode,
            tying=self.tying,
            dropout_input=self.dropout,
            dropout_hidden=self.dropout,
            dropout_output=self.dropout,
            init_range=self.init_range,
            dtype=self.dtype,
        ).validate()

    def _train_config(self):
        keys = {f.name for f in fields(TrainConfig)} - {"seed", "eval_every"}
        return TrainConfig(seed=self.random_state, **{k: getattr(self, k) for k in keys}).validate()

    def _ids(self, X, name="X"):
        return self.vocab_.encode(tokenize_lines(check_lines(X, name), self.add_eos))

    def fit(self, X, y=None, X_valid=None):
        lines = check_lines(X)
        tokens = tokenize_lines(lines, self.add_eos)
        vocab = build_vocabulary(tokens, self.specials)
        train_cfg = self._train_config()
        self.model_ = LanguageModel(self._model_config(len(vocab)), vocab, seed=self.random_state)
        self.vocab_ = vocab
        valid = None if X_valid is None else self._ids(X_valid, "X_valid")
        self.history_ = train(self.model_, vocab.encode(tokens), valid, train_cfg)
        return self

    def _nll(self, X):
        check_is_fitted(self, "model_")
        nll, _, _ = position_nll(self.model_, self._ids(X), self.eval_batch_size, self.bptt)
        return nll

    def score(self, X, y=None):
        return -float(self._nll(X).mean())

    def perplexity(self, X) -> float:
        return float(np.exp(self._nll(X).mean()))

    def transform(self, words) -> np.ndarray:
        check_is_fitted(self, "model_")
        ids = self.vocab_.encode(check_words(words))
        with nx.no_grad():
            return self.model_.embed(ids).data.copy()

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "model_")
        return np.array([f"dim{j}" for j in range(self.embed_dim)], dtype=object)
