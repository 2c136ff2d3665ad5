"""Desk-scale comparison runs and corpus statistics on a PTB-style directory."""

from __future__ import annotations

import logging
import os
from dataclasses import replace

import numpy as np

from .corpus import Corpus, Vocabulary, build_ngram_index, ptb_paths
from .lm import LanguageModel, ModelConfig
from .trainer import TrainConfig, position_nll, train

log = logging.getLogger(__name__)

# model settings that distinguish the compared variants; everything else is the desk default
VARIANTS = {
    "baseline": dict(ngram=0, encoder="none", input_mode="word_only", tying="tie_E"),
    "char3_ms": dict(ngram=3, encoder="ms", input_mode="word_plus_char", tying="tie_E_plus_C"),
    "char3_ss": dict(ngram=3, encoder="ss", input_mode="word_plus_char", tying="tie_E_plus_C"),
    "char3_sum": dict(ngram=3, encoder="sum", input_mode="word_plus_char", tying="tie_E_plus_C"),
}


def find_ptb(env="PTB_DIR"):
    """Return the PTB directory named by ``$PTB_DIR`` if all three splits are there, else None."""
    root = os.environ.get(env)
    if not root:
        return None
    paths = ptb_paths(root)
    return root if all(p.exists() for p in paths.values()) else None


def corpus_statistics(corpus: Corpus, n=3) -> dict:
    """Vocabulary size, train tokens and character n-gram types under two special-token policies.

    ``ngram_types`` excludes specials (the package's policy); ``ngram_types_with_specials``
    also pads and splits the special surface forms as if they were ordinary words.
    """
    vocab = corpus.vocab
    plain = Vocabulary(vocab.words, vocab.id_of, vocab.freq, frozenset())
    return {
        "vocab_size": len(vocab),
        "train_tokens": int(len(corpus.train)),
        "ngram_types": len(build_ngram_index(vocab, n)),
        "ngram_types_with_specials": len(build_ngram_index(plain, n)),
    }


def desk_comparison(corpus: Corpus, variants, seeds=(0, 1, 2), train_tokens=100_000, train_config=None,
                    model_overrides=None) -> dict:
    """Train each variant once per seed on the first ``train_tokens`` tokens.

    Returns ``{variant: [best validation perplexity per seed]}``.
    """
    base_train = train_config or TrainConfig()
    train_ids = corpus.train[:train_tokens]
    results = {}
    for name in variants:
        settings = {**VARIANTS[name], **(model_overrides or {})}
        cfg = ModelConfig(vocab_size=len(corpus.vocab), **settings)
        results[name] = []
        for seed in seeds:
            model = LanguageModel(cfg, corpus.vocab, seed=seed)
            tc = replace(base_train, seed=seed).validate()
            train(model, train_ids, corpus.valid, tc)
            nll, _, _ = position_nll(model, corpus.valid, tc.eval_batch_size, tc.bptt)
            ppl = float(np.exp(nll.mean()))
            log.info("%s seed %d: valid ppl %.2f", name, seed, ppl)
            results[name].append(ppl)
    return results
