"""Word-level LSTM language models with character n-gram embeddings."""

from .composer import compose_all_vocab, compose_ms, compose_ss, compose_sum
from .corpus import (
    BatchStream,
    Corpus,
    NgramIndex,
    Vocabulary,
    build_ngram_index,
    build_vocabulary,
    extract_ngrams,
    make_batches,
)
from .estimator import CharNgramLM
from .lm import LanguageModel, ModelConfig, sequence_loss
from .trainer import (
    TrainConfig,
    evaluate,
    evaluate_by_frequency,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train,
)

__version__ = "0.1.0"
