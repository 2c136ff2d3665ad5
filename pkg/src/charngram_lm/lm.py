"""Word-level LSTM language model with composed character n-gram inputs."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .composer import ENCODERS, compose_words
from .corpus import NgramIndex, Vocabulary, build_ngram_index

INPUT_MODES = ("word_plus_char", "char_only", "word_only", "two_word_embeds")
TYING_MODES = ("tie_E", "tie_E_plus_C", "untied")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 200
    hidden_dim: int = 200
    n_layers: int = 2
    ngram: int = 3
    encoder: str = "ms"
    input_mode: str = "word_plus_char"
    tying: str = "tie_E_plus_C"
    dropout_input: float = 0.2
    dropout_hidden: float = 0.2
    dropout_output: float = 0.2
    init_range: float = 0.1
    forget_bias: float = 1.0
    dtype: str = "float32"

    def validate(self):
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if min(self.embed_dim, self.hidden_dim, self.n_layers) < 1:
            raise ConfigError("embed_dim, hidden_dim and n_layers must be positive")
        if self.encoder not in ENCODERS + ("none",):
            raise ConfigError(f"encoder must be one of {ENCODERS + ('none',)}, got {self.encoder!r}")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        if self.tying not in TYING_MODES:
            raise ConfigError(f"tying must be one of {TYING_MODES}, got {self.tying!r}")
        if self.encoder == "none" and self.ngram != 0:
            raise ConfigError(f"ngram={self.ngram} needs an encoder, but encoder='none' (set encoder or ngram=0)")
        if self.encoder != "none" and self.ngram < 2:
            raise ConfigError(f"encoder={self.encoder!r} needs ngram ≥ 2, got ngram={self.ngram}")
        if self.input_mode == "char_only" and self.encoder == "none":
            raise ConfigError("input_mode='char_only' requires an encoder, but encoder='none'")
        if self.tying == "tie_E_plus_C" and self.encoder == "none":
            raise ConfigError("tying='tie_E_plus_C' requires an encoder, but encoder='none'")
        for name in ("dropout_input", "dropout_hidden", "dropout_output"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self

    @property
    def uses_chars(self) -> bool:
        return self.encoder != "none"

    def layer_sizes(self) -> list[tuple[int, int]]:
        """(input, hidden) per LSTM layer; tied models end at ``embed_dim``."""
        sizes = []
        d_in = self.embed_dim
        for layer in range(self.n_layers):
            last = layer == self.n_layers - 1
            d_out = self.embed_dim if last and self.tying != "untied" else self.hidden_dim
            sizes.append((d_in, d_out))
            d_in = d_out
        return sizes

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


class LanguageModel:
    """Stacked LSTM over ``E x_t + c_t`` inputs with a (possibly tied) softmax.

    Word vectors are rows: ``E`` is ``V x D_e`` and row ``v`` embeds word
    ``v``.  The output projection is ``E`` (``tie_E``), ``E + C``
    (``tie_E_plus_C``, where ``C`` holds the composed vector of every word)
    or a free ``W`` (``untied``); the bias ``b`` is never tied.
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary, index: NgramIndex | None = None, seed: int = 0):
        config.validate()
        if config.vocab_size != len(vocab):
            raise ConfigError(f"vocab_size={config.vocab_size} but vocabulary has {len(vocab)} words")
        if config.uses_chars:
            if index is None:
                index = build_ngram_index(vocab, config.ngram)
            elif index.n != config.ngram:
                raise ConfigError(f"n-gram index has n={index.n}, config asks ngram={config.ngram}")
        self.config = config
        self.vocab = vocab
        self.index = index if config.uses_chars else None
        self.dtype = np.dtype(config.dtype)
        self.rng = np.random.default_rng(seed)
        self.training = False
        self.params: dict[str, nx.Parameter] = {}
        self._out_weight: nx.Tensor | None = None
        self._init_params()

    # -- parameters ---------------------------------------------------------

    def _uniform(self, *shape):
        r = self.config.init_range
        return self.rng.uniform(-r, r, size=shape).astype(self.dtype)

    def _add(self, name, data):
        self.params[name] = nx.Parameter(name, data)

    def _init_params(self):
        cfg = self.config
        V, D = cfg.vocab_size, cfg.embed_dim
        self._add("E", self._uniform(V, D))
        if cfg.input_mode == "two_word_embeds":
            self._add("E2", self._uniform(V, D))
        if cfg.uses_chars:
            self._add("ngram_table", self._uniform(len(self.index), D))
            if cfg.encoder == "ms":
                self._add("W_c", self._uniform(D, D))
            elif cfg.encoder == "ss":
                self._add("w_ss", self._uniform(D))
        for layer, (d_in, d_h) in enumerate(cfg.layer_sizes()):
            self._add(f"lstm{layer}.W_ih", self._uniform(d_in, 4 * d_h))
            self._add(f"lstm{layer}.W_hh", self._uniform(d_h, 4 * d_h))
            b = np.zeros(4 * d_h, dtype=self.dtype)
            b[d_h : 2 * d_h] = cfg.forget_bias
            self._add(f"lstm{layer}.b", b)
        if cfg.tying == "untied":
            self._add("W", self._uniform(V, cfg.layer_sizes()[-1][1]))
        self._add("b", np.zeros(V, dtype=self.dtype))

    def parameters(self) -> list[nx.Parameter]:
        return list(self.params.values())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ConfigError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise ConfigError(f"parameter {k!r}: shape {a.shape}, model expects {p.shape}")
            p.data = a.astype(self.dtype, copy=True)
        self._out_weight = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    @property
    def attention_param(self):
        return self.params.get("W_c", self.params.get("w_ss"))

    # -- embeddings ---------------------------------------------------------

    def composed(self, word_ids) -> nx.Tensor:
        """Rows of ``C`` for ``word_ids``."""
        return compose_words(self.config.encoder, self.index, word_ids, self.params["ngram_table"], self.attention_param)

    def refresh_tied_output(self) -> nx.Tensor:
        """Recompute ``E + C`` from current parameters for the next forward pass."""
        if self.config.tying != "tie_E_plus_C":
            raise ConfigError(f"refresh_tied_output needs tying='tie_E_plus_C', model uses {self.config.tying!r}")
        C = self.composed(np.arange(self.config.vocab_size))
        self._full_C = C
        self._out_weight = nx.add(self.params["E"], C)
        return self._out_weight

    def output_weight(self) -> nx.Tensor:
        cfg = self.config
        if cfg.tying == "tie_E":
            return self.params["E"]
        if cfg.tying == "untied":
            return self.params["W"]
        if self._out_weight is None:
            self.refresh_tied_output()
        return self._out_weight

    def embed(self, ids, full_C: nx.Tensor | None = None) -> nx.Tensor:
        """Input vectors ``e_t`` for an integer array of any shape (rows added last)."""
        ids = np.asarray(ids, dtype=np.int64)
        mode = self.config.input_mode
        flat = ids.reshape(-1)
        parts = []
        if mode in ("word_only", "word_plus_char", "two_word_embeds"):
            parts.append(nx.embedding_lookup(self.params["E"], flat))
        if mode == "two_word_embeds":
            parts.append(nx.embedding_lookup(self.params["E2"], flat))
        if mode in ("word_plus_char", "char_only"):
            if full_C is not None:
                parts.append(nx.embedding_lookup(full_C, flat))
            else:
                uniq, inverse = np.unique(flat, return_inverse=True)
                parts.append(nx.embedding_lookup(self.composed(uniq), inverse))
        e = parts[0]
        for p in parts[1:]:
            e = nx.add(e, p)
        return nx.reshape(e, ids.shape + (self.config.embed_dim,))

    def embed_input(self, word_id: int) -> nx.Tensor:
        if not 0 <= word_id < self.config.vocab_size:
            raise IndexError(f"word id {word_id} outside [0, {self.config.vocab_size})")
        return nx.reshape(self.embed([word_id]), (self.config.embed_dim,))

    # -- recurrence ---------------------------------------------------------

    def init_state(self, batch_size: int):
        return [
            (np.zeros((batch_size, d_h), dtype=self.dtype), np.zeros((batch_size, d_h), dtype=self.dtype))
            for _, d_h in self.config.layer_sizes()
        ]

    def _drop(self, x, p):
        if not self.training or p <= 0:
            return x
        return nx.dropout(x, p, self.rng)

    def forward(self, inputs, state=None, refresh: bool = True):
        """Logits ``B x T x V`` for ``inputs`` (``B x T`` ids) and the carried state.

        The returned state holds plain arrays, so no gradient crosses a
        call boundary.  In ``tie_E_plus_C`` mode ``E + C`` is recomputed
        once per call and shared by the input and output sides; pass
        ``refresh=False`` to reuse the previous one while parameters are
        frozen.
        """
        inputs = np.asarray(inputs, dtype=np.int64)
        if inputs.ndim != 2:
            raise nx.ShapeError(f"forward: inputs must be B x T, got shape {inputs.shape}")
        B, T = inputs.shape
        cfg = self.config
        if state is None:
            state = self.init_state(B)
        if len(state) != cfg.n_layers or any(h.shape[0] != B for h, _ in state):
            raise nx.ShapeError(f"forward: state does not match {cfg.n_layers} layers x batch {B}")

        full_C = None
        if cfg.tying == "tie_E_plus_C":
            if refresh or self._out_weight is None:
                self.refresh_tied_output()
            full_C = self._full_C
        out_w = self.output_weight()

        # time-major rows: row t * B + b
        emb = self.embed(inputs.T.reshape(-1), full_C)
        emb = self._drop(emb, cfg.dropout_input)

        layer_in = emb
        new_state = []
        for layer, (h0, c0) in enumerate(state):
            W_ih = self.params[f"lstm{layer}.W_ih"]
            W_hh = self.params[f"lstm{layer}.W_hh"]
            b = self.params[f"lstm{layer}.b"]
            h, c = nx.Tensor(h0), nx.Tensor(c0)
            outs = []
            for t in range(T):
                x_t = nx.slice_rows(layer_in, t * B, (t + 1) * B)
                h, c = nx.lstm_cell(x_t, h, c, W_ih, W_hh, b)
                outs.append(h)
            new_state.append((h.data.copy(), c.data.copy()))
            layer_in = nx.concat_rows(outs)
            p = cfg.dropout_hidden if layer < cfg.n_layers - 1 else cfg.dropout_output
            layer_in = self._drop(layer_in, p)

        logits = nx.add_bias(nx.matmul(layer_in, nx.transpose(out_w)), self.params["b"])
        # reorder to batch-major rows b * T + t
        order = (np.arange(T)[None, :] * B + np.arange(B)[:, None]).reshape(-1)
        logits = nx.take_rows(logits, order)
        return nx.reshape(logits, (B, T, cfg.vocab_size)), new_state

    __call__ = forward


def sequence_loss(logits: nx.Tensor, targets) -> nx.Tensor:
    """Mean token cross-entropy over all ``B x T`` positions."""
    targets = np.asarray(targets)
    if logits.data.ndim != 3 or logits.shape[:2] != targets.shape:
        raise nx.ShapeError(f"sequence_loss: logits {logits.shape} vs targets {targets.shape}")
    V = logits.shape[2]
    return nx.cross_entropy(nx.reshape(logits, (-1, V)), targets.reshape(-1))


def perplexity(mean_nll: float) -> float:
    return float(np.exp(mean_nll))
