"""Command-line entry point: ``charngram-lm {build-vocab,train,eval,inspect,export}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .composer import CompositionError, attention_record
from .corpus import DEFAULT_SPECIALS, CorpusError, Corpus, build_ngram_index, read_tokens
from .lm import ConfigError, LanguageModel, ModelConfig
from .trainer import (
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    bucket_report,
    load_checkpoint,
    position_nll,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("charngram_lm")


class DataError(RuntimeError):
    pass


KEY_HELP = {
    "train": "training text file (whitespace tokens, one sentence per line)",
    "valid": "validation text file",
    "test": "test text file",
    "out_dir": "directory for checkpoint, metrics, vocabulary and reports",
    "add_eos": "append an end-of-sentence token to every line",
    "specials": "tokens treated as atomic (no character n-grams)",
    "train_limit": "keep only the first N training tokens (0 = all)",
    "embed_dim": "embedding size D_e (word and n-gram embeddings)",
    "hidden_dim": "LSTM hidden size; tied models end with a layer of size embed_dim",
    "n_layers": "number of stacked LSTM layers",
    "ngram": "character n-gram order (0 = word-only model)",
    "encoder": "n-gram encoder: ms, ss, sum or none",
    "input_mode": "word_plus_char, char_only, word_only or two_word_embeds",
    "tying": "output projection: tie_E, tie_E_plus_C or untied",
    "dropout_input": "dropout on the combined input embedding",
    "dropout_hidden": "dropout between LSTM layers",
    "dropout_output": "dropout before the output projection",
    "init_range": "uniform initialization range for weights and embeddings",
    "forget_bias": "initial LSTM forget-gate bias",
    "dtype": "float32 or float64",
    "lr": "SGD learning rate",
    "clip_norm": "global gradient-norm clipping threshold",
    "epochs": "number of training epochs",
    "batch_size": "training batch rows B",
    "bptt": "truncated-BPTT length",
    "eval_batch_size": "batch rows used for evaluation",
    "decay_factor": "learning-rate multiplier applied on a validation plateau",
    "patience": "non-improving epochs before the learning rate decays",
    "avg_patience": "non-improving epochs before parameter averaging starts (0 = off)",
    "seed": "random seed for initialization and dropout",
    "eval_every": "evaluate on validation data every N epochs",
}


@dataclass
class RunConfig:
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    out_dir: str = "run"
    add_eos: bool = True
    specials: list = field(default_factory=lambda: list(DEFAULT_SPECIALS))
    train_limit: int = 0
    # model
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
    # training
    lr: float = 5.0
    clip_norm: float = 0.25
    epochs: int = 10
    batch_size: int = 20
    bptt: int = 35
    eval_batch_size: int = 10
    decay_factor: float = 0.25
    patience: int = 1
    avg_patience: int = 0
    seed: int = 0
    eval_every: int = 1

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        data = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except OSError as exc:
                raise DataError(f"cannot read config {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
            base = Path(path).parent
            for key in ("train", "valid", "test", "out_dir"):
                if data.get(key) is not None and not Path(data[key]).is_absolute():
                    data[key] = str(base / data[key])
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def model_config(self, vocab_size) -> ModelConfig:
        keys = {f.name for f in fields(ModelConfig)} - {"vocab_size"}
        return ModelConfig(vocab_size=vocab_size, **{k: getattr(self, k) for k in keys}).validate()

    def train_config(self) -> TrainConfig:
        keys = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in keys}).validate()

    def validate(self):
        # model checks need no vocabulary, so a placeholder size is fine
        self.model_config(1)
        self.train_config()
        if self.train is None:
            raise ConfigError("no training file given (key 'train')")
        for key in ("train", "valid", "test"):
            p = getattr(self, key)
            if p is not None and not Path(p).is_file():
                raise DataError(f"{key} file not found: {p}")
        return self


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _bool(text):
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_run_flags(p):
    defaults = RunConfig()
    for f in fields(RunConfig):
        default = getattr(defaults, f.name)
        flag = "--" + f.name.replace("_", "-")
        help_text = f"{KEY_HELP[f.name]} (default: {default})"
        if isinstance(default, bool):
            p.add_argument(flag, dest=f.name, type=_bool, help=help_text)
        elif isinstance(default, list):
            p.add_argument(flag, dest=f.name, nargs="*", help=help_text)
        elif isinstance(default, (int, float)):
            p.add_argument(flag, dest=f.name, type=type(default), help=help_text)
        else:
            p.add_argument(flag, dest=f.name, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="charngram-lm", description="Word LSTM language models with character n-gram embeddings.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-vocab", help="write vocabulary and n-gram tables for a training file")
    p.add_argument("train_file")
    p.add_argument("--ngram", type=int, default=3)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--no-eos", action="store_true", help="do not append <eos> to each line")

    p = sub.add_parser("train", help="train a model; every config key can be overridden by a flag")
    p.add_argument("--config", help="JSON file with any of the keys below")
    _add_run_flags(p)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a text file")
    p.add_argument("checkpoint")
    p.add_argument("text")
    p.add_argument("--freq-threshold", type=float, help="also report buckets by training frequency below this value")
    p.add_argument("--bucket-on", choices=("input", "target"), default="input")
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--bptt", type=int, default=35)
    p.add_argument("--report", help="JSON report path (default: next to the checkpoint)")
    p.add_argument("--no-eos", action="store_true")

    p = sub.add_parser("inspect", help="n-grams, attention weights and neighbours of a word")
    p.add_argument("checkpoint")
    p.add_argument("word")
    p.add_argument("--top", type=int, default=10)

    p = sub.add_parser("export", help="write embeddings as 'surface dim1 dim2 ...' lines")
    p.add_argument("checkpoint")
    p.add_argument("which", choices=("E", "C", "E_plus_C"))
    p.add_argument("out")
    return parser


# -- commands -------------------------------------------------------------------


def _fresh_path(path: Path) -> Path:
    if not path.exists():
        return path
    k = 1
    while True:
        candidate = path.with_name(f"{path.stem}.{k}{path.suffix}")
        if not candidate.exists():
            return candidate
        k += 1


def cmd_build_vocab(args):
    corpus = Corpus.from_files(args.train_file, add_eos=not args.no_eos)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(out / "vocab.tsv")
    stats = {"vocab_size": len(corpus.vocab), "train_tokens": int(len(corpus.train))}
    if args.ngram:
        index = build_ngram_index(corpus.vocab, args.ngram)
        index.save(out / f"ngrams{args.ngram}.tsv")
        stats[f"char{args.ngram}_types"] = len(index)
    print(json.dumps(stats))
    return EXIT_OK


def cmd_train(args):
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    run = RunConfig.load(args.config, overrides).validate()
    corpus = Corpus.from_files(run.train, run.valid, run.test, add_eos=run.add_eos, specials=run.specials)
    train_ids = corpus.train[: run.train_limit] if run.train_limit else corpus.train
    model_cfg = run.model_config(len(corpus.vocab))
    train_cfg = run.train_config()
    model = LanguageModel(model_cfg, corpus.vocab, seed=run.seed)

    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(run), indent=2), encoding="utf-8")
    corpus.vocab.save(out / "vocab.tsv")
    if model.index is not None:
        model.index.save(out / f"ngrams{model_cfg.ngram}.tsv")
    metrics_path = _fresh_path(out / "metrics.jsonl")
    try:
        history = train(model, train_ids, corpus.valid, train_cfg, metrics_path, out / "model")
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}; best checkpoint kept in {out / 'model.json'}", file=sys.stderr)
        return EXIT_NUMERIC
    report = {"epochs": len(history)}
    for split in ("valid", "test"):
        ids = getattr(corpus, split)
        if ids is not None:
            nll, _, _ = position_nll(model, ids, train_cfg.eval_batch_size, train_cfg.bptt)
            report[f"{split}_ppl"] = float(np.exp(nll.mean()))
    (out / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(json.dumps(report))
    return EXIT_OK


def _load(path):
    try:
        return load_checkpoint(path)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint config does not match its vocabulary: {exc}") from exc


def cmd_eval(args):
    model, manifest = _load(args.checkpoint)
    ids = model.vocab.encode(read_tokens(args.text, add_eos=not args.no_eos))
    nll, inputs, targets = position_nll(model, ids, args.batch_size, args.bptt)
    mean = float(nll.mean())
    report = {"checkpoint": str(args.checkpoint), "text": str(args.text), "positions": int(len(nll)),
              "mean_nll": mean, "perplexity": float(np.exp(mean))}
    lines = [f"perplexity  {report['perplexity']:.4f}  ({len(nll)} positions)"]
    if args.freq_threshold is not None:
        keys = inputs if args.bucket_on == "input" else targets
        buckets = bucket_report(nll, keys, model.vocab, args.freq_threshold, args.bucket_on)
        report["buckets"] = buckets
        for name in ("infrequent", "frequent"):
            b = buckets[name]
            shown = "absent" if b is None else f"{b['perplexity']:.4f}  ({b['positions']} positions)"
            lines.append(f"{name:<11} {shown}")
    print("\n".join(lines))
    base = Path(args.checkpoint).with_suffix("")
    report_path = Path(args.report) if args.report else base.with_name(f"{base.name}.eval-{Path(args.text).stem}.json")
    report_path.write_text(json.dumps(report, indent=2), encoding="utf-8")
    return EXIT_OK


def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _embeddings(model, which) -> np.ndarray:
    E = model.params["E"].data
    if which == "E":
        return E
    if not model.config.uses_chars:
        raise ConfigError(f"cannot export {which}: the model has no n-gram encoder")
    with nx.no_grad():
        C = model.composed(np.arange(model.config.vocab_size)).data
    return C if which == "C" else E + C


def cosine_neighbours(M: np.ndarray, row: int, k: int):
    norms = np.linalg.norm(M, axis=1)
    sims = M @ M[row] / np.maximum(norms * norms[row], 1e-12)
    sims[row] = -np.inf
    order = [i for i in np.argsort(-sims, kind="stable") if i != row][:k]
    return [(int(i), float(sims[i])) for i in order]


def cmd_inspect(args):
    model, _ = _load(args.checkpoint)
    vocab = model.vocab
    if args.word not in vocab:
        close = sorted(vocab.words, key=lambda w: (edit_distance(args.word, w), w))[:5]
        print(f"{args.word!r} is not in the vocabulary; closest: {', '.join(close)}", file=sys.stderr)
        return EXIT_DATA
    w = vocab.id_of[args.word]
    if vocab.is_special(w):
        print("special tokens have no character composition")
        return EXIT_OK
    cfg = model.config
    if cfg.uses_chars:
        names = model.index.ngrams
        grams = [names[g] for g in model.index.grams_of_word[w]]
        print(f"{cfg.ngram}-grams: {' '.join(grams)}")
        record = attention_record(cfg.encoder, model.index, w, model.params["ngram_table"], model.attention_param)
        if record is None:
            print("encoder 'sum' has no attention weights")
        else:
            print(f"{'gram':<12}{'mean weight':>12}   top dimensions")
            for i, g in enumerate(grams):
                if record.weights.ndim == 2:
                    col = record.weights[:, i]
                    top = np.argsort(-col, kind="stable")[:5]
                    dims = "  ".join(f"{d}:{col[d]:.3f}" for d in top)
                else:
                    dims = "-"
                print(f"{g:<12}{record.per_gram_mean[i]:>12.4f}   {dims}")
            print(f"{'total':<12}{record.per_gram_mean.sum():>12.4f}")
    else:
        print("word-only model: no character n-grams")
    spaces = ["E"] + (["E_plus_C"] if cfg.uses_chars else [])
    for which in spaces:
        M = _embeddings(model, which)
        label = "E+C" if which == "E_plus_C" else "E"
        neighbours = ", ".join(f"{vocab.words[i]} ({s:.3f})" for i, s in cosine_neighbours(M, w, args.top))
        print(f"neighbours under {label}: {neighbours}")
    return EXIT_OK


def cmd_export(args):
    model, _ = _load(args.checkpoint)
    M = _embeddings(model, args.which)
    with open(args.out, "w", encoding="utf-8") as fh:
        for word, row in zip(model.vocab.words, M):
            fh.write(word + " " + " ".join(repr(float(x)) for x in row) + "\n")
    return EXIT_OK


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "export": cmd_export,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CompositionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CorpusError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, nx.NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
