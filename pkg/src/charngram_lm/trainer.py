"""SGD training loop, perplexity evaluation and checkpoint files."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .corpus import Vocabulary, make_batches
from .lm import ConfigError, LanguageModel, ModelConfig, sequence_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    """Raised when the loss turns non-finite; ``history`` holds completed epochs."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
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

    def validate(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.avg_patience < 0:
            raise ConfigError("avg_patience must be non-negative (0 disables averaging)")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must lie in (0, 1]")
        if min(self.epochs, self.batch_size, self.bptt, self.eval_batch_size, self.eval_every) < 1:
            raise ConfigError("epochs, batch sizes, bptt and eval_every must be positive")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_gradients(params, clip_norm: float) -> float:
    """Scale all gradients so their joint norm is at most ``clip_norm``; returns the pre-clip norm."""
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise nx.NonFiniteError(f"non-finite gradient in parameter {getattr(p, 'name', '?')!r}")
    norm = global_grad_norm(params)
    if norm > clip_norm:
        factor = clip_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return norm


def sgd_step(params, lr: float, clip_norm: float | None = None) -> float:
    norm = clip_gradients(params, clip_norm) if clip_norm is not None else global_grad_norm(params)
    if lr == 0:
        return norm
    for p in params:
        if p.grad is not None and getattr(p, "trainable", True):
            p.data -= p.data.dtype.type(lr) * p.grad
    return norm


def position_nll(model: LanguageModel, token_ids, batch_size: int, bptt: int):
    """Per-position NLL with the input and target ids behind each one.

    Dropout is off and state is carried across slices.  Positions are
    returned row by row in stream order.  The slice length is shortened
    for texts too small to fill one ``batch_size x bptt`` window.
    """
    bptt = max(1, min(bptt, len(token_ids) // batch_size - 1))
    stream = make_batches(token_ids, batch_size, bptt)
    was_training = model.training
    model.eval()
    nll, inp, tgt = [], [], []
    state = None
    try:
        with nx.no_grad():
            for k, (x, y) in enumerate(stream):
                logits, state = model.forward(x, state, refresh=k == 0)
                logp = nx.log_softmax_np(logits.data.astype(np.float64), axis=-1)
                nll.append(-np.take_along_axis(logp, y[..., None], axis=-1)[..., 0])
                inp.append(x)
                tgt.append(y)
    finally:
        model.train(was_training)
    cat = lambda parts: np.concatenate(parts, axis=1).reshape(-1)  # noqa: E731
    return cat(nll), cat(inp), cat(tgt)


def evaluate(model: LanguageModel, token_ids, batch_size: int = 10, bptt: int = 35) -> float:
    nll, _, _ = position_nll(model, token_ids, batch_size, bptt)
    return float(np.exp(nll.mean()))


def evaluate_by_frequency(
    model: LanguageModel,
    token_ids,
    vocab: Vocabulary,
    threshold: float,
    bucket_on: str = "input",
    batch_size: int = 10,
    bptt: int = 35,
) -> dict:
    """Perplexity split by whether the input (or target) word is rarer than ``threshold``.

    Buckets with no positions come back as ``None``.
    """
    if bucket_on not in ("input", "target"):
        raise ValueError(f"bucket_on must be 'input' or 'target', got {bucket_on!r}")
    nll, inp, tgt = position_nll(model, token_ids, batch_size, bptt)
    return bucket_report(nll, inp if bucket_on == "input" else tgt, vocab, threshold, bucket_on)


def bucket_report(nll, keys, vocab: Vocabulary, threshold: float, bucket_on: str = "input") -> dict:
    freq = np.asarray(vocab.freq)[keys]
    rare = freq < threshold

    def summarize(mask):
        n = int(mask.sum())
        if n == 0:
            return None
        mean = float(nll[mask].mean())
        return {"positions": n, "mean_nll": mean, "perplexity": math.exp(mean)}

    return {
        "threshold": threshold,
        "bucket_on": bucket_on,
        "overall": summarize(np.ones_like(rare)),
        "infrequent": summarize(rare),
        "frequent": summarize(~rare),
    }


# -- checkpoints -------------------------------------------------------------


def _paths(path):
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return base.with_suffix(".json"), base.with_suffix(".bin")


def save_checkpoint(path, model: LanguageModel, train_config: TrainConfig | None = None, epoch=0, history=None, arrays=None):
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian tensors)."""
    manifest_path, blob_path = _paths(path)
    arrays = model.named_arrays() if arrays is None else arrays
    directory, offset = [], 0
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    with open(blob_path, "wb") as fh:
        for name, a in arrays.items():
            le = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
            raw = le.tobytes()
            directory.append(
                {"name": name, "dtype": le.dtype.str, "shape": list(a.shape), "offset": offset, "length": len(raw)}
            )
            fh.write(raw)
            offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": None if train_config is None else train_config.to_dict(),
        "epoch": epoch,
        "history": history or [],
        "vocab": {"words": model.vocab.words, "freq": model.vocab.freq, "specials": sorted(model.vocab.specials)},
        "payload_length": offset,
        "tensors": directory,
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh)
    return manifest_path, blob_path


def read_checkpoint(path):
    """Manifest dict and ``{name: array}`` after validating every length."""
    manifest_path, blob_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {manifest_path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}")
    blob = blob_path.read_bytes()
    if len(blob) != manifest["payload_length"]:
        raise CheckpointError(f"payload is {len(blob)} bytes, manifest expects {manifest['payload_length']}")
    arrays = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        need = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        lo, n = entry["offset"], entry["length"]
        if n != need or lo < 0 or lo + n > len(blob):
            raise CheckpointError(f"tensor {entry['name']!r}: {n} bytes at offset {lo} do not fit shape {list(shape)}")
        arrays[entry["name"]] = np.frombuffer(blob, dtype=dtype, count=need // dtype.itemsize, offset=lo).reshape(shape)
    return manifest, arrays


def load_checkpoint(path):
    """Rebuild the model; returns ``(model, manifest)``."""
    manifest, arrays = read_checkpoint(path)
    v = manifest["vocab"]
    vocab = Vocabulary.from_words(v["words"], v["freq"], specials=())
    vocab.specials = frozenset(v["specials"])
    config = ModelConfig.from_dict(manifest["model_config"])
    model = LanguageModel(config, vocab)
    try:
        model.load_arrays({k: a.astype(a.dtype.newbyteorder("=")) for k, a in arrays.items()})
    except ConfigError as exc:
        raise CheckpointError(str(exc)) from exc
    return model, manifest


# -- training ------------------------------------------------------------------


class MetricsLog:
    """Append-only JSON-lines writer."""

    def __init__(self, path):
        self.path = None if path is None else Path(path)

    def write(self, record):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")


def _snapshot(model):
    return {k: a.copy() for k, a in model.named_arrays().items()}


def train(
    model: LanguageModel,
    train_ids,
    valid_ids,
    config: TrainConfig,
    metrics_path=None,
    checkpoint_path=None,
    on_step=None,
):
    """Train in place; returns the per-epoch history.

    The best-validation parameters are loaded back into ``model`` at the end
    and, when ``checkpoint_path`` is given, written there whenever they
    improve.  ``lr`` is multiplied by ``decay_factor`` after ``patience``
    epochs without improvement.  With ``avg_patience > 0`` a running
    parameter average starts after that many non-improving epochs and is
    what gets evaluated from then on.
    """
    config.validate()
    metrics = MetricsLog(metrics_path)
    params = model.parameters()
    history = []
    lr = config.lr
    best_ppl, best_arrays, best_epoch = math.inf, _snapshot(model), 0
    since_best = since_best_avg = 0
    averaging, avg, n_avg = False, None, 0

    def save_best():
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, config, best_epoch, history, arrays=best_arrays)

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        state, total, count = None, 0.0, 0
        for x, y in make_batches(train_ids, config.batch_size, config.bptt):
            model.zero_grad()
            try:
                logits, state = model.forward(x, state)
                loss = sequence_loss(logits, y)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise nx.NonFiniteError(f"loss became {value}")
                loss.backward()
                sgd_step(params, lr, config.clip_norm)
            except nx.NonFiniteError as exc:
                save_best()
                raise TrainingDiverged(f"epoch {epoch}: {exc}", history) from exc
            if averaging:
                n_avg += 1
                for k, a in model.named_arrays().items():
                    avg[k] += (a - avg[k]) / n_avg
            total += value * y.size
            count += y.size
            if on_step is not None:
                on_step(value)
        model.zero_grad()

        record = {"epoch": epoch, "train_loss": total / count, "lr": lr, "averaged": averaging}
        if valid_ids is not None and epoch % config.eval_every == 0:
            if averaging:
                current = _snapshot(model)
                model.load_arrays(avg)
                ppl = evaluate(model, valid_ids, config.eval_batch_size, config.bptt)
                candidate = _snapshot(model)
                model.load_arrays(current)
            else:
                ppl = evaluate(model, valid_ids, config.eval_batch_size, config.bptt)
                candidate = None
            record["valid_ppl"] = ppl
            if ppl < best_ppl:
                best_ppl = ppl
                best_arrays = candidate if candidate is not None else _snapshot(model)
                best_epoch = epoch
                since_best = since_best_avg = 0
                record["seconds"] = time.perf_counter() - t0
                history.append(record)
                save_best()
            else:
                since_best += 1
                since_best_avg += 1
                if config.avg_patience and not averaging and since_best_avg >= config.avg_patience:
                    averaging, avg, n_avg = True, _snapshot(model), 1
                    since_best_avg = 0
                if since_best >= config.patience:
                    lr *= config.decay_factor
                    since_best = 0
                record["seconds"] = time.perf_counter() - t0
                history.append(record)
        else:
            record["valid_ppl"] = None
            record["seconds"] = time.perf_counter() - t0
            history.append(record)
        metrics.write(record)
        log.info("epoch %d  train loss %.4f  valid ppl %s  lr %g", epoch, record["train_loss"], record["valid_ppl"], lr)

    if valid_ids is not None and best_ppl < math.inf:
        model.load_arrays(best_arrays)
    else:
        best_arrays, best_epoch = _snapshot(model), config.epochs
        save_best()
    return history
