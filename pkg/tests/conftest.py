import numpy as np
import pytest

from charngram_lm.corpus import build_vocabulary, tokenize_lines
from charngram_lm.lm import LanguageModel, ModelConfig

TOY_LINES = ["the cat sat on the mat", "a hat that cats <unk> then", "they sat"]


@pytest.fixture
def toy_vocab():
    return build_vocabulary(tokenize_lines(TOY_LINES))


def tiny_model(vocab, input_mode="word_plus_char", tying="tie_E_plus_C", encoder="ms", ngram=3, seed=0,
               dim=3, hidden=3, layers=1, dtype="float64", dropout=0.0, init_range=0.5):
    if encoder == "none":
        ngram = 0
    cfg = ModelConfig(
        vocab_size=len(vocab), embed_dim=dim, hidden_dim=hidden, n_layers=layers, ngram=ngram, encoder=encoder,
        input_mode=input_mode, tying=tying, dropout_input=dropout, dropout_hidden=dropout, dropout_output=dropout,
        init_range=init_range, dtype=dtype,
    )
    return LanguageModel(cfg, vocab, seed=seed)


def cyclic_ids(n_tokens=200, period=5):
    return np.arange(n_tokens) % period


@pytest.fixture
def make_model():
    return tiny_model


# -- acceptance summary --------------------------------------------------------

_ACCEPTANCE = {}


@pytest.fixture
def note(request):
    """Attach a short result string to the running acceptance criterion."""

    def add(text):
        request.node.user_properties.append(("note", text))

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    rep = outcome.get_result()
    number, title = marker.args
    notes = [v for k, v in item.user_properties if k == "note"]
    if rep.skipped:
        reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else str(rep.longrepr)
        _ACCEPTANCE[number] = ("FAIL", title, f"not run: {reason.removeprefix('Skipped: ')}")
    elif rep.when == "call":
        status = "PASS" if rep.passed else "FAIL"
        _ACCEPTANCE[number] = (status, title, "; ".join(notes))
    elif rep.failed:
        _ACCEPTANCE[number] = ("FAIL", title, f"error in {rep.when}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        line = f"criterion {number:>2}  {status}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
