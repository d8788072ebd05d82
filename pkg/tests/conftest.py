import numpy as np
import pytest

from hstory.dataio import NULL, SOS, EmbeddingTable
from hstory.decoder import ModelParameters
from hstory.numerics import Tensor

_RESULTS = pytest.StashKey[dict]()


def random_table(rng, vocab, dim):
    tokens = [NULL, SOS] + [f"w{i}" for i in range(vocab - 2)]
    return EmbeddingTable(tokens, rng.normal(size=(vocab, dim)))


def random_model(seed, vocab=6, dim=4, raw_dim=3, attn_dim=None, head_scale=1.0):
    """A small randomly initialised model; ``head_scale`` sharpens the output head."""
    rng = np.random.default_rng(seed)
    params = ModelParameters.init(seed, raw_dim, random_table(rng, vocab, dim), attn_dim=attn_dim)
    params.tensors["W_out"] = Tensor(params.W_out.data * head_scale)
    params.tensors["b_out"] = Tensor(rng.normal(size=vocab) * head_scale)
    return params


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    results = item.config.stash.setdefault(_RESULTS, {})
    passed = call.excinfo is None
    prev = results.get(number, (title, True))
    results[number] = (title, prev[1] and passed)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed = results[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}")
