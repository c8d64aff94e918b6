import numpy as np
import pytest

from specprefill.config import TINY, ModelConfig
from specprefill.model import init_model


def random_config(rng, max_layers=4, max_heads=4, vocab_size=64, max_position=256):
    """Small GQA config with every divisibility constraint satisfied."""
    heads = int(rng.choice([h for h in (1, 2, 4) if h <= max_heads]))
    kv_heads = int(rng.choice([k for k in (1, 2, 4) if heads % k == 0]))
    head_dim = int(rng.choice([2, 4, 8]))
    return ModelConfig(
        num_layers=int(rng.integers(1, max_layers + 1)),
        hidden_size=heads * head_dim,
        intermediate_size=int(rng.integers(4, 33)),
        num_query_heads=heads,
        num_kv_heads=kv_heads,
        vocab_size=vocab_size,
        max_position=max_position,
    )


@pytest.fixture(scope="session")
def tiny_model():
    return init_model(TINY, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one acceptance line; the summary hook prints them after the run."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def _report(number, name, ok, detail):
        lines.append((number, f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {name} ({detail})"))
        return ok

    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
