"""Wall-clock TTFT over a batch-size x sequence-length grid.

TTFT is measured as prefill plus the first decode step. The speculative
path also pays for the speculator pass. Requests in a batch are processed
one after another; the reported time covers the whole batch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import KVCache, Model, decode_step, greedy_token, prefill
from .speculation import SpecConfig, speculate_prompt

BENCH_COLUMNS = ("batch", "seq_len", "baseline_ms", "spec_ms", "speedup", "kept_tokens")


@dataclass
class BenchRow:
    batch: int
    seq_len: int
    baseline_ms: float
    spec_ms: float
    kept_tokens: int

    @property
    def speedup(self) -> float:
        return self.baseline_ms / self.spec_ms

    def as_csv(self) -> list:
        return [self.batch, self.seq_len, f"{self.baseline_ms:.3f}", f"{self.spec_ms:.3f}",
                f"{self.speedup:.4f}", self.kept_tokens]


def parse_grid(text: str) -> list[tuple[int, int]]:
    """``"1x512,4x512"`` -> ``[(1, 512), (4, 512)]``."""
    grid = []
    for item in text.split(","):
        item = item.strip()
        try:
            b, s = item.lower().split("x")
            b, s = int(b), int(s)
        except ValueError:
            raise ConfigError(f"bad grid entry {item!r}; expected BxS") from None
        if b < 1 or s < 1:
            raise ConfigError(f"bad grid entry {item!r}; B and S must be >= 1")
        grid.append((b, s))
    if not grid:
        raise ConfigError("empty grid")
    return grid


def _first_token_baseline(model: Model, tokens) -> int:
    m = len(tokens)
    cache = KVCache(model.config, capacity=m + 1)
    logits, _ = prefill(model, tokens, range(m), cache)
    logits, _ = decode_step(model, greedy_token(logits), m, cache)
    return greedy_token(logits)


def _first_token_spec(base: Model, speculator: Model, tokens, spec: SpecConfig) -> int:
    sp = speculate_prompt(speculator, tokens, spec)
    cache = KVCache(base.config, capacity=sp.num_kept + 1)
    logits, _ = prefill(base, sp.kept_token_ids, sp.kept_position_ids, cache)
    logits, _ = decode_step(base, greedy_token(logits), sp.first_decode_position, cache)
    return sp.num_kept


def bench_ttft(base: Model, speculator: Model, grid, spec: SpecConfig, repeats: int = 3,
               seed: int = 0) -> list[BenchRow]:
    """Best-of-``repeats`` batch TTFT with and without speculation."""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    vocab = min(base.config.vocab_size, speculator.config.vocab_size)
    rows = []
    for b, s in grid:
        rng = np.random.default_rng([seed, b, s])
        prompts = [rng.integers(1, vocab, size=s).tolist() for _ in range(b)]
        base_best = spec_best = float("inf")
        kept = 0
        for _ in range(repeats):
            t0 = time.perf_counter()
            for p in prompts:
                _first_token_baseline(base, p)
            base_best = min(base_best, time.perf_counter() - t0)
            t0 = time.perf_counter()
            kept = 0
            for p in prompts:
                kept += _first_token_spec(base, speculator, p, spec)
            spec_best = min(spec_best, time.perf_counter() - t0)
        rows.append(BenchRow(b, s, base_best * 1e3, spec_best * 1e3, kept))
    return rows
