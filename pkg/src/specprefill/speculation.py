"""Token-importance speculation and the batched prefill rewrite.

A small speculator runs over the prompt (optionally decoding a few look-ahead
tokens). Its attention over the context is reduced to one score per token,
smoothed, and used to keep the highest-scoring contiguous chunks. The kept
tokens keep their original position ids and the base model resumes decoding
at the original context length.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Literal, Sequence

import numpy as np

from .errors import ConfigError, EmptyAggregationError, PositionError
from .model import (
    AttentionTensor,
    CapturedQueries,
    KVCache,
    Model,
    attention_scores,
    decode_step,
    greedy_token,
    prefill,
)


@dataclass(frozen=True)
class SpecConfig:
    """Speculation knobs.

    ``keep_rate`` is the fraction of chunks forwarded to the base model.
    ``look_ahead_steps`` is the number of extra greedy speculator steps whose
    attention is averaged in (0 uses the last prompt token only).
    """

    keep_rate: float = 0.1
    chunk_size: int = 32
    pool_window: int = 5
    look_ahead_steps: int = 0
    eos_token_id: int = 0

    def __post_init__(self):
        if not (isinstance(self.keep_rate, (int, float)) and 0 < self.keep_rate <= 1):
            raise ConfigError(f"keep_rate must be in (0, 1], got {self.keep_rate!r}")
        if not _pos_int(self.chunk_size):
            raise ConfigError(f"chunk_size must be a positive integer, got {self.chunk_size!r}")
        if not _pos_int(self.pool_window) or self.pool_window % 2 == 0:
            raise ConfigError(f"pool_window must be an odd positive integer, got {self.pool_window!r}")
        if not (_pos_int(self.look_ahead_steps) or self.look_ahead_steps == 0):
            raise ConfigError(f"look_ahead_steps must be >= 0, got {self.look_ahead_steps!r}")
        if not isinstance(self.eos_token_id, int):
            raise ConfigError("eos_token_id must be an integer")

    @classmethod
    def from_mapping(cls, data: dict) -> "SpecConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown speculation fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "SpecConfig":
        """Load from a JSON or TOML file; a ``[spec]`` table is used if present."""
        data = load_config_file(path)
        return cls.from_mapping(data.get("spec", data))


def load_config_file(path) -> dict:
    path = os.fspath(path)
    with open(path, "rb") as f:
        raw = f.read()
    try:
        if path.endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            return tomllib.loads(raw.decode("utf-8"))
        return json.loads(raw)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _pos_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool) and v > 0


@dataclass(frozen=True)
class SpeculatedPrompt:
    """Pruned prompt ready for the base model."""

    kept_token_ids: tuple[int, ...]
    kept_position_ids: tuple[int, ...]
    original_context_len: int
    first_decode_position: int

    def __post_init__(self):
        pos = self.kept_position_ids
        m = self.original_context_len
        if len(pos) != len(self.kept_token_ids) or not pos:
            raise ValueError("kept tokens and positions must be non-empty and aligned")
        if any(b <= a for a, b in zip(pos, pos[1:])) or pos[0] < 0 or pos[-1] >= m:
            raise PositionError(f"kept positions must be strictly increasing within [0, {m})")
        if self.first_decode_position != m:
            raise PositionError("first decode position must equal the original context length")

    @property
    def num_kept(self) -> int:
        return len(self.kept_token_ids)


Phase = Literal["prefill", "decode"]


@dataclass(frozen=True)
class Request:
    id: str
    tokens: tuple[int, ...]
    max_new_tokens: int = 16
    phase: Phase = "prefill"
    speculated: SpeculatedPrompt | None = None
    error: str | None = None

    def __post_init__(self):
        if self.phase not in ("prefill", "decode"):
            raise ValueError(f"unknown phase {self.phase!r}")


@dataclass
class RequestBatch:
    requests: list[Request] = field(default_factory=list)

    def __len__(self):
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    def split(self):
        """Indices of prefill-phase and decode-phase requests."""
        p = [i for i, r in enumerate(self.requests) if r.phase == "prefill"]
        d = [i for i, r in enumerate(self.requests) if r.phase == "decode"]
        return p, d


def look_ahead(speculator: Model, prompt_tokens: Sequence[int], spec: SpecConfig,
               cache: KVCache | None = None) -> CapturedQueries:
    """Prefill the speculator and greedily decode ``spec.look_ahead_steps`` tokens.

    Row 0 holds the last prompt token's queries; row k holds the queries of
    the k-th generated token. A row whose input token is EOS, and every row
    after it, is invalid and left zero-filled. Pass ``cache`` to keep the
    speculator KV needed by :func:`attention_scores`.
    """
    if len(prompt_tokens) == 0:
        raise ValueError("empty prompt")
    if cache is None:
        cache = KVCache(speculator.config)
    m = len(prompt_tokens)
    cfg = speculator.config
    logits, row = prefill(speculator, prompt_tokens, range(m), cache, capture_last=True)
    rows = [row]
    stopped = False
    for step in range(1, spec.look_ahead_steps + 1):
        tok = greedy_token(logits)
        position = m - 1 + step
        if stopped or tok == spec.eos_token_id:
            stopped = True
            rows.append(CapturedQueries(
                np.zeros((1, cfg.num_layers, cfg.num_query_heads, cfg.head_dim)),
                [position],
                [False],
            ))
            continue
        logits, row = decode_step(speculator, tok, position, cache, capture=True)
        rows.append(row)
    return CapturedQueries.concat(rows)


def compute_token_importance(attn: AttentionTensor) -> np.ndarray:
    """Max over layers and heads, then mean over valid rows; one score per token."""
    if attn.num_valid == 0:
        raise EmptyAggregationError("no valid attention rows to aggregate")
    valid = attn.scores[attn.row_valid]
    return valid.max(axis=(1, 3)).mean(axis=0)


def smooth_scores(scores: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average whose window shrinks at the edges."""
    if not _pos_int(window) or window % 2 == 0:
        raise ValueError(f"pooling window must be an odd positive integer, got {window!r}")
    x = np.asarray(scores, dtype=np.float64)
    if window == 1:
        return x.copy()
    half = window // 2
    # shifted sums, not cumsum differences: keeps tiny scores next to huge ones exact
    padded = np.pad(x, half)
    counts = np.pad(np.ones_like(x), half)
    total = np.zeros_like(x)
    n = np.zeros_like(x)
    for off in range(window):
        total += padded[off : off + len(x)]
        n += counts[off : off + len(x)]
    return total / n


def num_chunks_kept(context_len: int, spec: SpecConfig) -> int:
    n_chunks = -(-context_len // spec.chunk_size)
    return max(1, math.ceil(spec.keep_rate * n_chunks))


def chunk_means(scores: np.ndarray, chunk_size: int) -> np.ndarray:
    """Mean per contiguous chunk; a partial tail chunk is averaged over its true size."""
    x = np.asarray(scores, dtype=np.float64)
    starts = np.arange(0, len(x), chunk_size)
    sizes = np.minimum(starts + chunk_size, len(x)) - starts
    return np.add.reduceat(x, starts) / sizes


def select_chunks(scores: np.ndarray, spec: SpecConfig) -> np.ndarray:
    """Indices of the top-K chunks by mean score, sorted ascending.

    Ties between equal chunk means go to the lower chunk index, so the kept
    set only grows as ``keep_rate`` grows.
    """
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 1 or len(x) == 0:
        raise ValueError("scores must be a non-empty vector")
    means = chunk_means(x, spec.chunk_size)
    k = num_chunks_kept(len(x), spec)
    order = np.argsort(-means, kind="stable")
    kept = np.sort(order[:k])
    idx = (kept[:, None] * spec.chunk_size + np.arange(spec.chunk_size)[None, :]).ravel()
    return idx[idx < len(x)]


def restore_position_ids(kept_indices: Sequence[int], context_len: int):
    """Kept tokens keep their original positions; decoding resumes at ``context_len``.

    Returns:
        ``(kept_position_ids, first_decode_position)``.
    """
    kept = [int(i) for i in kept_indices]
    if not kept:
        raise PositionError("no kept indices")
    if kept[0] < 0 or kept[-1] >= context_len:
        raise PositionError(f"kept index out of range [0, {context_len})")
    if any(b <= a for a, b in zip(kept, kept[1:])):
        raise PositionError("kept indices must be strictly increasing")
    return kept, int(context_len)


@dataclass
class SpeculationTrace:
    """Intermediate products of one speculation run, for inspection."""

    captured: CapturedQueries
    attention: AttentionTensor
    importance: np.ndarray
    smoothed: np.ndarray
    kept_indices: np.ndarray


def speculate_prompt(speculator: Model, prompt_tokens: Sequence[int], spec: SpecConfig,
                     return_trace: bool = False):
    """Full pipeline for one prompt: look-ahead through position restoration."""
    tokens = [int(t) for t in prompt_tokens]
    m = len(tokens)
    cache = KVCache(speculator.config, capacity=m + spec.look_ahead_steps)
    captured = look_ahead(speculator, tokens, spec, cache=cache)
    attn = attention_scores(captured, cache, m)
    importance = compute_token_importance(attn)
    smoothed = smooth_scores(importance, spec.pool_window)
    kept = select_chunks(smoothed, spec)
    positions, first_decode = restore_position_ids(kept, m)
    prompt = SpeculatedPrompt(
        kept_token_ids=tuple(tokens[i] for i in positions),
        kept_position_ids=tuple(positions),
        original_context_len=m,
        first_decode_position=first_decode,
    )
    if return_trace:
        return prompt, SpeculationTrace(captured, attn, importance, smoothed, kept)
    return prompt


def speculate_prefill(batch: RequestBatch, speculator: Model, spec: SpecConfig) -> RequestBatch:
    """Rewrite every prefill-phase request to its speculated prompt.

    Decode-phase requests are passed through as the same objects. A request
    that fails keeps ``speculated=None`` and records the message in ``error``;
    the other requests are unaffected. Output order matches input order.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    prefill_idx, _ = batch.split()
    out = list(batch.requests)
    for i in prefill_idx:
        req = batch.requests[i]
        try:
            out[i] = replace(req, speculated=speculate_prompt(speculator, req.tokens, spec))
        except Exception as exc:  # isolate per-request failures
            out[i] = replace(req, speculated=None, error=f"{type(exc).__name__}: {exc}")
    return RequestBatch(out)


def _greedy_continue(model, cache, logits, position, max_new_tokens, eos_token_id):
    out = []
    while len(out) < max_new_tokens:
        tok = greedy_token(logits)
        out.append(tok)
        if tok == eos_token_id or len(out) == max_new_tokens:
            break
        logits, _ = decode_step(model, tok, position, cache)
        position += 1
    return out


def generate(model: Model, prompt_tokens: Sequence[int], max_new_tokens: int,
             eos_token_id: int = 0) -> list[int]:
    """Baseline greedy generation with a full, contiguous prefill."""
    m = len(prompt_tokens)
    if m == 0:
        raise ValueError("empty prompt")
    cache = KVCache(model.config, capacity=m + max_new_tokens)
    logits, _ = prefill(model, prompt_tokens, range(m), cache)
    return _greedy_continue(model, cache, logits, m, max_new_tokens, eos_token_id)


def generate_from_speculated(base: Model, prompt: SpeculatedPrompt, max_new_tokens: int,
                             eos_token_id: int = 0) -> list[int]:
    cache = KVCache(base.config, capacity=prompt.num_kept + max_new_tokens)
    logits, _ = prefill(base, prompt.kept_token_ids, prompt.kept_position_ids, cache)
    return _greedy_continue(
        base, cache, logits, prompt.first_decode_position, max_new_tokens, eos_token_id
    )


def generate_with_spec(base: Model, speculator: Model, prompt_tokens: Sequence[int],
                       spec: SpecConfig, max_new_tokens: int) -> list[int]:
    """Speculate on the prompt, prefill the base on the kept tokens, then decode greedily."""
    prompt = speculate_prompt(speculator, prompt_tokens, spec)
    return generate_from_speculated(base, prompt, max_new_tokens, spec.eos_token_id)
