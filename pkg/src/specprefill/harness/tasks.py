"""Needle-retrieval style prompts over a toy vocabulary.

Vocabulary layout for a vocabulary of size V with ``needle_vocab`` reserved
ids::

    0                 EOS
    1                 BOS
    2                 query marker (always the last prompt token)
    3                 separator
    [4, V - nv)       filler
    [V - nv, V)       needle tokens
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

EOS_ID = 0
BOS_ID = 1
QUERY_ID = 2
SEP_ID = 3
FIRST_FILLER = 4
DEFAULT_NEEDLE_VOCAB = 16

TaskKind = Literal["needle", "passkey", "copy"]


@dataclass(frozen=True)
class SyntheticTask:
    prompt_tokens: tuple[int, ...]
    needle_span: tuple[int, int]
    answer_tokens: tuple[int, ...]
    task_kind: TaskKind

    def __post_init__(self):
        start, end = self.needle_span
        if not 0 <= start < end <= len(self.prompt_tokens):
            raise ValueError(f"needle span {self.needle_span} outside prompt")

    @property
    def needle_tokens(self) -> tuple[int, ...]:
        start, end = self.needle_span
        return self.prompt_tokens[start:end]


def needle_token_range(vocab_size: int, needle_vocab: int = DEFAULT_NEEDLE_VOCAB) -> range:
    return range(vocab_size - needle_vocab, vocab_size)


def _layout(total_len, fraction, needle_len, suffix_len, chunk_size, vocab_size, needle_vocab):
    if not 0 <= fraction <= 1:
        raise ValueError(f"needle position fraction must be in [0, 1], got {fraction}")
    if total_len < chunk_size:
        raise ValueError(f"total_len {total_len} shorter than one chunk ({chunk_size})")
    if vocab_size - needle_vocab <= FIRST_FILLER:
        raise ValueError("vocabulary too small for filler plus needle tokens")
    body = total_len - suffix_len
    if needle_len < 1 or needle_len > body:
        raise ValueError(f"needle of length {needle_len} does not fit a {total_len}-token prompt")
    return min(math.floor(fraction * total_len), body - needle_len)


def gen_needle(seed: int, total_len: int, needle_pos_fraction: float, vocab_size: int,
               needle_len: int = 8, needle_vocab: int = DEFAULT_NEEDLE_VOCAB,
               chunk_size: int = 32) -> SyntheticTask:
    """Random filler with a run of needle-vocabulary tokens planted inside.

    The needle starts at ``floor(fraction * total_len)``, pulled back if it
    would overlap the trailing query marker. The answer is the needle itself.
    """
    start = _layout(total_len, needle_pos_fraction, needle_len, 1, chunk_size,
                    vocab_size, needle_vocab)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(FIRST_FILLER, vocab_size - needle_vocab, size=total_len)
    needle = rng.integers(vocab_size - needle_vocab, vocab_size, size=needle_len)
    tokens[start : start + needle_len] = needle
    tokens[-1] = QUERY_ID
    return SyntheticTask(
        tuple(int(t) for t in tokens),
        (start, start + needle_len),
        tuple(int(t) for t in needle),
        "needle",
    )


def gen_passkey(seed: int, total_len: int, needle_pos_fraction: float, vocab_size: int,
                key_len: int = 5, needle_vocab: int = DEFAULT_NEEDLE_VOCAB,
                chunk_size: int = 32) -> SyntheticTask:
    """Repetitive haystack (a short filler phrase tiled) with a separator-prefixed key."""
    span = key_len + 1
    start = _layout(total_len, needle_pos_fraction, span, 1, chunk_size, vocab_size, needle_vocab)
    rng = np.random.default_rng(seed)
    phrase = rng.integers(FIRST_FILLER, vocab_size - needle_vocab, size=7)
    tokens = np.resize(phrase, total_len)
    key = rng.integers(vocab_size - needle_vocab, vocab_size, size=key_len)
    tokens[start] = SEP_ID
    tokens[start + 1 : start + span] = key
    tokens[-1] = QUERY_ID
    return SyntheticTask(
        tuple(int(t) for t in tokens),
        (start, start + span),
        tuple(int(t) for t in key),
        "passkey",
    )


def gen_copy(seed: int, total_len: int, needle_pos_fraction: float, vocab_size: int,
             needle_len: int = 8, needle_vocab: int = DEFAULT_NEEDLE_VOCAB,
             chunk_size: int = 32) -> SyntheticTask:
    """The prompt ends with the needle's first token; the answer is the rest of it."""
    start = _layout(total_len, needle_pos_fraction, needle_len, 2, chunk_size,
                    vocab_size, needle_vocab)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(FIRST_FILLER, vocab_size - needle_vocab, size=total_len)
    needle = rng.integers(vocab_size - needle_vocab, vocab_size, size=needle_len)
    tokens[start : start + needle_len] = needle
    tokens[-2] = QUERY_ID
    tokens[-1] = needle[0]
    return SyntheticTask(
        tuple(int(t) for t in tokens),
        (start, start + needle_len),
        tuple(int(t) for t in needle[1:]),
        "copy",
    )


_GENERATORS = {"needle": gen_needle, "passkey": gen_passkey, "copy": gen_copy}


def gen_task(kind: TaskKind, seed: int, total_len: int, needle_pos_fraction: float,
             vocab_size: int, **kwargs) -> SyntheticTask:
    try:
        gen = _GENERATORS[kind]
    except KeyError:
        raise ValueError(f"unknown task kind {kind!r}") from None
    return gen(seed, total_len, needle_pos_fraction, vocab_size, **kwargs)


def retention_rate(tasks: Sequence[SyntheticTask], prompts: Sequence) -> float:
    """Fraction of tasks whose whole needle span survived pruning.

    ``prompts`` holds one speculated prompt per task (anything with
    ``kept_position_ids``) or a plain collection of kept indices.
    """
    if len(tasks) != len(prompts):
        raise ValueError(f"{len(tasks)} tasks but {len(prompts)} prompts")
    if not tasks:
        return 0.0
    hits = 0
    for task, prompt in zip(tasks, prompts):
        kept = set(getattr(prompt, "kept_position_ids", prompt))
        start, end = task.needle_span
        hits += all(i in kept for i in range(start, end))
    return hits / len(tasks)
