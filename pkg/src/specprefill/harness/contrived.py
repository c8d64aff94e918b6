"""Hand-built models with known attention and greedy behaviour.

These are test fixtures in model form: their weights are set so that the
quantity under test (where the attention peaks, which token greedy decoding
emits) is known in closed form.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from ..config import ModelConfig
from ..model import Model, weight_shapes
from .tasks import DEFAULT_NEEDLE_VOCAB


def _zeros(config: ModelConfig) -> dict[str, np.ndarray]:
    w = {}
    for name, shape in weight_shapes(config):
        w[name] = np.ones(shape, np.float32) if len(shape) == 1 else np.zeros(shape, np.float32)
    return w


def planted_needle_model(vocab_size: int = 256, needle_vocab: int = DEFAULT_NEEDLE_VOCAB,
                         score: float = 12.0, hidden_size: int = 64,
                         max_position: int = 16384) -> Model:
    """One-layer, one-head model whose every query attends to needle tokens.

    Residual dims: 0 is a constant bias carried by every token, 1 flags
    needle-vocabulary tokens, and ``2 .. 2 + needle_vocab`` one-hot encode
    the needle token's identity. The query reads the bias and the key reads
    the flag, both through the slowest-rotating RoPE pair (rope_theta is huge,
    so rotation is negligible): a needle key scores ``score`` against any
    query, everything else scores 0. Values carry the identity one-hot and
    the LM head maps it back to needle ids, so the greedy output is the
    most-attended needle token.
    """
    if hidden_size < needle_vocab + 2:
        raise ValueError("hidden_size too small for the needle identity dims")
    cfg = ModelConfig(
        num_layers=1,
        hidden_size=hidden_size,
        intermediate_size=8,
        num_query_heads=1,
        num_kv_heads=1,
        vocab_size=vocab_size,
        rope_theta=1e12,
        max_position=max_position,
    )
    w = _zeros(cfg)
    first = vocab_size - needle_vocab
    emb = w["embed"]
    emb[:, 0] = 1.0
    emb[first:, 1] = 1.0
    emb[np.arange(first, vocab_size), 2 + np.arange(needle_vocab)] = 1.0

    d = hidden_size
    slow = d // 2 - 1  # first half of the last rotary pair
    # after RMSNorm: bias-only tokens carry sqrt(d) in dim 0, needle tokens sqrt(d/3) in dim 1
    gain = math.sqrt(score * math.sqrt(d) / (math.sqrt(d) * math.sqrt(d / 3)))
    w["layers.0.wq"][0, slow] = gain
    w["layers.0.wk"][1, slow] = gain
    ident = np.arange(needle_vocab)
    w["layers.0.wv"][2 + ident, ident] = 1.0
    w["layers.0.wo"][ident, 2 + ident] = 4.0
    w["lm_head"][2 + ident, first + ident] = 1.0
    return Model(cfg, w)


def successor_model(successor: Mapping[int, int], vocab_size: int = 32, seed: int = 0,
                    max_position: int = 1024) -> Model:
    """Greedy decoding follows ``successor``: the token after ``t`` is ``successor[t]``.

    Tokens without an entry map to themselves. Attention projections are
    random (so captured queries and attention scores are non-trivial) but the
    output projection is zero, leaving the residual stream a one-hot of the
    current token.
    """
    cfg = ModelConfig(
        num_layers=1,
        hidden_size=vocab_size,
        intermediate_size=8,
        num_query_heads=2,
        num_kv_heads=1,
        vocab_size=vocab_size,
        max_position=max_position,
    )
    w = _zeros(cfg)
    rng = np.random.default_rng(seed)
    for name in ("layers.0.wq", "layers.0.wk", "layers.0.wv"):
        w[name] = rng.standard_normal(w[name].shape).astype(np.float32)
    w["embed"][:] = np.eye(vocab_size, dtype=np.float32)
    for t in range(vocab_size):
        w["lm_head"][t, int(successor.get(t, t))] = 1.0
    return Model(cfg, w)
