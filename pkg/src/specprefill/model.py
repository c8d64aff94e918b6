"""Minimal Llama-style decoder with explicit position ids.

Pre-norm RMSNorm blocks, rotary embeddings (rotate-half layout), grouped
query attention and a SwiGLU MLP. Weights are stored as float32; every
activation and reduction is carried out in float64.

The forward pass accepts arbitrary strictly increasing position ids, so a
pruned prompt can be prefilled with its original positions and decoding can
resume at the original context length.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .config import ModelConfig
from .errors import CacheCapacityError, ConfigError, PositionError

COMPUTE_DTYPE = np.float64
# Query rows processed per attention block; bounds the score buffer size.
_ATTN_BLOCK = 256


def weight_shapes(config: ModelConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    """Yield ``(name, shape)`` for every weight tensor in canonical order."""
    d, i, v = config.hidden_size, config.intermediate_size, config.vocab_size
    q_dim = config.num_query_heads * config.head_dim
    kv_dim = config.num_kv_heads * config.head_dim
    yield "embed", (v, d)
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        yield p + "attn_norm", (d,)
        yield p + "wq", (d, q_dim)
        yield p + "wk", (d, kv_dim)
        yield p + "wv", (d, kv_dim)
        yield p + "wo", (q_dim, d)
        yield p + "mlp_norm", (d,)
        yield p + "w_gate", (d, i)
        yield p + "w_up", (d, i)
        yield p + "w_down", (i, d)
    yield "final_norm", (d,)
    yield "lm_head", (d, v)


class Model:
    """Immutable weights plus config.

    Args:
        config: architecture hyperparameters.
        weights: mapping from tensor name to array; names and shapes must
            match :func:`weight_shapes` exactly.
    """

    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray]):
        expected = dict(weight_shapes(config))
        missing = expected.keys() - weights.keys()
        extra = weights.keys() - expected.keys()
        if missing or extra:
            raise ConfigError(
                f"weight names mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        stored = {}
        for name, shape in expected.items():
            w = np.array(weights[name], dtype=np.float32, copy=True)
            if w.shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {w.shape}")
            if not np.all(np.isfinite(w)):
                raise ConfigError(f"{name}: contains non-finite values")
            w.flags.writeable = False
            stored[name] = w
        self.config = config
        self.weights = stored
        self._wide = {k: w.astype(COMPUTE_DTYPE) for k, w in stored.items()}

    def wide(self, name: str) -> np.ndarray:
        """Float64 view of a weight used by the forward pass."""
        return self._wide[name]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, _ in weight_shapes(self.config):
            h.update(name.encode())
            h.update(self.weights[name].tobytes())
        return h.hexdigest()

    def __repr__(self):
        return f"Model({self.config})"


def init_model(config: ModelConfig, seed: int) -> Model:
    """Random weights drawn deterministically from ``seed``.

    Norm gains start at one; matrices are Gaussian scaled by 1/sqrt(fan_in).
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError("init_model expects a ModelConfig")
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in weight_shapes(config):
        if len(shape) == 1:
            weights[name] = np.ones(shape, dtype=np.float32)
        elif name == "embed":
            weights[name] = rng.standard_normal(shape, dtype=np.float32)
        else:
            scale = np.float32(1.0 / np.sqrt(shape[0]))
            weights[name] = rng.standard_normal(shape, dtype=np.float32) * scale
    return Model(config, weights)


class KVCache:
    """Per-request key/value store with a slot-to-position map.

    Keys are stored post-RoPE. Slots are filled in order; the position
    stored at each slot is the token's original position id, which may
    skip values when the prompt has been pruned.
    """

    def __init__(self, config: ModelConfig, capacity: int | None = None):
        self.config = config
        self.capacity = int(capacity if capacity is not None else config.max_position)
        if self.capacity <= 0:
            raise ConfigError("cache capacity must be positive")
        shape = (self.capacity, config.num_kv_heads, config.head_dim)
        self.keys = [np.zeros(shape, dtype=COMPUTE_DTYPE) for _ in range(config.num_layers)]
        self.values = [np.zeros(shape, dtype=COMPUTE_DTYPE) for _ in range(config.num_layers)]
        self._positions = np.full(self.capacity, -1, dtype=np.int64)
        self.length = 0

    @property
    def positions(self) -> np.ndarray:
        """Position id of each filled slot, in slot order."""
        return self._positions[: self.length]

    @property
    def max_position(self) -> int:
        return int(self._positions[self.length - 1]) if self.length else -1

    def slot_to_position(self) -> list[int]:
        return self.positions.tolist()


@dataclass
class CapturedQueries:
    """Post-RoPE query vectors of designated tokens.

    Attributes:
        rows: array ``[N_rows, L, H, head_dim]``.
        row_positions: original position id of each row.
        row_valid: boolean mask; invalid rows are ignored downstream.
    """

    rows: np.ndarray
    row_positions: np.ndarray
    row_valid: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=COMPUTE_DTYPE)
        self.row_positions = np.asarray(self.row_positions, dtype=np.int64)
        self.row_valid = np.asarray(self.row_valid, dtype=bool)
        n = self.rows.shape[0]
        if self.rows.ndim != 4 or len(self.row_positions) != n or len(self.row_valid) != n:
            raise ValueError("inconsistent CapturedQueries shapes")

    def __len__(self):
        return self.rows.shape[0]

    @classmethod
    def concat(cls, parts: Sequence["CapturedQueries"]) -> "CapturedQueries":
        return cls(
            np.concatenate([p.rows for p in parts]),
            np.concatenate([p.row_positions for p in parts]),
            np.concatenate([p.row_valid for p in parts]),
        )


@dataclass
class AttentionTensor:
    """Attention of captured rows over the context, ``[N_rows, L, M, H]``."""

    scores: np.ndarray
    row_valid: np.ndarray

    @property
    def num_valid(self) -> int:
        return int(np.count_nonzero(self.row_valid))


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


def rope_tables(positions: np.ndarray, head_dim: int, theta: float):
    """cos/sin tables of shape ``[T, head_dim // 2]`` for the given positions."""
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate ``x`` of shape ``[T, heads, head_dim]``; pairs are (i, i + head_dim/2)."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c, s = cos[:, None, :], sin[:, None, :]
    return np.concatenate([x1 * c - x2 * s, x2 * c + x1 * s], axis=-1)


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _attend(q, keys, values, q_pos, k_pos, group):
    """Causal GQA over cached keys; a key is visible iff its position <= the query's.

    q: [T, H, hd]; keys/values: [S, Hk, hd]. Returns [T, H * hd].
    """
    t, h, hd = q.shape
    hk = keys.shape[1]
    scale = 1.0 / np.sqrt(hd)
    # query head h reads kv head h // group
    qg = q.transpose(1, 0, 2).reshape(hk, group, t, hd)
    kt = keys.transpose(1, 2, 0)[:, None]  # [Hk, 1, hd, S]
    vg = values.transpose(1, 0, 2)[:, None]  # [Hk, 1, S, hd]
    out = np.empty((hk, group, t, hd), dtype=COMPUTE_DTYPE)
    for start in range(0, t, _ATTN_BLOCK):
        stop = min(start + _ATTN_BLOCK, t)
        s = np.matmul(qg[:, :, start:stop], kt) * scale
        hidden = k_pos[None, :] > q_pos[start:stop, None]
        if hidden.any():
            s = np.where(hidden, -np.inf, s)
        out[:, :, start:stop] = np.matmul(softmax(s), vg)
    return out.reshape(h, t, hd).transpose(1, 0, 2).reshape(t, h * hd)


def _check_positions(config, cache, position_ids):
    pos = np.asarray(position_ids, dtype=np.int64)
    if pos.ndim != 1 or len(pos) == 0:
        raise PositionError("need at least one position id")
    if np.any(np.diff(pos) <= 0):
        raise PositionError(f"position ids must be strictly increasing: {pos.tolist()}")
    if pos[0] < 0:
        raise PositionError("position ids must be non-negative")
    if pos[-1] >= config.max_position:
        raise PositionError(
            f"position {int(pos[-1])} exceeds max_position {config.max_position}"
        )
    if pos[0] <= cache.max_position:
        raise PositionError(
            f"position {int(pos[0])} not greater than cached max {cache.max_position}"
        )
    if cache.length + len(pos) > cache.capacity:
        raise CacheCapacityError(
            f"cache holds {cache.length}/{cache.capacity} slots, cannot add {len(pos)}"
        )
    return pos


def _forward(model: Model, token_ids, position_ids, cache: KVCache, capture: bool):
    cfg = model.config
    tokens = np.asarray(token_ids, dtype=np.int64)
    pos = _check_positions(cfg, cache, position_ids)
    if tokens.shape != pos.shape:
        raise ValueError(f"{len(tokens)} tokens but {len(pos)} position ids")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id outside vocabulary")

    t = len(tokens)
    h, hk, hd = cfg.num_query_heads, cfg.num_kv_heads, cfg.head_dim
    start, stop = cache.length, cache.length + t
    cache._positions[start:stop] = pos
    k_pos = cache._positions[:stop]
    cos, sin = rope_tables(pos, hd, cfg.rope_theta)

    x = model.wide("embed")[tokens]
    captured = np.empty((cfg.num_layers, h, hd)) if capture else None
    for layer in range(cfg.num_layers):
        w = lambda n: model.wide(f"layers.{layer}.{n}")  # noqa: E731
        a = rms_norm(x, w("attn_norm"), cfg.norm_eps)
        q = apply_rope((a @ w("wq")).reshape(t, h, hd), cos, sin)
        k = apply_rope((a @ w("wk")).reshape(t, hk, hd), cos, sin)
        cache.keys[layer][start:stop] = k
        cache.values[layer][start:stop] = (a @ w("wv")).reshape(t, hk, hd)
        if capture:
            captured[layer] = q[-1]
        attn = _attend(
            q, cache.keys[layer][:stop], cache.values[layer][:stop], pos, k_pos, cfg.group_size
        )
        x = x + attn @ w("wo")
        m = rms_norm(x, w("mlp_norm"), cfg.norm_eps)
        x = x + (silu(m @ w("w_gate")) * (m @ w("w_up"))) @ w("w_down")
    cache.length = stop

    last = rms_norm(x[-1], model.wide("final_norm"), cfg.norm_eps)
    logits = last @ model.wide("lm_head")
    row = None
    if capture:
        row = CapturedQueries(captured[None], [int(pos[-1])], [True])
    return logits, row


def prefill(
    model: Model,
    token_ids: Sequence[int],
    position_ids: Sequence[int],
    cache: KVCache,
    capture_last: bool = False,
):
    """Run the prompt (or a pruned subset of it) through the model.

    Positions may be non-contiguous; RoPE uses the given ids, not slot
    indices. KV for every token is appended to ``cache``.

    Returns:
        ``(logits, captured)`` where ``logits`` belongs to the final token and
        ``captured`` holds its queries when ``capture_last`` is set, else None.
    """
    return _forward(model, token_ids, position_ids, cache, capture_last)


def decode_step(model: Model, token_id: int, position_id: int, cache: KVCache,
                capture: bool = False):
    """Single-token forward at ``position_id``, which must exceed every cached position."""
    return _forward(model, [int(token_id)], [int(position_id)], cache, capture)


def greedy_token(logits: np.ndarray) -> int:
    """Argmax; ties go to the lowest token id."""
    return int(np.argmax(logits))


def attention_scores(captured: CapturedQueries, cache: KVCache, context_len: int) -> AttentionTensor:
    """Softmax attention of each captured row, sliced to the first ``context_len`` slots.

    Each row attends over every cached key whose position does not exceed
    its own. The softmax is normalized over that full visible set and the
    context entries are then sliced out without renormalization, so a
    look-ahead row's slice sums to at most one.
    """
    cfg = cache.config
    m = int(context_len)
    if m <= 0 or m > cache.length:
        raise ValueError(f"context length {m} outside cached range [1, {cache.length}]")
    n = len(captured)
    out = np.zeros((n, cfg.num_layers, m, cfg.num_query_heads), dtype=COMPUTE_DTYPE)
    key_pos = cache.positions
    ctx_max = int(key_pos[m - 1])
    scale = 1.0 / np.sqrt(cfg.head_dim)
    for j in range(n):
        if not captured.row_valid[j]:
            continue
        row_pos = int(captured.row_positions[j])
        if row_pos < ctx_max:
            raise ValueError(f"captured row at position {row_pos} precedes the context end")
        visible = key_pos <= row_pos
        for layer in range(cfg.num_layers):
            keys = cache.keys[layer][: cache.length][visible]  # [S, Hk, hd]
            keys = np.repeat(keys, cfg.group_size, axis=1)  # [S, H, hd]
            q = captured.rows[j, layer]  # [H, hd]
            s = np.einsum("hd,shd->hs", q, keys) * scale
            probs = softmax(s)
            out[j, layer] = probs[:, :m].T
    return AttentionTensor(out, captured.row_valid.copy())
