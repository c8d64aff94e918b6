import numpy as np
import pytest

import oracles
from conftest import random_config
from specprefill.config import TINY, ModelConfig
from specprefill.errors import CacheCapacityError, ConfigError, PositionError
from specprefill.model import (
    CapturedQueries,
    KVCache,
    Model,
    attention_scores,
    decode_step,
    greedy_token,
    init_model,
    prefill,
    weight_shapes,
)

# sha256 over all tensors of init_model(TINY, seed=7), frozen on first run
TINY_SEED7_CHECKSUM = "15ded24957eead35cea48c4841d80f4e2d808a6b7d16a540896a3d2761958e58"


def test_init_shapes_follow_config(tiny_model):
    assert tiny_model.weights["embed"].shape == (256, 32)
    assert tiny_model.weights["lm_head"].shape == (32, 256)
    for name, shape in weight_shapes(TINY):
        assert tiny_model.weights[name].shape == shape
        assert tiny_model.weights[name].dtype == np.float32


def test_init_is_deterministic():
    a, b = init_model(TINY, 7), init_model(TINY, 7)
    assert a.checksum() == b.checksum() == TINY_SEED7_CHECKSUM
    assert init_model(TINY, 8).checksum() != a.checksum()


def test_non_divisible_dims_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(num_layers=1, hidden_size=30, intermediate_size=8, num_query_heads=4,
                    num_kv_heads=2, vocab_size=16)
    with pytest.raises(ConfigError):
        ModelConfig(num_layers=1, hidden_size=32, intermediate_size=8, num_query_heads=4,
                    num_kv_heads=3, vocab_size=16)


def test_weights_are_immutable(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.weights["embed"][0, 0] = 1.0


def test_non_finite_weights_rejected(tiny_model):
    w = dict(tiny_model.weights)
    bad = w["lm_head"].copy()
    bad[0, 0] = np.nan
    w["lm_head"] = bad
    with pytest.raises(ConfigError):
        Model(TINY, w)


def test_prefill_matches_sequential_decode(tiny_model):
    tokens = [17, 3, 99, 250, 4, 4, 61, 7, 128, 200]
    c1 = KVCache(TINY)
    full, _ = prefill(tiny_model, tokens, range(10), c1)
    c2 = KVCache(TINY)
    for pos, tok in enumerate(tokens):
        step, _ = decode_step(tiny_model, tok, pos, c2)
    np.testing.assert_allclose(step, full, rtol=1e-5, atol=1e-9)


def test_prefill_matches_dense_oracle(tiny_model):
    tokens = [5, 6, 7, 8, 9, 200]
    positions = [0, 2, 3, 7, 8, 11]
    logits, _ = prefill(tiny_model, tokens, positions, KVCache(TINY))
    ref, _ = oracles.dense_forward(tiny_model, tokens, positions)
    np.testing.assert_allclose(logits, ref[-1], atol=1e-9)


def test_cache_slot_map_keeps_original_positions(tiny_model):
    cache = KVCache(TINY)
    prefill(tiny_model, [10, 11, 13, 16, 17], [0, 1, 3, 6, 7], cache)
    assert cache.slot_to_position() == [0, 1, 3, 6, 7]
    assert cache.length == 5


@pytest.mark.parametrize("positions", [[0, 2, 1], [0, 0, 1], [-1, 0, 1], [0, 1, 2048]])
def test_bad_positions_rejected(tiny_model, positions):
    with pytest.raises(PositionError):
        prefill(tiny_model, [1, 2, 3], positions, KVCache(TINY))


def test_length_mismatch_rejected(tiny_model):
    with pytest.raises((PositionError, ValueError)):
        prefill(tiny_model, [1, 2, 3], [0, 1], KVCache(TINY))


def test_capacity_exceeded(tiny_model):
    with pytest.raises(CacheCapacityError):
        prefill(tiny_model, [1, 2, 3], [0, 1, 2], KVCache(TINY, capacity=2))


def test_decode_after_sparse_prefill(tiny_model):
    cache = KVCache(TINY)
    prefill(tiny_model, [10, 11, 13, 16, 17], [0, 1, 3, 6, 7], cache)
    for pos in (10, 11, 12):
        decode_step(tiny_model, 42, pos, cache)
    assert cache.slot_to_position() == [0, 1, 3, 6, 7, 10, 11, 12]


def test_decode_must_exceed_cache_max(tiny_model):
    cache = KVCache(TINY)
    prefill(tiny_model, [10, 11, 13, 16, 17], [0, 1, 3, 6, 7], cache)
    with pytest.raises(PositionError):
        decode_step(tiny_model, 42, 7, cache)
    assert cache.length == 5  # rejected step leaves the cache untouched


def test_greedy_chain_deterministic(tiny_model):
    def chain():
        cache = KVCache(TINY)
        logits, _ = prefill(tiny_model, [1, 2, 3, 4], range(4), cache)
        out = []
        for pos in range(4, 7):
            tok = greedy_token(logits)
            out.append(tok)
            logits, _ = decode_step(tiny_model, tok, pos, cache)
        return out

    assert chain() == chain()


def test_greedy_tie_breaks_low():
    assert greedy_token(np.array([0.0, 3.0, 3.0, 1.0])) == 1


def test_position_shift_changes_logits(tiny_model):
    tokens = [9, 8, 7, 6, 5]
    a, _ = prefill(tiny_model, tokens, [0, 1, 2, 3, 4], KVCache(TINY))
    b, _ = prefill(tiny_model, tokens, [0, 1, 2, 3, 9], KVCache(TINY))
    assert not np.allclose(a, b)


def test_relative_rope_invariance(tiny_model):
    # RoPE depends on position differences only: a uniform shift preserves logits
    tokens = [9, 8, 7, 6, 5]
    a, _ = prefill(tiny_model, tokens, [0, 1, 2, 3, 4], KVCache(TINY))
    b, _ = prefill(tiny_model, tokens, [100, 101, 102, 103, 104], KVCache(TINY))
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_independent_sequences_do_not_interact(tiny_model):
    seqs = [[1, 2, 3], [40, 50, 60, 70], [200]]
    alone = [prefill(tiny_model, s, range(len(s)), KVCache(TINY))[0] for s in seqs]
    reordered = [prefill(tiny_model, s, range(len(s)), KVCache(TINY))[0] for s in reversed(seqs)]
    for x, y in zip(alone, reversed(reordered)):
        np.testing.assert_array_equal(x, y)


def test_capture_shapes(tiny_model):
    cache = KVCache(TINY)
    _, row = prefill(tiny_model, [1, 2, 3], range(3), cache, capture_last=True)
    assert row.rows.shape == (1, TINY.num_layers, TINY.num_query_heads, TINY.head_dim)
    assert row.row_positions.tolist() == [2]
    _, none = prefill(tiny_model, [4], [3], cache)
    assert none is None


def test_attention_slice_sums(tiny_model):
    m = 12
    cache = KVCache(TINY)
    logits, row0 = prefill(tiny_model, list(range(20, 20 + m)), range(m), cache, capture_last=True)
    rows = [row0]
    for step in (1, 2):
        logits, r = decode_step(tiny_model, greedy_token(logits), m - 1 + step, cache, capture=True)
        rows.append(r)
    attn = attention_scores(CapturedQueries.concat(rows), cache, m)
    assert attn.scores.shape == (3, TINY.num_layers, m, TINY.num_query_heads)
    sums = attn.scores.sum(axis=2)
    np.testing.assert_allclose(sums[0], 1.0, atol=1e-12)
    assert np.all(sums[2] <= 1.0 + 1e-12)
    assert np.all(sums[2] < 1.0)


def test_attention_invalid_rows_zero(tiny_model):
    cache = KVCache(TINY)
    _, row = prefill(tiny_model, [1, 2, 3, 4], range(4), cache, capture_last=True)
    row.row_valid[:] = False
    attn = attention_scores(row, cache, 4)
    assert attn.num_valid == 0
    assert not attn.scores.any()


def test_attention_context_out_of_range(tiny_model):
    cache = KVCache(TINY)
    _, row = prefill(tiny_model, [1, 2, 3], range(3), cache, capture_last=True)
    with pytest.raises(ValueError):
        attention_scores(row, cache, 4)
    with pytest.raises(ValueError):
        attention_scores(row, cache, 0)


def _hand_model():
    """1 layer, 1 head, head_dim 2, rotation-free positions via tiny theta steps."""
    cfg = ModelConfig(num_layers=1, hidden_size=2, intermediate_size=2, num_query_heads=1,
                      num_kv_heads=1, vocab_size=3)
    w = {name: np.zeros(shape, np.float32) for name, shape in weight_shapes(cfg)}
    for name, shape in weight_shapes(cfg):
        if len(shape) == 1:
            w[name] = np.ones(shape, np.float32)
    w["embed"] = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], np.float32)
    w["layers.0.wq"] = np.array([[2.0, 0.0], [0.0, 1.0]], np.float32)
    w["layers.0.wk"] = np.array([[1.0, 0.5], [-0.5, 1.0]], np.float32)
    w["layers.0.wv"] = np.eye(2, dtype=np.float32)
    return Model(cfg, w)


def test_hand_set_model_matches_dense_oracle():
    model = _hand_model()
    tokens = [0, 1, 2]
    cache = KVCache(model.config)
    _, row = prefill(model, tokens, range(3), cache, capture_last=True)
    attn = attention_scores(row, cache, 3)
    _, probs = oracles.dense_forward(model, tokens, [0, 1, 2])
    np.testing.assert_allclose(attn.scores[0, 0, :, 0], probs[0][0][2], atol=1e-6)


def test_random_models_match_dense_oracle():
    rng = np.random.default_rng(99)
    for trial in range(10):
        cfg = random_config(rng)
        model = init_model(cfg, seed=trial)
        m = int(rng.integers(2, 24))
        tokens = rng.integers(0, cfg.vocab_size, size=m).tolist()
        positions = np.sort(rng.choice(64, size=m, replace=False)).tolist()
        logits, _ = prefill(model, tokens, positions, KVCache(cfg))
        ref, _ = oracles.dense_forward(model, tokens, positions)
        np.testing.assert_allclose(logits, ref[-1], atol=1e-8)
