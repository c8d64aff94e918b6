"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (printed in the pytest terminal summary)
and then asserts, so a failing criterion also fails the suite. Runtime
limits are part of each criterion and are checked alongside the values.
"""

import csv
import math
import time

import numpy as np
import pytest

import oracles
from conftest import random_config
from specprefill.analytic import flops_profile, relative_flops, speedup_upper_bound
from specprefill.bench import parse_grid
from specprefill.cli import run
from specprefill.config import LLAMA_8B, LLAMA_70B, LLAMA_405B, TINY, TOY_BASE, TOY_SPEC
from specprefill.harness import gen_needle, planted_needle_model, retention_rate, successor_model
from specprefill.model import KVCache, decode_step, init_model, prefill
from specprefill.serving import CostModel, default_qps_grid, max_qps, sweep_qps
from specprefill.speculation import (
    SpecConfig,
    compute_token_importance,
    generate,
    generate_with_spec,
    look_ahead,
    restore_position_ids,
    select_chunks,
    speculate_prompt,
)

S32K = 32768


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def test_01_relative_flops(report):
    with Timer() as t:
        r70 = relative_flops(LLAMA_8B, LLAMA_70B, 1, S32K)
        r405 = relative_flops(LLAMA_8B, LLAMA_405B, 1, S32K)
    ok = abs(r70 - 0.1424) <= 0.005 and abs(r405 - 0.0296) <= 0.001 and t.seconds < 1
    report(1, "relative FLOPS", ok,
           f"8B/70B={r70:.4%} (14.24±0.5pp), 8B/405B={r405:.4%} (2.96±0.1pp), {t.seconds:.3f}s")
    assert ok


def test_02_theoretical_speedup(report):
    with Timer() as t:
        r405 = relative_flops(LLAMA_8B, LLAMA_405B, 1, S32K)
        from_table = speedup_upper_bound(0.0296, 0.1)
        from_configs = speedup_upper_bound(r405, 0.1)
    ok = all(abs(s - 7.72) <= 0.05 for s in (from_table, from_configs)) and t.seconds < 1
    report(2, "theoretical speedup", ok,
           f"r=0.0296 -> {from_table:.3f}, r={r405:.4f} -> {from_configs:.3f} (7.72±0.05), "
           f"{t.seconds:.3f}s")
    assert ok


def test_03_position_restoration(report):
    with Timer() as t:
        positions, first = restore_position_ids([0, 1, 3, 6, 7], 10)
        model = init_model(TINY, seed=0)
        cache = KVCache(TINY)
        prefill(model, [20, 21, 23, 26, 27], positions, cache)
        decoded = []
        for step in range(3):
            decode_step(model, 30 + step, first + step, cache)
            decoded.append(first + step)
    ok = (positions == [0, 1, 3, 6, 7] and decoded == [10, 11, 12]
          and cache.slot_to_position() == [0, 1, 3, 6, 7, 10, 11, 12] and t.seconds < 1)
    report(3, "position restoration", ok,
           f"positions={positions}, decode={decoded}, {t.seconds:.3f}s")
    assert ok


def test_04_full_keep_equivalence(report):
    rng = np.random.default_rng(4)
    mismatches = 0
    spec = SpecConfig(keep_rate=1.0, look_ahead_steps=0)
    with Timer() as t:
        for i in range(50):
            model = init_model(random_config(rng), seed=i)
            prompt = rng.integers(1, model.config.vocab_size, size=int(rng.integers(1, 120)))
            prompt = prompt.tolist()
            base = generate(model, prompt, 8, eos_token_id=spec.eos_token_id)
            spec_out = generate_with_spec(model, model, prompt, spec, 8)
            mismatches += base != spec_out
    ok = mismatches == 0 and t.seconds < 30
    report(4, "full-keep equivalence", ok, f"{50 - mismatches}/50 identical, {t.seconds:.1f}s")
    assert ok


def test_05_oracle_equivalence(report):
    rng = np.random.default_rng(5)
    worst_attn = worst_imp = 0.0
    mask_mismatch = 0
    with Timer() as t:
        for i in range(200):
            cfg = random_config(rng, max_layers=4, max_heads=4)
            model = init_model(cfg, seed=1000 + i)
            n = int(rng.integers(0, 5))
            m = int(rng.integers(1, 65 - n))  # keys per row stay within S <= 64
            prompt = rng.integers(0, cfg.vocab_size, size=m).tolist()
            spec = SpecConfig(look_ahead_steps=n, eos_token_id=int(rng.integers(cfg.vocab_size)))
            _, trace = speculate_prompt(model, prompt, spec, return_trace=True)
            ref, valid = oracles.dense_speculator_attention(model, prompt, n, spec.eos_token_id)
            mask_mismatch += not np.array_equal(trace.attention.row_valid, valid)
            worst_attn = max(worst_attn, float(np.abs(trace.attention.scores - ref).max()))
            worst_imp = max(worst_imp, float(np.abs(
                compute_token_importance(trace.attention) - oracles.importance_loop(ref, valid)
            ).max()))
    ok = mask_mismatch == 0 and worst_attn <= 1e-6 and worst_imp <= 1e-6 and t.seconds < 60
    report(5, "oracle equivalence", ok,
           f"200 instances, max |attn err|={worst_attn:.1e}, max |importance err|={worst_imp:.1e}, "
           f"{t.seconds:.1f}s")
    assert ok


def _chunk_set(kept, chunk_size):
    return set((np.asarray(kept) // chunk_size).tolist())


def test_06_selection_laws(report):
    rng = np.random.default_rng(6)
    failures = {"count": 0, "nesting": 0, "ties": 0, "scale": 0}
    with Timer() as t:
        for _ in range(1000):
            m = int(rng.integers(1, 400))
            cs = int(rng.integers(1, 65))
            # half the vectors are coarse integers so equal chunk means (ties) are common
            scores = rng.integers(0, 4, size=m).astype(float) if rng.random() < 0.5 else rng.random(m)
            rates = np.sort(rng.uniform(0.001, 1.0, size=3))
            n_chunks = math.ceil(m / cs)
            previous = set()
            for rate in rates:
                spec = SpecConfig(keep_rate=float(rate), chunk_size=cs)
                kept = select_chunks(scores, spec)
                chunks = _chunk_set(kept, cs)
                failures["count"] += len(chunks) != max(1, math.ceil(rate * n_chunks))
                failures["nesting"] += not previous <= chunks
                previous = chunks
                # repeatable, and no dropped chunk outranks a kept one (ties rank lower index first)
                failures["ties"] += not np.array_equal(kept, select_chunks(scores.copy(), spec))
                means = oracles.chunk_means_loop(scores, cs)
                for dropped in set(range(n_chunks)) - chunks:
                    for k in chunks:
                        if means[dropped] > means[k] or (means[dropped] == means[k] and dropped < k):
                            failures["ties"] += 1
                # power-of-two factors scale every float exactly
                c = 2.0 ** int(rng.integers(-30, 31))
                failures["scale"] += not np.array_equal(kept, select_chunks(scores * c, spec))
    ok = not any(failures.values()) and t.seconds < 10
    report(6, "selection laws", ok,
           f"1000 vectors x 3 rates, violations={failures}, {t.seconds:.1f}s")
    assert ok


def test_07_max_qps_scaling(report):
    cost = CostModel(per_decode_token_seconds=1e-6)  # negligible decode cost
    with Timer() as t:
        base = max_qps(cost, 60.0)
        ratios = {k: max_qps(cost.scaled(1 / k), 60.0) / base for k in (2, 4, 8)}
    ok = all(abs(r / k - 1) <= 0.05 for k, r in ratios.items()) and t.seconds < 60
    detail = ", ".join(f"k={k}: x{r:.3f}" for k, r in ratios.items())
    report(7, "max-QPS scaling", ok, f"base={base:.4f} qps, {detail}, {t.seconds:.1f}s")
    assert ok


def test_08_three_stage_pattern(report):
    cost = CostModel()
    with Timer() as t:
        res = sweep_qps(default_qps_grid(cost), cost, 60.0)
    stages = res.stages
    rank = {"flat": 0, "rising": 1, "timeout": 2}
    ordered = [rank[s] for s in stages] == sorted(rank[s] for s in stages)
    ok = (ordered and set(stages) == set(rank) and res.flat_end is not None
          and res.timeout_start is not None and res.flat_end < res.timeout_start
          and t.seconds < 60)
    first_rising = next((p.qps for p in res.points if p.stage == "rising"), float("nan"))
    report(8, "three-stage pattern", ok,
           f"flat to {res.flat_end:.3f}, rising from {first_rising:.3f}, timeout from "
           f"{res.timeout_start:.3f} qps, {t.seconds:.1f}s")
    assert ok


def test_09_planted_needle_retention(report):
    model = planted_needle_model()
    spec = SpecConfig(keep_rate=0.1)
    with Timer() as t:
        rng = np.random.default_rng(9)
        tasks = [gen_needle(seed, 640, float(rng.random()), 256) for seed in range(100)]
        prompts = [speculate_prompt(model, task.prompt_tokens, spec) for task in tasks]
        rate = retention_rate(tasks, prompts)
    ok = rate == 1.0 and t.seconds < 60
    report(9, "planted-needle retention", ok,
           f"retention={rate:.2f} over 100 tasks, {prompts[0].num_kept}/640 tokens kept, "
           f"{t.seconds:.1f}s")
    assert ok


def test_10_look_ahead_eos_masking(report):
    # greedy chain 5 -> 6 -> 7 -> 8 -> EOS: decode steps 1..3 consume 6, 7, 8 and step 3 emits EOS
    model = successor_model({5: 6, 6: 7, 7: 8, 8: 0}, vocab_size=32)
    spec = SpecConfig(look_ahead_steps=8, eos_token_id=0, chunk_size=4)
    with Timer() as t:
        captured = look_ahead(model, [11, 12, 5], spec)
        _, trace = speculate_prompt(model, [11, 12, 5], spec, return_trace=True)
    valid = captured.row_valid.tolist()
    ok = (len(valid) == 9 and valid == [True] * 4 + [False] * 5
          and trace.attention.num_valid == 4 and t.seconds < 5)
    report(10, "look-ahead EOS masking", ok,
           f"{sum(valid)} valid of {len(valid)} rows, {t.seconds:.3f}s")
    assert ok


def test_11_directional_wall_clock(report, tmp_path):
    grid_text = "1x512,4x512,1x2048"
    ratios = {s: flops_profile(TOY_BASE, 1, s).total / flops_profile(TOY_SPEC, 1, s).total
              for _, s in parse_grid(grid_text)}
    out = tmp_path / "bench.csv"
    with Timer() as t:
        code = run(["bench-ttft", "--base", "preset:toy-base", "--spec", "preset:toy-spec",
                    "--grid", grid_text, "--keep-rate", "0.1", "--repeats", "2",
                    "--out", str(out)])
    rows = list(csv.DictReader(out.open())) if code == 0 else []
    long_rows = [r for r in rows if int(r["seq_len"]) >= 2048]
    ok = (code == 0 and min(ratios.values()) >= 16 and long_rows
          and all(float(r["speedup"]) > 1 for r in long_rows) and t.seconds < 120)
    detail = ", ".join(f"{r['batch']}x{r['seq_len']}: x{float(r['speedup']):.2f}" for r in rows)
    report(11, "directional wall-clock", ok,
           f"FLOPS ratio >= {min(ratios.values()):.1f}, {detail}, {t.seconds:.1f}s")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
