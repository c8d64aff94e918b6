"""Closed-form prefill cost model for Llama-style decoders.

Counts are multiply-accumulates (every matmul treated as FMA); norms, RoPE
and elementwise work are ignored. Per layer::

    MLP            3 B S D I
    QKVO           B S D^2 (2 + 2 H'/H)
    self-attention 2 B S^2 D
    LM head        B S D V          (once, not per layer)

All counts are exact Python integers: ``D * 2H'/H == 2 H' head_dim``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

from .config import ModelConfig
from .errors import ConfigError


@dataclass(frozen=True)
class FlopsProfile:
    mlp: int
    qkvo: int
    self_attention: int
    lm_head: int

    @property
    def total(self) -> int:
        return self.mlp + self.qkvo + self.self_attention + self.lm_head

    def as_dict(self) -> dict:
        return {
            "mlp": self.mlp,
            "qkvo": self.qkvo,
            "self_attention": self.self_attention,
            "lm_head": self.lm_head,
            "total": self.total,
        }


def flops_profile(config: ModelConfig, batch: int, seq_len: int) -> FlopsProfile:
    """Prefill MACs for ``batch`` sequences of ``seq_len`` tokens, summed over layers."""
    if batch < 1 or seq_len < 1:
        raise ConfigError("batch and seq_len must be >= 1")
    b, s = int(batch), int(seq_len)
    L, d, i, v = config.num_layers, config.hidden_size, config.intermediate_size, config.vocab_size
    bsd = b * s * d
    return FlopsProfile(
        mlp=L * 3 * bsd * i,
        qkvo=L * bsd * (2 * d + 2 * config.num_kv_heads * config.head_dim),
        self_attention=L * 2 * bsd * s,
        lm_head=bsd * v,
    )


def relative_flops(spec_config: ModelConfig, base_config: ModelConfig,
                   batch: int, seq_len: int) -> float:
    """Speculator-to-base cost ratio at the same batch and sequence length."""
    return flops_profile(spec_config, batch, seq_len).total / flops_profile(
        base_config, batch, seq_len
    ).total


def _check(r, alpha):
    if not 0 < alpha <= 1:
        raise ConfigError(f"keep rate must be in (0, 1], got {alpha!r}")
    if not r > 0:
        raise ConfigError(f"FLOPS ratio must be positive, got {r!r}")


def overhead(r: float, alpha: float) -> float:
    """Share of total prefill compute spent in the speculator: r / (r + alpha)."""
    _check(r, alpha)
    return r / (r + alpha)


def speedup_upper_bound(r: float, alpha: float) -> float:
    """Ideal TTFT speedup when base cost is linear in kept tokens: 1 / (r + alpha)."""
    _check(r, alpha)
    return 1 / (r + alpha)


def speedup_from_configs(spec_config: ModelConfig, base_config: ModelConfig, batch: int,
                         seq_len: int, alpha: float,
                         mode: Literal["linear", "quadratic"] = "linear") -> float:
    """TTFT speedup bound from two configs.

    ``linear`` scales the full-length base cost by ``alpha``. ``quadratic``
    re-evaluates the base cost at ``ceil(alpha * seq_len)`` tokens so the
    attention term shrinks quadratically; it is the more optimistic variant.
    """
    if mode == "linear":
        return speedup_upper_bound(relative_flops(spec_config, base_config, batch, seq_len), alpha)
    if mode != "quadratic":
        raise ConfigError(f"unknown speedup mode {mode!r}")
    _check(1.0, alpha)
    base_full = flops_profile(base_config, batch, seq_len).total
    kept = max(1, math.ceil(round(alpha * seq_len, 9)))
    cost = flops_profile(spec_config, batch, seq_len).total + flops_profile(
        base_config, batch, kept
    ).total
    return base_full / cost
