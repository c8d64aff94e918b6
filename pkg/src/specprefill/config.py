"""Architecture hyperparameters and named presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of a Llama-style decoder.

    The symbols used by the FLOPS model map onto fields as
    L=num_layers, D=hidden_size, I=intermediate_size, H=num_query_heads,
    H'=num_kv_heads, V=vocab_size.
    """

    num_layers: int
    hidden_size: int
    intermediate_size: int
    num_query_heads: int
    num_kv_heads: int
    vocab_size: int
    rope_theta: float = 10000.0
    max_position: int = 4096
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in (
            "num_layers",
            "hidden_size",
            "intermediate_size",
            "num_query_heads",
            "num_kv_heads",
            "vocab_size",
            "max_position",
        ):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not self.rope_theta > 0:
            raise ConfigError(f"rope_theta must be positive, got {self.rope_theta!r}")
        if not self.norm_eps > 0:
            raise ConfigError(f"norm_eps must be positive, got {self.norm_eps!r}")
        if self.hidden_size % self.num_query_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_query_heads {self.num_query_heads}"
            )
        if self.num_query_heads % self.num_kv_heads:
            raise ConfigError(
                f"num_query_heads {self.num_query_heads} not divisible by "
                f"num_kv_heads {self.num_kv_heads}"
            )
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even for RoPE, got {self.head_dim}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_query_heads

    @property
    def group_size(self) -> int:
        """Query heads sharing one KV head."""
        return self.num_query_heads // self.num_kv_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# Published Llama 3.1 architecture constants.
LLAMA_8B = ModelConfig(
    num_layers=32,
    hidden_size=4096,
    intermediate_size=14336,
    num_query_heads=32,
    num_kv_heads=8,
    vocab_size=128256,
    rope_theta=500000.0,
    max_position=131072,
)
LLAMA_70B = ModelConfig(
    num_layers=80,
    hidden_size=8192,
    intermediate_size=28672,
    num_query_heads=64,
    num_kv_heads=8,
    vocab_size=128256,
    rope_theta=500000.0,
    max_position=131072,
)
LLAMA_405B = ModelConfig(
    num_layers=126,
    hidden_size=16384,
    intermediate_size=53248,
    num_query_heads=128,
    num_kv_heads=8,
    vocab_size=128256,
    rope_theta=500000.0,
    max_position=131072,
)

# Desk-scale pair; the base costs >16x the speculator at every sequence length.
TOY_SPEC = ModelConfig(
    num_layers=1,
    hidden_size=64,
    intermediate_size=128,
    num_query_heads=4,
    num_kv_heads=2,
    vocab_size=256,
    max_position=16384,
)
TOY_BASE = ModelConfig(
    num_layers=4,
    hidden_size=256,
    intermediate_size=1024,
    num_query_heads=8,
    num_kv_heads=4,
    vocab_size=256,
    max_position=16384,
)
TINY = ModelConfig(
    num_layers=2,
    hidden_size=32,
    intermediate_size=64,
    num_query_heads=4,
    num_kv_heads=2,
    vocab_size=256,
    max_position=2048,
)

PRESETS = {
    "llama8b": LLAMA_8B,
    "llama70b": LLAMA_70B,
    "llama405b": LLAMA_405B,
    "toy-spec": TOY_SPEC,
    "toy-base": TOY_BASE,
    "tiny": TINY,
}


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}"
        ) from None
