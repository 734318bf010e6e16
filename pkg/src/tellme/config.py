from __future__ import annotations

from dataclasses import asdict, dataclass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    head_dim: int = 16
    ffn: int = 128
    vocab: int = 256
    capacity: int = 1024
    group_size: int = 3
    tables: int = 32
    q_lanes: int = 16
    parallelism: int = 4
    norm_eps: float = 1e-5
    rope_theta: float = 10000.0

    def __post_init__(self):
        counts = {k: v for k, v in asdict(self).items() if isinstance(v, int)}
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.hidden != self.heads * self.head_dim:
            raise ConfigError(f"hidden ({self.hidden}) != heads*head_dim ({self.heads}*{self.head_dim})")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for RoPE")
        if not self.norm_eps > 0:
            raise ConfigError("norm_eps must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)
