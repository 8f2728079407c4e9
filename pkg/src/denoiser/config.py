"""
DiT architecture configuration
"""
from dataclasses import asdict, dataclass
from enum import Enum

from src.errors import ConfigError


class Stem(str, Enum):
    CNN2D = "cnn2d"
    LINEAR = "linear"


class PosEmbedding(str, Enum):
    LEARNED = "learned"
    ROPE = "rope"


@dataclass
class DiTConfig:
    """
    Defaults are the full-scale model: dim 320, depth 6, 8 heads of width 48,
    MLP ratio 5, dropout 0.02, 5×4 CNN stem with learned positions.
    """
    dim: int = 320
    depth: int = 6
    heads: int = 8
    dim_head: int = 48
    mlp_ratio: float = 5.0
    dropout: float = 0.02
    stem: Stem = Stem.CNN2D
    pos_embedding: PosEmbedding = PosEmbedding.LEARNED
    kernel: tuple = (5, 4)
    seq_len: int = 200
    num_cells: int = 4
    time_embed_dim: int = 32
    rope_base: float = 10000.0

    def __post_init__(self):
        self.stem = Stem(self.stem)
        self.pos_embedding = PosEmbedding(self.pos_embedding)
        self.kernel = tuple(self.kernel)

    @property
    def inner_dim(self) -> int:
        return self.heads * self.dim_head

    @property
    def mlp_hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)

    def validate(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got: {self.depth}")
        for name in ("dim", "heads", "dim_head", "seq_len", "num_cells", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got: {getattr(self, name)}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got: {self.mlp_ratio}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got: {self.dropout}")
        if self.time_embed_dim % 2:
            raise ConfigError(f"time_embed_dim must be even, got: {self.time_embed_dim}")
        if self.stem == Stem.CNN2D:
            if self.pos_embedding != PosEmbedding.LEARNED:
                raise ConfigError("the cnn2d stem is paired with learned positional embeddings")
            kh, kw = self.kernel
            if kw != 4 or kh % 2 == 0:
                raise ConfigError(f"cnn2d kernel must span the 4 bases with an odd position width, got: {self.kernel}")
        if self.pos_embedding == PosEmbedding.ROPE and self.dim_head % 2:
            raise ConfigError(f"RoPE needs an even dim_head, got: {self.dim_head}")
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["stem"] = self.stem.value
        out["pos_embedding"] = self.pos_embedding.value
        out["kernel"] = list(self.kernel)
        return out
