"""
Diffusion Transformer denoiser with AdaLN-Zero conditioning on (timestep, cell)
"""
import json
import logging

import numpy as np

from src.denoiser.config import DiTConfig, PosEmbedding, Stem
from src.errors import ContractError, DimensionError, ParseError
from src.tensor import functional as F
from src.tensor.checkpoint import atomic_write, load_arrays, save_arrays
from src.tensor.tensor import Tensor

logger = logging.getLogger(__name__)


class DenoiserParams:
    """
    Named learnable tensors of one DiT, plus the config that shaped them.

    config DiTConfig: architecture
    tensors dict[str, Tensor]: parameters in creation order
    """

    def __init__(self, config: DiTConfig, tensors: dict):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def to_arrays(self) -> dict:
        return {name: t.data for name, t in self.tensors.items()}

    def copy(self, requires_grad: bool = True, dtype=None) -> "DenoiserParams":
        dtype = dtype or self.dtype
        return DenoiserParams(self.config, {
            name: Tensor(t.data.astype(dtype, copy=True), requires_grad=requires_grad)
            for name, t in self.tensors.items()
        })

    @classmethod
    def from_arrays(cls, config: DiTConfig, arrays: dict, dtype=np.float32) -> "DenoiserParams":
        reference = init(config, seed=0, dtype=dtype)
        missing = [name for name in reference.tensors if name not in arrays]
        if missing:
            raise ParseError(f"checkpoint is missing parameters: {missing[:5]}")
        tensors = {}
        for name, ref in reference.items():
            array = np.asarray(arrays[name], dtype=dtype)
            if array.shape != ref.shape:
                raise DimensionError(f"parameter {name}: checkpoint shape {array.shape}, model shape {ref.shape}")
            tensors[name] = Tensor(array.copy(), requires_grad=True)
        return cls(config, tensors)

    def save(self, path: str, sidecar: dict = None, extra_arrays: dict = None):
        """
        Write the RGDF container and the `<path>.json` sidecar. The sidecar
        always carries the model config under "model".
        """
        arrays = dict(self.to_arrays())
        arrays.update(extra_arrays or {})
        save_arrays(path, arrays)
        meta = dict(sidecar or {})
        meta["model"] = self.config.to_dict()
        atomic_write(path + ".json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode("utf-8"))
        logger.debug("Saved %d parameters to %s", self.count(), path)

    @classmethod
    def load(cls, path: str, dtype=np.float32):
        """Returns (params, sidecar dict, all arrays of the container)."""
        with open(path + ".json", "r", encoding="utf-8") as handle:
            meta = json.load(handle)
        config = DiTConfig(**meta["model"]).validate()
        arrays = load_arrays(path)
        return cls.from_arrays(config, arrays, dtype=dtype), meta, arrays


def _xavier(rng, fan_in: int, fan_out: int, shape, dtype):
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape).astype(dtype)


def init(config: DiTConfig, seed: int, dtype=np.float32) -> DenoiserParams:
    """
    Fresh parameters: Xavier-normal weights, zero biases, N(0, 0.02) tables,
    and exactly-zero AdaLN modulation layers and output projection.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    d, inner, hidden = config.dim, config.inner_dim, config.mlp_hidden
    arrays = {}

    def linear(name, fan_in, fan_out, zero=False):
        w = np.zeros((fan_in, fan_out), dtype=dtype) if zero else _xavier(rng, fan_in, fan_out, (fan_in, fan_out), dtype)
        arrays[f"{name}.w"] = w
        arrays[f"{name}.b"] = np.zeros(fan_out, dtype=dtype)

    if config.stem == Stem.CNN2D:
        kh, kw = config.kernel
        arrays["stem.kernel"] = _xavier(rng, kh * kw, d, (d, 1, kh, kw), dtype)
        arrays["stem.b"] = np.zeros(d, dtype=dtype)
    else:
        linear("stem", 4, d)
    if config.pos_embedding == PosEmbedding.LEARNED:
        arrays["pos.table"] = rng.normal(0.0, 0.02, size=(config.seq_len, d)).astype(dtype)

    arrays["time.freqs"] = rng.normal(0.0, 1.0, size=config.time_embed_dim // 2).astype(dtype)
    linear("time.fc1", config.time_embed_dim, d)
    linear("time.fc2", d, d)
    # last row is the null (unconditional) class
    arrays["cell.table"] = rng.normal(0.0, 0.02, size=(config.num_cells + 1, d)).astype(dtype)

    for i in range(config.depth):
        linear(f"block{i}.ada", d, 6 * d, zero=True)
        linear(f"block{i}.qkv", d, 3 * inner)
        linear(f"block{i}.attn_out", inner, d)
        linear(f"block{i}.mlp1", d, hidden)
        linear(f"block{i}.mlp2", hidden, d)

    linear("final.ada", d, 2 * d, zero=True)
    linear("final.out", d, 4, zero=True)
    return DenoiserParams(config, {name: Tensor(a, requires_grad=True) for name, a in arrays.items()})


def _dense(params, name, x):
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def _modulate(x, shift, scale):
    return x * (1.0 + scale) + shift


def time_embedding(params: DenoiserParams, t: np.ndarray) -> Tensor:
    """Learned-sinusoidal features of t followed by a 2-layer SiLU MLP."""
    freqs = params["time.freqs"]
    phase = Tensor(2.0 * np.pi * t.reshape(-1, 1).astype(params.dtype)) * freqs.reshape(1, -1)
    features = F.concat([F.sin(phase), F.cos(phase)], axis=-1)
    return _dense(params, "time.fc2", F.silu(_dense(params, "time.fc1", features)))


def _attention(params, i, h, rope_positions):
    cfg = params.config
    b, length, _ = h.shape
    qkv = _dense(params, f"block{i}.qkv", h).reshape(b, length, 3, cfg.heads, cfg.dim_head)
    qkv = qkv.transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    if rope_positions is not None:
        q = F.rope(q, rope_positions, cfg.rope_base)
        k = F.rope(k, rope_positions, cfg.rope_base)
    out = F.softmax_attention(q, k, v).transpose(0, 2, 1, 3).reshape(b, length, cfg.inner_dim)
    return _dense(params, f"block{i}.attn_out", out)


def _block(params, i, h, cond, train_mode, rng, rope_positions):
    cfg = params.config
    b, d = h.shape[0], cfg.dim
    mod = _dense(params, f"block{i}.ada", cond)
    shift1, scale1, gate1, shift2, scale2, gate2 = [mod[:, k * d:(k + 1) * d].reshape(b, 1, d) for k in range(6)]

    a = _attention(params, i, _modulate(F.layer_norm(h), shift1, scale1), rope_positions)
    h = h + gate1 * F.dropout(a, cfg.dropout, rng, train_mode)

    m = F.gelu(_dense(params, f"block{i}.mlp1", _modulate(F.layer_norm(h), shift2, scale2)))
    m = _dense(params, f"block{i}.mlp2", F.dropout(m, cfg.dropout, rng, train_mode))
    return h + gate2 * m


def _stem(params, x):
    cfg = params.config
    b, _, length = x.shape
    if cfg.stem == Stem.CNN2D:
        kh, _ = cfg.kernel
        # positions on the H axis, bases on the W axis: one token per position
        image = x.transpose(0, 2, 1).reshape(b, 1, length, 4)
        h = F.conv2d(image, params["stem.kernel"], padding=(kh // 2, 0))
        h = h.reshape(b, cfg.dim, length).transpose(0, 2, 1) + params["stem.b"]
        return F.gelu(h)
    return _dense(params, "stem", x.transpose(0, 2, 1))


def _forward(params: DenoiserParams, x_t, t, cell, train_mode: bool, rng):
    cfg = params.config
    x = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (4, cfg.seq_len):
        raise DimensionError(f"denoiser expects 4×{cfg.seq_len} inputs, got shape {np.shape(x_t)}")
    if train_mode and cfg.dropout > 0 and rng is None:
        raise ContractError("train_mode forward needs an rng for dropout")
    batch = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
    cells = np.broadcast_to(np.asarray(cell, dtype=np.int64), (batch,))
    if np.any(cells < 0) or np.any(cells > cfg.num_cells):
        raise ContractError(f"cell ids {cells.tolist()} outside [0, {cfg.num_cells}]")

    h = _stem(params, Tensor(x.astype(params.dtype)))
    rope_positions = None
    if cfg.pos_embedding == PosEmbedding.LEARNED:
        h = h + params["pos.table"]
    else:
        rope_positions = np.arange(cfg.seq_len)

    cond = F.silu(time_embedding(params, t) + F.embedding(params["cell.table"], cells))
    for i in range(cfg.depth):
        h = _block(params, i, h, cond, train_mode, rng, rope_positions)

    mod = _dense(params, "final.ada", cond)
    shift, scale = mod[:, :cfg.dim].reshape(batch, 1, cfg.dim), mod[:, cfg.dim:].reshape(batch, 1, cfg.dim)
    out = _dense(params, "final.out", _modulate(F.layer_norm(h), shift, scale)).transpose(0, 2, 1)
    return out[0] if single else out


def forward(params: DenoiserParams, x_t, t, cell, train_mode: bool = False, rng=None) -> Tensor:
    """
    Predict the noise in x_t.

    params DenoiserParams: weights (either stem variant)
    x_t np.ndarray | Tensor: 4×L sample or B×4×L batch
    t int | np.ndarray: timestep(s)
    cell int | np.ndarray: cell id(s); the null id selects the unconditional branch
    train_mode bool: enables dropout, which then draws from `rng`
    """
    return _forward(params, x_t, t, cell, train_mode, rng)


def forward_ablation(params: DenoiserParams, x_t, t, cell, train_mode: bool = False, rng=None) -> Tensor:
    """
    Linear-stem variant: a per-position 4->dim projection replaces the CNN,
    with RoPE inside attention or learned positions.
    """
    if params.config.stem != Stem.LINEAR:
        raise ContractError(f"forward_ablation needs stem=linear, got: {params.config.stem.value}")
    return _forward(params, x_t, t, cell, train_mode, rng)
