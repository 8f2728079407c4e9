"""
Differentiable kernels used by the denoiser and the finetuning objective
"""
import numpy as np

from src.errors import ContractError, DimensionError
from src.tensor.tensor import Function, Tensor, check_broadcast, unbroadcast

GELU_C = np.sqrt(2.0 / np.pi)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Sin(Function):
    def forward(self, a):
        self.a = a
        return np.sin(a)

    def backward(self, grad):
        return (grad * np.cos(self.a),)


class Cos(Function):
    def forward(self, a):
        self.a = a
        return np.cos(a)

    def backward(self, grad):
        return (-grad * np.sin(self.a),)


class Silu(Function):
    def forward(self, a):
        self.a = a
        self.sig = 1.0 / (1.0 + np.exp(-a))
        return a * self.sig

    def backward(self, grad):
        return (grad * self.sig * (1.0 + self.a * (1.0 - self.sig)),)


class Gelu(Function):
    """tanh approximation"""

    def forward(self, a):
        self.a = a
        self.t = np.tanh(GELU_C * (a + 0.044715 * a ** 3))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, grad):
        a, t = self.a, self.t
        inner = GELU_C * (1.0 + 3 * 0.044715 * a ** 2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t ** 2) * inner),)


class Clip(Function):
    def forward(self, a, low: float, high: float):
        self.mask = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad):
        return (grad * self.mask,)


class Minimum(Function):
    def forward(self, a, b):
        check_broadcast(a.shape, b.shape, "minimum")
        self.shapes = a.shape, b.shape
        self.take_a = a <= b
        return np.minimum(a, b)

    def backward(self, grad):
        return (unbroadcast(grad * self.take_a, self.shapes[0]),
                unbroadcast(grad * ~self.take_a, self.shapes[1]))


class Concat(Function):
    def forward(self, *arrays, axis: int = -1):
        self.axis = axis
        self.bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


class Embedding(Function):
    def forward(self, table, ids):
        self.shape, self.dtype, self.ids = table.shape, table.dtype, ids
        return table[ids]

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(full, self.ids, grad)
        return (full,)


class Dropout(Function):
    def forward(self, a, p: float, rng):
        self.mask = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
        return a * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class Conv2d(Function):
    """
    Cross-correlation with zero padding, one kernel offset at a time.
    input (C_in,H,W) or (B,C_in,H,W); kernels (C_out,C_in,kH,kW)
    """

    def forward(self, x, kernels, padding=(0, 0)):
        self.batched = x.ndim == 4
        if not self.batched:
            x = x[None]
        if x.ndim != 4 or kernels.ndim != 4:
            raise DimensionError(f"conv2d: expected (C,H,W) input and 4-D kernels, got {x.shape} and {kernels.shape}")
        c_out, c_in, kh, kw = kernels.shape
        if x.shape[1] != c_in:
            raise DimensionError(f"conv2d: input channels {x.shape} do not match kernels {kernels.shape}")
        ph, pw = padding
        h, w = x.shape[2] + 2 * ph, x.shape[3] + 2 * pw
        if kh > h or kw > w:
            raise DimensionError(f"conv2d: kernel {kernels.shape} larger than padded input {x.shape} with padding {padding}")
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        oh, ow = h - kh + 1, w - kw + 1
        out = np.zeros((x.shape[0], c_out, oh, ow), dtype=np.result_type(x, kernels))
        for p in range(kh):
            for q in range(kw):
                out += np.einsum("bchw,oc->bohw", xp[:, :, p:p + oh, q:q + ow], kernels[:, :, p, q])
        self.xp, self.kernels, self.padding, self.out_hw = xp, kernels, (ph, pw), (oh, ow)
        return out if self.batched else out[0]

    def backward(self, grad):
        if not self.batched:
            grad = grad[None]
        xp, kernels = self.xp, self.kernels
        (ph, pw), (oh, ow) = self.padding, self.out_hw
        grad_xp = np.zeros_like(xp)
        grad_k = np.zeros_like(kernels)
        for p in range(kernels.shape[2]):
            for q in range(kernels.shape[3]):
                patch = xp[:, :, p:p + oh, q:q + ow]
                grad_k[:, :, p, q] = np.einsum("bohw,bchw->oc", grad, patch)
                grad_xp[:, :, p:p + oh, q:q + ow] += np.einsum("bohw,oc->bchw", grad, kernels[:, :, p, q])
        grad_x = grad_xp[:, :, ph:grad_xp.shape[2] - ph, pw:grad_xp.shape[3] - pw]
        return (grad_x if self.batched else grad_x[0]), grad_k


class LayerNorm(Function):
    def forward(self, x, gain, bias, eps: float = 1e-6):
        check_broadcast(x.shape, gain.shape, "layer_norm gain")
        check_broadcast(x.shape, bias.shape, "layer_norm bias")
        mean = x.mean(axis=-1, keepdims=True)
        var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.inv_std
        self.gain, self.shapes = gain, (gain.shape, bias.shape)
        return self.xhat * gain + bias

    def backward(self, grad):
        n = self.xhat.shape[-1]
        dxhat = grad * self.gain
        grad_x = self.inv_std / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                                     - self.xhat * (dxhat * self.xhat).sum(axis=-1, keepdims=True))
        return (grad_x, unbroadcast(grad * self.xhat, self.shapes[0]), unbroadcast(grad, self.shapes[1]))


class SoftmaxAttention(Function):
    """softmax(q kᵀ / sqrt(d)) v over the last two axes, no masking"""

    def forward(self, q, k, v):
        if not (q.shape == k.shape == v.shape):
            raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} must match")
        self.scale = 1.0 / np.sqrt(q.shape[-1])
        scores = (q @ np.swapaxes(k, -1, -2)) * self.scale
        scores = scores - scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        self.q, self.k, self.v, self.weights = q, k, v, weights
        return weights @ v

    def backward(self, grad):
        w = self.weights
        grad_v = np.swapaxes(w, -1, -2) @ grad
        grad_w = grad @ np.swapaxes(self.v, -1, -2)
        grad_s = w * (grad_w - (grad_w * w).sum(axis=-1, keepdims=True)) * self.scale
        return grad_s @ self.k, np.swapaxes(grad_s, -1, -2) @ self.q, grad_v


def rope_angles(positions: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    """Rotation angle per (position, pair): position * base^(-2i/dim)."""
    if dim % 2:
        raise ContractError(f"RoPE needs an even head width, got: {dim}")
    freqs = 1.0 / base ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]


def rotate_pairs(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    cos, sin = np.cos(angles).astype(x.dtype), np.sin(angles).astype(x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


class Rope(Function):
    def forward(self, x, positions, base: float = 10000.0):
        self.angles = rope_angles(positions, x.shape[-1], base)
        if self.angles.shape[0] != x.shape[-2]:
            raise DimensionError(f"rope: {len(positions)} positions for sequence axis of {x.shape}")
        return rotate_pairs(x, self.angles)

    def backward(self, grad):
        return (rotate_pairs(grad, -self.angles),)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def sin(x: Tensor) -> Tensor:
    return Sin.apply(x)


def cos(x: Tensor) -> Tensor:
    return Cos.apply(x)


def silu(x: Tensor) -> Tensor:
    return Silu.apply(x)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    return Clip.apply(x, low=low, high=high)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    return Minimum.apply(a, b)


def concat(tensors, axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids]; gradient scatters back onto the looked-up rows."""
    return Embedding.apply(table, ids=np.asarray(ids, dtype=np.int64))


def dropout(x: Tensor, p: float, rng, train_mode: bool) -> Tensor:
    if not train_mode or p <= 0.0:
        return x
    return Dropout.apply(x, p=p, rng=rng)


def conv2d(x: Tensor, kernels: Tensor, padding=(0, 0)) -> Tensor:
    """
    2-D cross-correlation with zero padding.

    x Tensor: (C_in, H, W) or (B, C_in, H, W)
    kernels Tensor: (C_out, C_in, kH, kW)
    padding tuple[int, int]: zeros added on both sides of H and W
    """
    return Conv2d.apply(x, kernels, padding=tuple(padding))


def layer_norm(x: Tensor, gain: Tensor = None, bias: Tensor = None, eps: float = 1e-6) -> Tensor:
    """
    Normalize the last axis to zero mean and unit variance, then apply gain/bias.
    eps sits inside the square root.
    """
    width = x.shape[-1]
    if gain is None:
        gain = Tensor(np.ones(width, dtype=x.dtype))
    if bias is None:
        bias = Tensor(np.zeros(width, dtype=x.dtype))
    return LayerNorm.apply(x, gain, bias, eps=eps)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over [..., heads, L, d] with max-subtraction."""
    return SoftmaxAttention.apply(q, k, v)


def rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotary position embedding on interleaved pairs of the last axis."""
    return Rope.apply(x, positions=np.asarray(positions), base=base)
