"""Network building blocks composed from autodiff primitives.

Weight matrices and kernels use uniform Kaiming-style fan-in scaling,
U(-sqrt(6/fan_in), +sqrt(6/fan_in)); biases start at zero, layer-norm
scale/shift at one/zero.  All draws come from the caller's portable RNG
so parameter initialization is reproducible byte for byte.
"""

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import SplitMix64


def kaiming_uniform(shape, fan_in: int, rng: SplitMix64) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


class Module:
    """Minimal parameter container: walks attributes for tensors and children."""

    def named_parameters(self):
        for key, value in self.__dict__.items():
            if isinstance(value, Tensor):
                yield key, value
            elif isinstance(value, Module):
                for sub, p in value.named_parameters():
                    yield f"{key}.{sub}", p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.named_parameters():
                            yield f"{key}.{i}.{sub}", p

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def load_param_arrays(self, arrays: dict, prefix: str = "") -> None:
        for name, p in self.named_parameters():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"missing parameter {key}")
            arr = arrays[key]
            if arr.shape != p.data.shape:
                raise ShapeError(
                    f"parameter {key}: stored shape {arr.shape} != model {p.data.shape}"
                )
            p.data = arr.astype(np.float32)

    def param_arrays(self, prefix: str = "") -> dict:
        return {prefix + name: p.data for name, p in self.named_parameters()}

    def copy_params_from(self, other: "Module") -> None:
        mine = dict(self.named_parameters())
        for name, p in other.named_parameters():
            if name not in mine or mine[name].data.shape != p.data.shape:
                raise ShapeError(f"parameter {name} does not mirror source module")
            mine[name].data = p.data.copy()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: SplitMix64):
        self.w = Tensor(kaiming_uniform((n_in, n_out), n_in, rng), requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim < 2:
            raise ShapeError(f"linear expects a batched input, got shape {x.shape}")
        if x.ndim == 2:
            return ad.add_bias(ad.matmul(x, self.w), self.b)
        lead = x.shape[:-1]
        flat = ad.reshape(x, (int(np.prod(lead)), x.shape[-1]))
        y = ad.matmul(flat, self.w)
        return ad.add_bias(ad.reshape(y, lead + (self.w.shape[1],)), self.b)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, padding: int, rng: SplitMix64):
        fan_in = c_in * kernel * kernel
        self.w = Tensor(
            kaiming_uniform((c_out, c_in, kernel, kernel), fan_in, rng),
            requires_grad=True,
        )
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, padding=self.padding)


class ConvTranspose2d(Module):
    """Stride-s transposed convolution built from dilation plus correlation."""

    def __init__(
        self, c_in: int, c_out: int, kernel: int, stride: int, padding: int,
        rng: SplitMix64,
    ):
        fan_in = c_in * kernel * kernel
        self.w = Tensor(
            kaiming_uniform((c_in, c_out, kernel, kernel), fan_in, rng),
            requires_grad=True,
        )
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.kernel = kernel

    def __call__(self, x: Tensor) -> Tensor:
        kernel = ad.transpose(ad.flip_spatial(self.w), (1, 0, 2, 3))
        dilated = ad.dilate2d(x, self.stride)
        return ad.conv2d(dilated, kernel, self.b, padding=self.kernel - 1 - self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over (batch, positions, width)."""

    def __init__(self, width: int, heads: int, rng: SplitMix64):
        if width % heads:
            raise ShapeError(f"attention width {width} not divisible by {heads} heads")
        self.wq = Linear(width, width, rng)
        self.wk = Linear(width, width, rng)
        self.wv = Linear(width, width, rng)
        self.wo = Linear(width, width, rng)
        self.heads = heads
        self.head_dim = width // heads

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return ad.transpose(
            ad.reshape(x, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3)
        )

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        b, n, width = x.shape
        q = self._split(self.wq(x))
        k = self._split(self.wk(x))
        v = self._split(self.wv(x))
        scores = ad.mul(
            ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim)
        )
        if mask is not None:
            full = np.broadcast_to(
                mask.astype(scores.data.dtype), (b, self.heads, n, n)
            ).copy()
            scores = ad.add(scores, Tensor(full))
        attn = ad.softmax(scores)
        ctx = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
        return self.wo(ad.reshape(ctx, (b, n, width)))


RESIDUAL_INIT_SCALE = 0.1


class TransformerEncoderLayer(Module):
    """Post-norm residual block: attention then feed-forward, each wrapped
    as LayerNorm(x + sublayer(x)).

    The output projection of each residual branch starts down-scaled:
    with full-size branches a stacked post-norm block at init maps every
    input toward one shared direction (the per-position LayerNorms erase
    the input-dependent part), which makes untrained embeddings collapse
    into a cone and stalls contrastive training.
    """

    def __init__(self, width: int, heads: int, ffn_hidden: int, rng: SplitMix64):
        self.attn = MultiHeadSelfAttention(width, heads, rng)
        self.ln1 = LayerNorm(width)
        self.ln2 = LayerNorm(width)
        self.fc1 = Linear(width, ffn_hidden, rng)
        self.fc2 = Linear(ffn_hidden, width, rng)
        self.attn.wo.w.data *= RESIDUAL_INIT_SCALE
        self.fc2.w.data *= RESIDUAL_INIT_SCALE

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        s = self.ln1(ad.add(x, self.attn(x, mask)))
        ffn = self.fc2(ad.relu(self.fc1(s)))
        return self.ln2(ad.add(s, ffn))
