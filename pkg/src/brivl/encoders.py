"""Image and text towers producing embeddings in one joint space.

Image side: a small convolutional backbone, multi-scale patch pooling
over the final feature map, a self-attention block over the patch
sequence, average fusion, and a two-layer MLP head.  Text side: learned
token + position embeddings, the same self-attention block with padding
masks, masked mean pooling, and an identical MLP head.  Both towers emit
L2-normalized vectors so dot product and cosine coincide.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import vocab
from .autodiff import ShapeError, Tensor
from .layers import (
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    TransformerEncoderLayer,
)
from .rng import SplitMix64

BACKBONE_CHANNELS = (8, 12, 12)
ATTENTION_MASK_FILL = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    image_size: int = 32
    mspp_scales: tuple = (1, 6)
    sa_layers: int = 2
    sa_heads: int = 4
    mlp_hidden: int = 128
    vocab_size: int = vocab.VOCAB_SIZE
    max_text_len: int = 16
    use_sa: bool = True

    def __post_init__(self):
        if not self.mspp_scales:
            raise ValueError("mspp_scales must be non-empty")
        if len(set(self.mspp_scales)) != len(self.mspp_scales):
            raise ValueError("mspp_scales must be distinct")
        m = self.feature_map_size
        if m < 1:
            raise ValueError(f"image_size {self.image_size} too small for the backbone")
        for s in self.mspp_scales:
            if s < 1 or m % s:
                raise ValueError(
                    f"feature map size {m} not divisible by patch scale {s}"
                )
        if self.use_sa:
            if BACKBONE_CHANNELS[-1] % self.sa_heads:
                raise ValueError(
                    f"{self.sa_heads} heads do not divide patch width "
                    f"{BACKBONE_CHANNELS[-1]}"
                )
            if self.embed_dim % self.sa_heads:
                raise ValueError(
                    f"{self.sa_heads} heads do not divide text width {self.embed_dim}"
                )

    @property
    def feature_map_size(self) -> int:
        # conv(3x3, pad 1) + 2x2 pool halves, then two unpadded 3x3 convs
        # each trim 2: e.g. 32 -> 16 -> 14 -> 12.
        return self.image_size // 2 - 4

    @property
    def n_patches(self) -> int:
        return sum(s * s for s in self.mspp_scales)


def mspp(feature_map: Tensor, scales) -> Tensor:
    """Multi-scale patch pooling: (B, C, H, W) -> (B, C, sum(s^2)).

    For each scale s the map is cut into an s x s grid of equal regions,
    each averaged into one column; columns are concatenated in scale
    order, row-major within a scale.
    """
    _, _, h, w = feature_map.shape
    cols = []
    for s in scales:
        if h % s or w % s:
            raise ShapeError(f"mspp: map {h}x{w} not divisible by scale {s}")
        pooled = ad.avg_pool2d(feature_map, (h // s, w // s))
        b, c = pooled.shape[0], pooled.shape[1]
        cols.append(ad.reshape(pooled, (b, c, s * s)))
    return concat_cols(cols)


def concat_cols(cols) -> Tensor:
    return cols[0] if len(cols) == 1 else ad.concat(cols, axis=2)


class MlpHead(Module):
    """Two-layer projection with a ReLU in between."""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng: SplitMix64):
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


class ImageEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: SplitMix64):
        c1, c2, c3 = BACKBONE_CHANNELS
        self.conv1 = Conv2d(3, c1, 3, padding=1, rng=rng)
        self.conv2 = Conv2d(c1, c2, 3, padding=0, rng=rng)
        self.conv3 = Conv2d(c2, c3, 3, padding=0, rng=rng)
        self.sa = (
            [
                TransformerEncoderLayer(c3, cfg.sa_heads, 4 * c3, rng)
                for _ in range(cfg.sa_layers)
            ]
            if cfg.use_sa
            else []
        )
        self.head = MlpHead(c3, cfg.mlp_hidden, cfg.embed_dim, rng)
        self.config = cfg

    def backbone(self, images: Tensor) -> Tensor:
        """Feature map before pooling; its channels are the targetable units.

        The last stage is a linear projection (no activation), mirroring
        how full-scale CNN stages end; it also keeps the map zero-mean at
        init so untrained embeddings do not clump into one cone.
        """
        cfg = self.config
        if images.ndim != 4 or images.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"image batch must be (B, 3, {cfg.image_size}, {cfg.image_size}), "
                f"got {images.shape}"
            )
        h = ad.avg_pool2d(ad.relu(self.conv1(images)), (2, 2))
        h = ad.relu(self.conv2(h))
        return self.conv3(h)

    def encode_with_map(self, images: Tensor) -> tuple:
        fmap = self.backbone(images)
        patches = mspp(fmap, self.config.mspp_scales)
        x = ad.transpose(patches, (0, 2, 1))  # (B, N_p, C)
        for layer in self.sa:
            x = layer(x)
        fused = ad.mean(x, axis=1)
        z = ad.l2_normalize(self.head(fused))
        return z, fmap

    def __call__(self, images: Tensor) -> Tensor:
        return self.encode_with_map(images)[0]


class TextEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: SplitMix64):
        d = cfg.embed_dim
        limit = math.sqrt(3.0 / d)
        self.tok_emb = Tensor(
            rng.uniform(-limit, limit, (cfg.vocab_size, d)), requires_grad=True
        )
        self.pos_emb = Tensor(
            rng.uniform(-limit, limit, (cfg.max_text_len, d)), requires_grad=True
        )
        self.sa = (
            [
                TransformerEncoderLayer(d, cfg.sa_heads, 4 * d, rng)
                for _ in range(cfg.sa_layers)
            ]
            if cfg.use_sa
            else []
        )
        self.head = MlpHead(d, cfg.mlp_hidden, d, rng)
        self.config = cfg

    def __call__(self, tokens: vocab.TokenBatch) -> Tensor:
        cfg = self.config
        ids, lengths = tokens.ids, tokens.lengths
        if ids.shape[1] != cfg.max_text_len:
            raise ShapeError(
                f"token batch width {ids.shape[1]} != max_text_len {cfg.max_text_len}"
            )
        if (lengths < 1).any():
            raise ValueError("empty text: every row needs at least one token")
        b, n = ids.shape
        x = ad.add_bias(ad.embedding(self.tok_emb, ids), self.pos_emb)
        valid = np.arange(n)[None, :] < lengths[:, None]  # (B, N)
        attn_mask = np.where(valid, 0.0, ATTENTION_MASK_FILL).astype(np.float32)
        attn_mask = attn_mask[:, None, None, :]  # (B, 1, 1, N): masks key positions
        for layer in self.sa:
            x = layer(x, mask=attn_mask)
        keep = np.broadcast_to(
            valid[:, :, None], (b, n, cfg.embed_dim)
        ).astype(np.float32)
        summed = ad.tensor_sum(ad.mul(x, Tensor(keep.copy())), axis=1)
        inv_len = np.broadcast_to(
            (1.0 / lengths.astype(np.float32))[:, None], (b, cfg.embed_dim)
        )
        pooled = ad.mul(summed, Tensor(inv_len.copy()))
        return ad.l2_normalize(self.head(pooled))

    def encode_texts(self, texts) -> Tensor:
        return self(vocab.batch_tokenize(texts, self.config.max_text_len))
