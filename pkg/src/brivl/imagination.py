"""Embedding-inversion tools over a frozen trained model.

``visualize_text`` performs gradient descent on raw pixels to pull the
image embedding toward a text embedding (optionally also maximizing one
channel of the feature map before pooling).  ``generate_from_text``
instead optimizes a grid of codebook entries fed to a frozen decoder,
re-quantizing the grid onto the codebook after every step.  Both leave
the model untouched and are deterministic given (seed, text, weights).
"""

import math
import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .layers import Conv2d, ConvTranspose2d, Module
from .optim import Adam
from .rng import SplitMix64
from .vocab import batch_tokenize


class NonFiniteLossError(RuntimeError):
    """Optimization produced a NaN or infinite loss; carries the iteration."""


@dataclass
class VisConfig:
    iterations: int = 500
    lr: float = 0.05
    neuron: int | None = None  # channel of the pre-pooling feature map
    alpha: float = 1.0
    seed: int = 0


def params_checksum(module: Module) -> str:
    crc = 0
    for name, p in sorted(module.named_parameters()):
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(np.ascontiguousarray(p.data).tobytes(), crc)
    return f"{crc & 0xFFFFFFFF:08x}"


def _text_embedding(text_encoder, text: str) -> Tensor:
    with no_grad():
        z = text_encoder(batch_tokenize([text], text_encoder.config.max_text_len))
    return Tensor(z.data)


def visualize_text(image_encoder, text_encoder, text: str, cfg: VisConfig):
    """Pixel-space inversion of a text embedding.

    Starts from seeded mid-gray noise, descends on the negative cosine
    between the image and text embeddings (plus an optional negative
    mean-activation term for one feature-map channel), clamps pixels to
    [0, 1] after every step.  Returns the final image (3, H, W) and the
    per-iteration cosine trace (initial value first, final value last).
    """
    if cfg.lr <= 0:
        raise ValueError("learning rate must be positive")
    size = image_encoder.config.image_size
    channels = image_encoder.conv3.w.shape[0]
    if cfg.neuron is not None and not 0 <= cfg.neuron < channels:
        raise ValueError(f"neuron index {cfg.neuron} outside {channels} channels")
    rng = SplitMix64(cfg.seed)
    pixels = 0.5 + 0.1 * (rng.uniform(0.0, 1.0, (1, 3, size, size)) - 0.5)
    x = Tensor(np.clip(pixels, 0.0, 1.0), requires_grad=True)
    z_t = _text_embedding(text_encoder, text)

    trace = []
    for it in range(cfg.iterations):
        z_i, fmap = image_encoder.encode_with_map(x)
        cos = ad.cosine_similarity(z_i, z_t)
        loss = ad.neg(ad.mean(cos))
        if cfg.neuron is not None:
            loss = ad.add(
                loss, ad.mul(ad.mean(fmap[:, cfg.neuron]), -cfg.alpha)
            )
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss at iteration {it}")
        trace.append(cos.item())
        loss.backward()
        x.data = np.clip(x.data - cfg.lr * x.grad, 0.0, 1.0).astype(np.float32)
        x.grad = None
    with no_grad():
        final_cos = ad.cosine_similarity(image_encoder(x), z_t).item()
    trace.append(final_cos)
    return x.data[0].copy(), trace


# ---------------------------------------------------------------------------
# codebook and quantization


@dataclass
class Codebook:
    entries: np.ndarray  # (N_c, d_c) float32

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float32)
        if self.entries.ndim != 2 or self.entries.shape[0] < 2:
            raise ValueError("codebook needs at least two entries")
        if not np.isfinite(self.entries).all():
            raise ValueError("codebook entries must be finite")


def quantize(grid: np.ndarray, codebook: Codebook) -> tuple:
    """Snap every cell to its nearest codebook entry (Euclidean).

    Distances are evaluated in float64 via explicit differences so the
    argmin agrees exactly with a per-cell exhaustive scan; ties resolve
    to the smallest entry index.  Returns (quantized grid, index grid).
    """
    grid = np.asarray(grid, dtype=np.float32)
    if grid.shape[-1] != codebook.entries.shape[1]:
        raise ValueError(
            f"cell dim {grid.shape[-1]} != codebook dim {codebook.entries.shape[1]}"
        )
    cells = grid.reshape(-1, grid.shape[-1]).astype(np.float64)
    entries = codebook.entries.astype(np.float64)
    indices = np.empty(cells.shape[0], dtype=np.int64)
    chunk = 4096
    for start in range(0, cells.shape[0], chunk):
        block = cells[start : start + chunk]
        d2 = ((block[:, None, :] - entries[None, :, :]) ** 2).sum(axis=2)
        indices[start : start + chunk] = d2.argmin(axis=1)
    quantized = codebook.entries[indices].reshape(grid.shape)
    return quantized, indices.reshape(grid.shape[:-1])


# ---------------------------------------------------------------------------
# toy vector-quantized generator


@dataclass
class GeneratorConfig:
    grid: int = 4        # code grid is grid x grid
    code_dim: int = 16
    codebook_size: int = 64
    train_steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    commitment: float = 0.25
    seed: int = 0


class ToyGenerator(Module):
    """Small vector-quantized autoencoder over the synthetic images.

    The encoder halves 32 -> 16 -> 8 -> 4 with stride-1 convs and average
    pooling; the decoder mirrors it with stride-2 transposed convs and a
    sigmoid so decoded pixels stay in [0, 1].
    """

    def __init__(self, cfg: GeneratorConfig, rng: SplitMix64, image_size: int = 32):
        if image_size != cfg.grid * 8:
            raise ValueError(
                f"decoder upsamples x8: image_size {image_size} != 8*grid {cfg.grid}"
            )
        d = cfg.code_dim
        self.enc1 = Conv2d(3, 16, 3, padding=1, rng=rng)
        self.enc2 = Conv2d(16, 32, 3, padding=1, rng=rng)
        self.enc3 = Conv2d(32, d, 3, padding=1, rng=rng)
        self.dec1 = ConvTranspose2d(d, 32, 4, stride=2, padding=1, rng=rng)
        self.dec2 = ConvTranspose2d(32, 16, 4, stride=2, padding=1, rng=rng)
        self.dec3 = ConvTranspose2d(16, 3, 4, stride=2, padding=1, rng=rng)
        self.codebook_param = Tensor(
            rng.uniform(-0.5, 0.5, (cfg.codebook_size, d)), requires_grad=True
        )
        self.config = cfg
        self.image_size = image_size

    def codebook(self) -> Codebook:
        return Codebook(self.codebook_param.data.copy())

    def encode_grid(self, images: Tensor) -> Tensor:
        """(B, 3, S, S) -> (B, grid, grid, code_dim) continuous codes."""
        h = ad.avg_pool2d(ad.relu(self.enc1(images)), (2, 2))
        h = ad.avg_pool2d(ad.relu(self.enc2(h)), (2, 2))
        h = ad.avg_pool2d(self.enc3(h), (2, 2))
        return ad.transpose(h, (0, 2, 3, 1))

    def decode(self, grid: Tensor) -> Tensor:
        """(B, grid, grid, code_dim) -> (B, 3, S, S) in [0, 1]."""
        h = ad.transpose(grid, (0, 3, 1, 2))
        h = ad.relu(self.dec1(h))
        h = ad.relu(self.dec2(h))
        return ad.sigmoid(self.dec3(h))

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        with no_grad():
            z = self.encode_grid(Tensor(images))
            quantized, _ = quantize(z.data, self.codebook())
            return self.decode(Tensor(quantized)).data


def _init_codebook_from_data(gen: ToyGenerator, images: np.ndarray, rng: SplitMix64):
    """Seed codebook entries from encoder outputs to avoid dead codes."""
    with no_grad():
        z = gen.encode_grid(Tensor(images)).data
    cells = z.reshape(-1, z.shape[-1])
    picks = rng.sample(cells.shape[0], min(gen.config.codebook_size, cells.shape[0]))
    entries = gen.codebook_param.data
    for i, p in enumerate(picks):
        entries[i] = cells[p]


def train_toy_generator(
    images: np.ndarray, cfg: GeneratorConfig | None = None
) -> ToyGenerator:
    """Train the VQ autoencoder by pixel reconstruction.

    Straight-through gradients cross the quantizer; the codebook learns
    from a pull-toward-encoder term plus a commitment penalty.  A
    non-decreasing reconstruction trend over the first 100 steps only
    warns, it does not fail.
    """
    cfg = cfg or GeneratorConfig()
    rng = SplitMix64(cfg.seed)
    gen = ToyGenerator(cfg, rng, image_size=images.shape[-1])
    if images.shape[0] < cfg.batch_size:
        raise ValueError("not enough images to form one training batch")
    _init_codebook_from_data(
        gen, images[: min(256, images.shape[0])], rng
    )
    opt = Adam(gen.parameters(), lr=cfg.lr)
    early = []
    n = images.shape[0]
    for step in range(cfg.train_steps):
        pick = np.asarray([rng.randint(n) for _ in range(cfg.batch_size)])
        batch = Tensor(images[pick])
        z_e = gen.encode_grid(batch)
        quantized, idx = quantize(z_e.data, gen.codebook())
        # straight-through: decoder sees quantized values, encoder gets
        # the decoder gradient unchanged
        bridge = ad.add(z_e, Tensor(quantized - z_e.data))
        recon = gen.decode(bridge)
        err = ad.sub(recon, batch)
        recon_loss = ad.mean(ad.mul(err, err))
        z_q = ad.embedding(gen.codebook_param, idx)
        pull = ad.sub(z_q, Tensor(z_e.data))
        codebook_loss = ad.mean(ad.mul(pull, pull))
        commit = ad.sub(z_e, Tensor(quantized))
        commit_loss = ad.mean(ad.mul(commit, commit))
        loss = ad.add(
            recon_loss,
            ad.add(codebook_loss, ad.mul(commit_loss, cfg.commitment)),
        )
        loss.backward()
        opt.step()
        opt.zero_grad()
        if step < 100:
            early.append(recon_loss.item())
    if len(early) >= 100 and early[-1] >= early[0]:
        warnings.warn(
            "toy generator reconstruction did not improve over the first "
            "100 steps",
            RuntimeWarning,
            stacklevel=2,
        )
    gen.set_requires_grad(False)
    return gen


def codebook_usage(gen: ToyGenerator, images: np.ndarray) -> float:
    """Fraction of codebook entries selected at least once on the images."""
    with no_grad():
        z = gen.encode_grid(Tensor(images)).data
    _, idx = quantize(z, gen.codebook())
    return np.unique(idx).size / gen.config.codebook_size


def generate_from_text(image_encoder, text_encoder, generator, text: str,
                       cfg: VisConfig):
    """Codebook-inversion: optimize the code grid, re-quantizing each step.

    Returns (final image (3, S, S), cosine trace, final index grid); every
    cell of the final grid is bit-equal to a codebook entry.
    """
    if cfg.lr <= 0:
        raise ValueError("learning rate must be positive")
    if generator.image_size != image_encoder.config.image_size:
        raise ValueError(
            f"generator output {generator.image_size} does not match encoder "
            f"input {image_encoder.config.image_size}"
        )
    codebook = generator.codebook()
    g = generator.config.grid
    d = generator.config.code_dim
    rng = SplitMix64(cfg.seed)
    picks = np.asarray([rng.randint(codebook.entries.shape[0]) for _ in range(g * g)])
    grid = codebook.entries[picks].reshape(1, g, g, d).copy()
    z_t = _text_embedding(text_encoder, text)

    trace = []
    idx = picks.reshape(1, g, g)
    u = Tensor(grid, requires_grad=True)
    for it in range(cfg.iterations):
        image = generator.decode(u)
        z_i = image_encoder(image)
        cos = ad.cosine_similarity(z_i, z_t)
        loss = ad.neg(ad.mean(cos))
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss at iteration {it}")
        trace.append(cos.item())
        loss.backward()
        raw = u.data - cfg.lr * u.grad
        quantized, idx = quantize(raw, codebook)
        u = Tensor(quantized, requires_grad=True)
    with no_grad():
        final_image = generator.decode(u)
        final_cos = ad.cosine_similarity(image_encoder(final_image), z_t).item()
    trace.append(final_cos)
    return final_image.data[0].copy(), trace, idx


# ---------------------------------------------------------------------------
# output files


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6, 8-bit) from a (3, H, W) float image in [0, 1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {image.shape}")
    h, w = image.shape[1], image.shape[2]
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def write_trace(path, trace) -> None:
    """Two-column decimal text: iteration index and cosine value."""
    with open(path, "w") as fh:
        for i, value in enumerate(trace):
            fh.write(f"{i} {value:.6f}\n")
