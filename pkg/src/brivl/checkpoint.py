"""Binary checkpoint container for trainer state and the toy generator.

Layout (little-endian):

    magic    9 bytes   b"BRIVLCKPT" (trainer) / b"BRIVLTOYG" (generator)
    version  u16
    config   u32 length + UTF-8 canonical config text
    count    u32 named arrays, each:
        name   u32 length + UTF-8
        dtype  u8  (0 f32, 1 f64, 2 u64, 3 i64)
        ndim   u8, dims u64 each
        data   raw bytes (row-major)
    crc      u32 CRC-32 of everything before it

A reloaded trainer reproduces the next training step bit for bit: all
four towers, optimizer moments, queue contents and pointers, counters
and the RNG state are stored.
"""

import io
import zlib
from dataclasses import dataclass

import numpy as np

from . import config as config_mod
from .contrastive import Trainer
from .encoders import ImageEncoder, TextEncoder
from .imagination import GeneratorConfig, ToyGenerator
from .rng import SplitMix64

TRAINER_MAGIC = b"BRIVLCKPT"
GENERATOR_MAGIC = b"BRIVLTOYG"
FORMAT_VERSION = 1

_DTYPES = {0: np.float32, 1: np.float64, 2: np.uint64, 3: np.int64}
_DTYPE_TAGS = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    """Base for checkpoint file problems; message carries the byte offset."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def _u(value: int, nbytes: int) -> bytes:
    return int(value).to_bytes(nbytes, "little")


def write_container(path, magic: bytes, config_text: str, arrays: dict) -> None:
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(_u(FORMAT_VERSION, 2))
    payload = config_text.encode()
    buf.write(_u(len(payload), 4))
    buf.write(payload)
    buf.write(_u(len(arrays), 4))
    for name, value in arrays.items():
        arr = np.asarray(value)
        if arr.dtype not in _DTYPE_TAGS:
            arr = arr.astype(np.float32)
        name_bytes = name.encode()
        buf.write(_u(len(name_bytes), 4))
        buf.write(name_bytes)
        buf.write(_u(_DTYPE_TAGS[arr.dtype], 1))
        buf.write(_u(arr.ndim, 1))
        for dim in arr.shape:
            buf.write(_u(dim, 8))
        buf.write(np.ascontiguousarray(arr).tobytes())
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
        fh.write(_u(zlib.crc32(data) & 0xFFFFFFFF, 4))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def read(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CorruptCheckpointError(
                f"truncated while reading {what} at offset {self.offset}"
            )
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def read_u(self, nbytes: int, what: str) -> int:
        return int.from_bytes(self.read(nbytes, what), "little")


def read_container(path, magic: bytes) -> tuple:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(magic) + 4:
        raise CorruptCheckpointError(f"file too short ({len(raw)} bytes)")
    body, stored_crc = raw[:-4], int.from_bytes(raw[-4:], "little")
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CorruptCheckpointError(
            f"CRC mismatch over {len(body)} bytes (stored {stored_crc:#010x})"
        )
    r = _Reader(body)
    found = r.read(len(magic), "magic")
    if found != magic:
        raise BadMagicError(f"bad magic {found!r} at offset 0 (expected {magic!r})")
    version = r.read_u(2, "version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported checkpoint version {version} at offset {len(magic)}"
        )
    clen = r.read_u(4, "config length")
    config_text = r.read(clen, "config").decode()
    count = r.read_u(4, "array count")
    arrays = {}
    for i in range(count):
        nlen = r.read_u(4, f"array {i} name length")
        name = r.read(nlen, f"array {i} name").decode()
        tag = r.read_u(1, f"array {name} dtype")
        if tag not in _DTYPES:
            raise CorruptCheckpointError(
                f"unknown dtype tag {tag} at offset {r.offset - 1}"
            )
        dtype = np.dtype(_DTYPES[tag])
        ndim = r.read_u(1, f"array {name} ndim")
        shape = tuple(r.read_u(8, f"array {name} dim") for _ in range(ndim))
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        data = r.read(nbytes, f"array {name} data")
        arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return config_text, arrays


# ---------------------------------------------------------------------------
# trainer checkpoints


def save_trainer(path, trainer: Trainer) -> None:
    write_container(
        path,
        TRAINER_MAGIC,
        config_mod.to_text(trainer.cfg),
        trainer.state_arrays(),
    )


def load_trainer(path, expected_cfg=None) -> Trainer:
    config_text, arrays = read_container(path, TRAINER_MAGIC)
    if expected_cfg is not None and config_mod.to_text(expected_cfg) != config_text:
        raise ConfigMismatchError(
            "checkpoint config snapshot differs from the requested config"
        )
    cfg = config_mod.load_config(
        overrides=[l for l in config_text.splitlines() if l.strip()]
    )
    trainer = Trainer(cfg)
    trainer.load_state_arrays(arrays)
    return trainer


@dataclass
class ModelBundle:
    """Frozen online towers for inference and inversion."""

    cfg: object
    image_encoder: ImageEncoder
    text_encoder: TextEncoder

    def encode_texts(self, texts) -> np.ndarray:
        from .autodiff import no_grad

        with no_grad():
            return self.text_encoder.encode_texts(texts).data.copy()

    def encode_images(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        from .autodiff import Tensor, no_grad

        outs = []
        with no_grad():
            for start in range(0, images.shape[0], batch):
                outs.append(
                    self.image_encoder(Tensor(images[start : start + batch])).data
                )
        return np.concatenate(outs, axis=0)


def load_model(path) -> ModelBundle:
    config_text, arrays = read_container(path, TRAINER_MAGIC)
    cfg = config_mod.load_config(
        overrides=[l for l in config_text.splitlines() if l.strip()]
    )
    trainer = Trainer(cfg)
    trainer.load_state_arrays(arrays)
    trainer.image_encoder.set_requires_grad(False)
    trainer.text_encoder.set_requires_grad(False)
    return ModelBundle(cfg, trainer.image_encoder, trainer.text_encoder)


# ---------------------------------------------------------------------------
# generator checkpoints


def save_generator(path, gen: ToyGenerator) -> None:
    cfg = gen.config
    meta = (
        f"grid = {cfg.grid}\ncode_dim = {cfg.code_dim}\n"
        f"codebook_size = {cfg.codebook_size}\nimage_size = {gen.image_size}\n"
    )
    write_container(path, GENERATOR_MAGIC, meta, gen.param_arrays("generator."))


def load_generator(path) -> ToyGenerator:
    meta_text, arrays = read_container(path, GENERATOR_MAGIC)
    meta = {}
    for line in meta_text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = int(value.strip())
    cfg = GeneratorConfig(
        grid=meta["grid"],
        code_dim=meta["code_dim"],
        codebook_size=meta["codebook_size"],
    )
    gen = ToyGenerator(cfg, SplitMix64(0), image_size=meta["image_size"])
    gen.load_param_arrays(arrays, "generator.")
    gen.set_requires_grad(False)
    return gen
