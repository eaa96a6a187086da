"""Synthetic weakly correlated image/text pair generator and dataset files.

Scenes hold one to three colored shapes on a textured background; the
paired text mentions each scene attribute independently with probability
0.6 (capped so multi-object scenes are never exhaustively described,
floored so every text mentions something) and appends a few filler
words.  Record i draws from its own RNG stream seeded with seed XOR i,
so generation is order-independent and portable.

File format (little-endian):

    magic   8 bytes  b"WSCD-TOY"
    version u16
    image_size u16
    split   u8       0 = train, 1 = test
    count   u64
    records: image raw u8 RGB (H*W*3, row-major H,W,3),
             text  u32 length + UTF-8 bytes,
             scene u32 length + UTF-8 bytes
"""

import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import vocab
from .rng import SplitMix64

MAGIC = b"WSCD-TOY"
FORMAT_VERSION = 1
GRID = 4
MENTION_PROB = 0.6
MENTION_CAP_FRACTION = 0.75
MAX_FILLERS = 3

COLOR_RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.10, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.75),
    "orange": (0.95, 0.55, 0.05),
}
SIZE_RADIUS = {"small": 0.38, "large": 0.62}  # fraction of a grid cell
N_BACKGROUNDS = 4
# distinct muted base tones so untrained features already separate images
BACKGROUND_BASE = (
    (0.55, 0.42, 0.30),
    (0.28, 0.45, 0.47),
    (0.44, 0.36, 0.52),
    (0.40, 0.46, 0.28),
)


class DatasetFormatError(Exception):
    """Base for dataset file problems; message carries the byte offset."""


class BadMagicError(DatasetFormatError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


class TruncatedDatasetError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    cell: tuple  # (row, col) on the GRID x GRID layout


@dataclass
class SceneSpec:
    objects: list
    background: int

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 3:
            raise ValueError("a scene holds one to three objects")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("objects must occupy distinct grid cells")
        if not 0 <= self.background < N_BACKGROUNDS:
            raise ValueError(f"background index out of range: {self.background}")

    def descriptor(self) -> str:
        objs = ";".join(
            f"{o.shape},{o.color},{o.size},{o.cell[0]},{o.cell[1]}"
            for o in self.objects
        )
        return f"bg={self.background}|{objs}"

    @classmethod
    def from_descriptor(cls, text: str) -> "SceneSpec":
        bg_part, objs_part = text.split("|", 1)
        objects = []
        for chunk in objs_part.split(";"):
            shape, color, size, r, c = chunk.split(",")
            objects.append(SceneObject(shape, color, size, (int(r), int(c))))
        return cls(objects, int(bg_part.removeprefix("bg=")))


@dataclass
class PairRecord:
    image: np.ndarray  # (H, W, 3) uint8
    text: str
    scene: str  # descriptor, stored for diagnostics only

    def image_float(self) -> np.ndarray:
        """(3, H, W) float32 in [0, 1]."""
        return (self.image.astype(np.float32) / 255.0).transpose(2, 0, 1)


@dataclass
class PairDataset:
    records: list
    split: str = "train"
    image_size: int = 32
    version: int = FORMAT_VERSION


# ---------------------------------------------------------------------------
# rendering


def _background(index: int, n: int) -> np.ndarray:
    """Deterministic texture at supersampled resolution n x n."""
    yy, xx = np.mgrid[0:n, 0:n]
    base = np.asarray(BACKGROUND_BASE[index], dtype=np.float32)
    tex = np.broadcast_to(base, (n, n, 3)).copy()
    amp = 0.13
    if index == 0:  # vertical gradient
        pattern = (yy / max(n - 1, 1)).astype(np.float32) - 0.5
    elif index == 1:  # horizontal stripes
        pattern = ((yy // max(n // 8, 1)) % 2).astype(np.float32) - 0.5
    elif index == 2:  # vertical stripes
        pattern = ((xx // max(n // 8, 1)) % 2).astype(np.float32) - 0.5
    else:  # checkerboard
        pattern = (
            ((yy // max(n // 8, 1)) + (xx // max(n // 8, 1))) % 2
        ).astype(np.float32) - 0.5
    return tex + amp * pattern[..., None]


def _shape_mask(shape: str, n: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n]
    dx = (xx + 0.5) - cx
    dy = (yy + 0.5) - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":
        # upward-pointing isoceles triangle inscribed in the radius box
        halfwidth = (dy + r) / 2.0
        return (np.abs(dx) <= halfwidth) & (np.abs(dy) <= r)
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(spec: SceneSpec, image_size: int, supersample: int = 4) -> np.ndarray:
    """Anti-aliased render to (H, W, 3) uint8 via supersampled box filter."""
    n = image_size * supersample
    canvas = _background(spec.background, n)
    cell = n / GRID
    for obj in spec.objects:
        row, col = obj.cell
        cx = (col + 0.5) * cell
        cy = (row + 0.5) * cell
        r = SIZE_RADIUS[obj.size] * cell
        mask = _shape_mask(obj.shape, n, cx, cy, r)
        canvas[mask] = np.asarray(COLOR_RGB[obj.color], dtype=np.float32)
    small = canvas.reshape(
        image_size, supersample, image_size, supersample, 3
    ).mean(axis=(1, 3))
    return np.clip(np.rint(small * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# scene and text sampling


def generate_scene(rng: SplitMix64) -> SceneSpec:
    n_objects = 1 + rng.randint(3)
    cells = rng.sample(GRID * GRID, n_objects)
    objects = []
    for flat in cells:
        objects.append(
            SceneObject(
                shape=vocab.SHAPE_WORDS[rng.randint(len(vocab.SHAPE_WORDS))],
                color=vocab.COLOR_WORDS[rng.randint(len(vocab.COLOR_WORDS))],
                size=vocab.SIZE_WORDS[rng.randint(len(vocab.SIZE_WORDS))],
                cell=(flat // GRID, flat % GRID),
            )
        )
    return SceneSpec(objects, rng.randint(N_BACKGROUNDS))


def generate_text(spec: SceneSpec, rng: SplitMix64) -> str:
    """Partial description: per-attribute coin flips, capped and floored."""
    attrs = []
    for i, obj in enumerate(spec.objects):
        attrs.extend([(i, obj.size), (i, obj.color), (i, obj.shape)])
    picked = [a for a in attrs if rng.random() < MENTION_PROB]
    cap = math.ceil(MENTION_CAP_FRACTION * len(attrs))
    while len(picked) > cap:
        picked.pop(rng.randint(len(picked)))
    if not picked:
        picked = [attrs[rng.randint(len(attrs))]]
    order = {(i, w): k for k, (i, w) in enumerate(attrs)}
    picked.sort(key=lambda a: order[a])
    words = [w for _, w in picked]
    for _ in range(rng.randint(MAX_FILLERS + 1)):
        words.append(vocab.FILLER_WORDS[rng.randint(len(vocab.FILLER_WORDS))])
    return " ".join(words)


def generate_pair(rng: SplitMix64, image_size: int = 32) -> PairRecord:
    spec = generate_scene(rng)
    text = generate_text(spec, rng)
    image = render_scene(spec, image_size)
    return PairRecord(image, text, spec.descriptor())


def generate_dataset(
    seed: int, size: int, image_size: int = 32, split: str = "train"
) -> PairDataset:
    if size < 1:
        raise ValueError("dataset size must be positive")
    records = []
    for i in range(size):
        records.append(generate_pair(SplitMix64(seed ^ i), image_size))
    return PairDataset(records, split=split, image_size=image_size)


# ---------------------------------------------------------------------------
# file IO


def _u(value: int, nbytes: int) -> bytes:
    return int(value).to_bytes(nbytes, "little")


def write_dataset(ds: PairDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_u(ds.version, 2))
        fh.write(_u(ds.image_size, 2))
        fh.write(_u(0 if ds.split == "train" else 1, 1))
        fh.write(_u(len(ds.records), 8))
        for rec in ds.records:
            expected = (ds.image_size, ds.image_size, 3)
            if rec.image.shape != expected or rec.image.dtype != np.uint8:
                raise ValueError(f"record image must be uint8 {expected}")
            fh.write(rec.image.tobytes())
            for payload in (rec.text.encode(), rec.scene.encode()):
                fh.write(_u(len(payload), 4))
                fh.write(payload)


class _Reader:
    def __init__(self, fh):
        self.fh = fh
        self.offset = 0

    def read(self, n: int, what: str) -> bytes:
        data = self.fh.read(n)
        if len(data) != n:
            raise TruncatedDatasetError(
                f"truncated while reading {what} at offset {self.offset} "
                f"(wanted {n} bytes, got {len(data)})"
            )
        self.offset += n
        return data

    def read_u(self, nbytes: int, what: str) -> int:
        return int.from_bytes(self.read(nbytes, what), "little")


def read_dataset(path) -> PairDataset:
    with open(path, "rb") as fh:
        r = _Reader(fh)
        magic = r.read(len(MAGIC), "magic")
        if magic != MAGIC:
            raise BadMagicError(
                f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})"
            )
        version = r.read_u(2, "version")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"unsupported dataset version {version} at offset 8"
            )
        image_size = r.read_u(2, "image_size")
        split = "train" if r.read_u(1, "split") == 0 else "test"
        count = r.read_u(8, "record count")
        records = []
        img_bytes = image_size * image_size * 3
        for i in range(count):
            raw = r.read(img_bytes, f"record {i} image")
            image = np.frombuffer(raw, dtype=np.uint8).reshape(
                image_size, image_size, 3
            )
            tlen = r.read_u(4, f"record {i} text length")
            text = r.read(tlen, f"record {i} text").decode()
            slen = r.read_u(4, f"record {i} scene length")
            scene = r.read(slen, f"record {i} scene").decode()
            records.append(PairRecord(image.copy(), text, scene))
        return PairDataset(records, split=split, image_size=image_size, version=version)


def file_checksum(path) -> str:
    with open(path, "rb") as fh:
        return f"{zlib.crc32(fh.read()) & 0xFFFFFFFF:08x}"


def load_arrays(ds: PairDataset):
    """Images as (N, 3, H, W) float32 plus texts and scene descriptors."""
    images = np.stack([rec.image_float() for rec in ds.records])
    texts = [rec.text for rec in ds.records]
    scenes = [rec.scene for rec in ds.records]
    return images, texts, scenes


def single_shape_labels(ds: PairDataset):
    """Indices and shape names of records whose objects all share one shape."""
    idx, labels = [], []
    for i, rec in enumerate(ds.records):
        spec = SceneSpec.from_descriptor(rec.scene)
        shapes = {o.shape for o in spec.objects}
        if len(shapes) == 1:
            idx.append(i)
            labels.append(next(iter(shapes)))
    return idx, labels
