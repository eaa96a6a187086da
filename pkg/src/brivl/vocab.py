"""Fixed word inventory and whitespace tokenizer for the synthetic corpus.

The vocabulary is closed: it is exactly the set of words the scene
generator can emit, so ids are stable without scanning any particular
dataset.  Id 0 is padding, id 1 the unknown-word bucket.
"""

from dataclasses import dataclass

import numpy as np

PAD_ID = 0
UNK_ID = 1

SHAPE_WORDS = ("circle", "square", "triangle")
COLOR_WORDS = ("blue", "green", "orange", "purple", "red", "yellow")
SIZE_WORDS = ("large", "small")
FILLER_WORDS = ("day", "lovely", "nice", "photo", "really", "scene", "shot", "view")

_WORDS = tuple(sorted(SHAPE_WORDS + COLOR_WORDS + SIZE_WORDS + FILLER_WORDS))

TOKEN_TO_ID = {w: i + 2 for i, w in enumerate(_WORDS)}
ID_TO_TOKEN = {i: w for w, i in TOKEN_TO_ID.items()}

VOCAB_SIZE = len(_WORDS) + 2


@dataclass
class TokenBatch:
    """Fixed-width id matrix plus per-row valid lengths."""

    ids: np.ndarray      # (batch, max_len) int64
    lengths: np.ndarray  # (batch,) int64

    def __post_init__(self):
        if self.ids.ndim != 2 or self.lengths.shape != (self.ids.shape[0],):
            raise ValueError("token ids must be (batch, max_len) with one length per row")
        if self.ids.size and self.ids.max() >= VOCAB_SIZE:
            raise ValueError(f"token id exceeds vocabulary size {VOCAB_SIZE}")
        if (self.lengths > self.ids.shape[1]).any():
            raise ValueError("length exceeds max_text_len")


def tokenize(text: str, max_len: int) -> tuple[np.ndarray, int]:
    """Lowercase, split on whitespace, map through the fixed vocabulary.

    Unknown words map to UNK_ID; the sequence is truncated at ``max_len``
    and padded with PAD_ID.  Returns (ids row, valid length).
    """
    words = text.lower().split()[:max_len]
    row = np.full(max_len, PAD_ID, dtype=np.int64)
    for i, w in enumerate(words):
        row[i] = TOKEN_TO_ID.get(w, UNK_ID)
    return row, len(words)


def detokenize(ids) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == PAD_ID:
            break
        words.append(ID_TO_TOKEN.get(i, "<unk>"))
    return " ".join(words)


def batch_tokenize(texts, max_len: int) -> TokenBatch:
    ids = np.zeros((len(texts), max_len), dtype=np.int64)
    lengths = np.zeros(len(texts), dtype=np.int64)
    for i, t in enumerate(texts):
        ids[i], lengths[i] = tokenize(t, max_len)
    return TokenBatch(ids, lengths)
