"""Shared fixtures.

The trained artifacts used by the acceptance suite (queue-mode model,
in-batch model, toy generator) are expensive, so they are built once per
session and cached on disk keyed by a hash of the package sources: any
code change invalidates the cache and retrains.
"""

import hashlib
import json
import pathlib
import time

import numpy as np
import pytest

from brivl import datagen
from brivl.checkpoint import load_generator, load_trainer, save_generator, save_trainer
from brivl.config import RunConfig
from brivl.contrastive import Trainer
from brivl.imagination import GeneratorConfig, train_toy_generator
from brivl.vocab import batch_tokenize

ARTIFACTS = pathlib.Path(__file__).parent / "_artifacts"
TRAIN_SEED = 101
TEST_SEED = 202
TRAIN_SIZE = 2000
TEST_SIZE = 200


def _source_hash() -> str:
    src = pathlib.Path(__file__).parent.parent / "src" / "brivl"
    h = hashlib.sha256()
    for path in sorted(src.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def train_dataset():
    return datagen.generate_dataset(TRAIN_SEED, TRAIN_SIZE, split="train")


@pytest.fixture(scope="session")
def test_dataset():
    return datagen.generate_dataset(TEST_SEED, TEST_SIZE, split="test")


def _train_model(cfg: RunConfig, train_ds) -> tuple:
    images, texts, _ = datagen.load_arrays(train_ds)
    tokens = batch_tokenize(texts, cfg.max_text_len)
    trainer = Trainer(cfg)
    start = time.monotonic()
    while trainer.completed_epochs < cfg.epochs:
        trainer.run_epoch(images, tokens.ids, tokens.lengths)
    return trainer, time.monotonic() - start


def _cached_trainer(tag: str, cfg: RunConfig, train_ds):
    ARTIFACTS.mkdir(exist_ok=True)
    key = _source_hash()
    ckpt = ARTIFACTS / f"{tag}.{key}.ckpt"
    meta_path = ARTIFACTS / f"{tag}.{key}.json"
    if ckpt.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        return load_trainer(ckpt), meta
    trainer, seconds = _train_model(cfg, train_ds)
    save_trainer(ckpt, trainer)
    meta = {"train_seconds": seconds}
    meta_path.write_text(json.dumps(meta))
    return trainer, meta


@pytest.fixture(scope="session")
def desk_config() -> RunConfig:
    return RunConfig()


@pytest.fixture(scope="session")
def trained_queue(desk_config, train_dataset):
    """Desk model trained in queue mode at the acceptance budget."""
    return _cached_trainer("model_queue", desk_config, train_dataset)


@pytest.fixture(scope="session")
def trained_inbatch(train_dataset):
    """Same seed and budget, in-batch loss mode."""
    cfg = RunConfig(loss_mode="in_batch")
    return _cached_trainer("model_inbatch", cfg, train_dataset)


@pytest.fixture(scope="session")
def toy_generator(train_dataset):
    ARTIFACTS.mkdir(exist_ok=True)
    key = _source_hash()
    path = ARTIFACTS / f"generator.{key}.ckpt"
    if path.exists():
        return load_generator(path)
    images, _, _ = datagen.load_arrays(train_dataset)
    gen = train_toy_generator(images[:1800], GeneratorConfig())
    save_generator(path, gen)
    return gen


@pytest.fixture(scope="session")
def test_arrays(test_dataset):
    return datagen.load_arrays(test_dataset)


def embed_all(trainer, images: np.ndarray, batch: int = 64) -> np.ndarray:
    from brivl.autodiff import Tensor, no_grad

    outs = []
    with no_grad():
        for start in range(0, images.shape[0], batch):
            outs.append(trainer.image_encoder(Tensor(images[start : start + batch])).data)
    return np.concatenate(outs, axis=0)
