"""Four-tower contrastive training: momentum encoders, negative queues,
bidirectional InfoNCE, and the training step.

Each step forwards the online towers, forwards the momentum towers
(gradient-free), pushes the momentum embeddings into the two FIFO
queues, scores every anchor against the full opposite-modality queue
with its own momentum embedding as the positive, back-propagates, steps
Adam on the online towers only, and finally eases the momentum towers
toward the online ones.  An in-batch mode replaces the queue loss with
symmetric cross-entropy over the batch similarity matrix (no momentum
machinery), matching the common large-batch recipe.

The loss kernels compute their exp/log chains in float64 internally and
emit float32, so loss values agree with an independent double-precision
evaluation to well below 1e-6.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, no_grad
from .encoders import EncoderConfig, ImageEncoder, TextEncoder
from .layers import Module
from .optim import Adam
from .rng import SplitMix64
from .vocab import TokenBatch

GRAY_PROB = 0.2
JITTER_RANGE = (0.8, 1.2)
LUMA = (0.299, 0.587, 0.114)


class NegativeQueue:
    """Fixed-capacity FIFO of embedding vectors, stored as a ring buffer.

    Pushes must evenly divide the capacity so each push of N_b vectors
    lands on (and, once full, evicts) exactly the N_b oldest slots; slot
    indices returned by ``push`` stay valid until the entries are evicted.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.entries = np.zeros((capacity, dim), dtype=np.float32)
        self.fill = 0
        self.total = 0

    def push(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float32)
        if batch.ndim != 2 or batch.shape[1] != self.dim:
            raise ShapeError(
                f"queue push: batch shape {batch.shape} vs entry dim {self.dim}"
            )
        nb = batch.shape[0]
        if nb > self.capacity:
            raise ValueError(f"batch of {nb} exceeds queue capacity {self.capacity}")
        if self.capacity % nb:
            raise ValueError(
                f"queue capacity {self.capacity} not a multiple of batch {nb}"
            )
        slots = (self.total + np.arange(nb)) % self.capacity
        self.entries[slots] = batch
        self.total += nb
        self.fill = min(self.fill + nb, self.capacity)
        return slots

    def matrix(self) -> np.ndarray:
        return self.entries[: self.fill]

    def snapshot(self) -> np.ndarray:
        """Current contents ordered oldest to newest."""
        if self.fill < self.capacity:
            return self.entries[: self.fill].copy()
        head = self.total % self.capacity
        return np.roll(self.entries, -head, axis=0)

    def state_arrays(self, prefix: str) -> dict:
        return {
            f"{prefix}.entries": self.entries,
            f"{prefix}.fill": np.uint64(self.fill),
            f"{prefix}.total": np.uint64(self.total),
        }

    def load_state_arrays(self, state: dict, prefix: str) -> None:
        entries = state[f"{prefix}.entries"]
        if entries.shape != self.entries.shape:
            raise ShapeError(f"queue entries shape {entries.shape} does not match")
        self.entries = entries.astype(np.float32)
        self.fill = int(state[f"{prefix}.fill"])
        self.total = int(state[f"{prefix}.total"])


class MomentumPair:
    """An online tower plus its gradient-free exponential-moving shadow."""

    def __init__(self, online: Module, momentum: Module, m: float):
        if not 0.0 <= m <= 1.0:
            raise ValueError("momentum coefficient must lie in [0, 1]")
        self.online = online
        self.momentum = momentum
        self.m = m
        momentum.copy_params_from(online)
        momentum.set_requires_grad(False)

    def update(self) -> None:
        online = dict(self.online.named_parameters())
        for name, pm in self.momentum.named_parameters():
            po = online.get(name)
            if po is None or po.data.shape != pm.data.shape:
                raise ShapeError(f"momentum parameter {name} does not mirror online")
            pm.data = self.m * pm.data + (1.0 - self.m) * po.data


# ---------------------------------------------------------------------------
# losses


def _logsumexp(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    return m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))


def queue_infonce(
    anchors: Tensor,
    positives: np.ndarray,
    queue: NegativeQueue,
    slots: np.ndarray,
    tau: float,
) -> Tensor:
    """InfoNCE over the queue: one positive term, fill-1 negatives.

    ``positives`` are the batch's momentum embeddings, which must already
    sit in the queue at ``slots`` (verified bit-exactly); gradients flow
    to the anchors only.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    positives = np.asarray(positives, dtype=np.float32)
    slots = np.asarray(slots)
    nb = anchors.shape[0]
    if positives.shape != anchors.shape or slots.shape != (nb,):
        raise ShapeError(
            f"queue_infonce: anchors {anchors.shape}, positives {positives.shape}, "
            f"slots {slots.shape}"
        )
    if queue.fill < 1:
        raise ValueError("queue is empty; warm it up before computing the loss")
    if slots.min() < 0 or slots.max() >= queue.fill:
        raise ValueError("positive slot outside the filled queue")
    if not np.array_equal(queue.entries[slots], positives):
        raise ValueError("positive not found in queue at its recorded slot")

    a64 = anchors.data.astype(np.float64)
    q64 = queue.matrix().astype(np.float64)
    logits = a64 @ q64.T / tau
    lse = _logsumexp(logits)
    rows = np.arange(nb)
    # the scalar stays float64: it is a terminal node and must agree with
    # an independent double-precision evaluation to 1e-6
    out = ad._result(
        np.asarray((lse - logits[rows, slots]).mean()), (anchors,), None
    )

    def bw():
        p = np.exp(logits - lse[:, None])
        p[rows, slots] -= 1.0
        da = (p @ q64) * (float(out.grad) / (nb * tau))
        ad._accumulate(anchors, da.astype(anchors.data.dtype))

    out._backward = bw if out.requires_grad else None
    return out


def total_contrastive_loss(
    image_anchors: Tensor,
    text_anchors: Tensor,
    image_positives: np.ndarray,
    text_positives: np.ndarray,
    image_queue: NegativeQueue,
    text_queue: NegativeQueue,
    image_slots: np.ndarray,
    text_slots: np.ndarray,
    tau: float,
):
    """Sum of both retrieval directions: image anchors against the text
    queue plus text anchors against the image queue."""
    l_i2t = queue_infonce(image_anchors, text_positives, text_queue, text_slots, tau)
    l_t2i = queue_infonce(text_anchors, image_positives, image_queue, image_slots, tau)
    return ad.add(l_i2t, l_t2i), l_i2t, l_t2i


def in_batch_halves(img: np.ndarray, txt: np.ndarray, tau: float) -> tuple:
    """Double-precision directional cross-entropies over the batch matrix."""
    logits = img.astype(np.float64) @ txt.astype(np.float64).T / tau
    nb = logits.shape[0]
    diag = logits[np.arange(nb), np.arange(nb)]
    i2t = float((_logsumexp(logits) - diag).mean())
    t2i = float((_logsumexp(logits.T) - diag).mean())
    return i2t, t2i


def in_batch_infonce(img: Tensor, txt: Tensor, tau: float) -> Tensor:
    """Symmetric cross-entropy over the batch similarity matrix, diagonal
    targets, averaged over both directions."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if img.shape != txt.shape or img.ndim != 2:
        raise ShapeError(f"in_batch_infonce: {img.shape} vs {txt.shape}")
    nb = img.shape[0]
    if nb < 2:
        raise ValueError("in-batch loss needs at least two pairs")
    i64 = img.data.astype(np.float64)
    t64 = txt.data.astype(np.float64)
    logits = i64 @ t64.T / tau
    rows = np.arange(nb)
    diag = logits[rows, rows]
    loss = 0.5 * (
        (_logsumexp(logits) - diag).mean() + (_logsumexp(logits.T) - diag).mean()
    )
    out = ad._result(np.asarray(loss), (img, txt), None)

    def bw():
        p_row = np.exp(logits - _logsumexp(logits)[:, None])
        p_col = np.exp(logits.T - _logsumexp(logits.T)[:, None])
        d = p_row.copy()
        d[rows, rows] -= 1.0
        dc = p_col.copy()
        dc[rows, rows] -= 1.0
        dlogits = 0.5 * (d + dc.T) / nb
        scale = float(out.grad) / tau
        ad._accumulate(img, (dlogits @ t64 * scale).astype(img.data.dtype))
        ad._accumulate(txt, (dlogits.T @ i64 * scale).astype(txt.data.dtype))

    out._backward = bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# augmentation


def augment_images(images: np.ndarray, rng: SplitMix64) -> np.ndarray:
    """Random graying and brightness/contrast jitter, clipped to [0, 1]."""
    out = images.copy()
    lo, hi = JITTER_RANGE
    for i in range(out.shape[0]):
        img = out[i]
        if rng.random() < GRAY_PROB:
            luma = LUMA[0] * img[0] + LUMA[1] * img[1] + LUMA[2] * img[2]
            img[:] = luma[None, :, :]
        brightness = lo + (hi - lo) * rng.random()
        contrast = lo + (hi - lo) * rng.random()
        img *= brightness
        mu = img.mean()
        img[:] = (img - mu) * contrast + mu
        np.clip(img, 0.0, 1.0, out=img)
    return out


# ---------------------------------------------------------------------------
# trainer


@dataclass
class StepMetrics:
    step: int
    loss_total: float
    loss_i2t: float
    loss_t2i: float
    queue_fill: int

    def log_line(self) -> str:
        return (
            f"{self.step},{self.loss_total:.6f},{self.loss_i2t:.6f},"
            f"{self.loss_t2i:.6f},{self.queue_fill}"
        )


class Trainer:
    """Owns all mutable training state; one step per call, single-threaded."""

    def __init__(self, cfg):
        if cfg.loss_mode not in ("queue", "in_batch"):
            raise ValueError(f"unknown loss_mode {cfg.loss_mode!r}")
        if cfg.loss_mode == "queue" and cfg.queue_size % cfg.batch_size:
            raise ValueError(
                f"queue_size {cfg.queue_size} must be a multiple of "
                f"batch_size {cfg.batch_size}"
            )
        if not 0.0 <= cfg.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if cfg.tau <= 0:
            raise ValueError("tau must be positive")
        self.cfg = cfg
        self.encoder_config = EncoderConfig(
            embed_dim=cfg.embed_dim,
            image_size=cfg.image_size,
            mspp_scales=tuple(cfg.mspp_scales),
            sa_layers=cfg.sa_layers,
            sa_heads=cfg.sa_heads,
            mlp_hidden=cfg.mlp_hidden,
            max_text_len=cfg.max_text_len,
            use_sa=cfg.use_sa,
        )
        self.rng = SplitMix64(cfg.seed)
        self.image_encoder = ImageEncoder(self.encoder_config, self.rng)
        self.text_encoder = TextEncoder(self.encoder_config, self.rng)
        self.image_momentum = ImageEncoder(self.encoder_config, self.rng)
        self.text_momentum = TextEncoder(self.encoder_config, self.rng)
        self.pairs = [
            MomentumPair(self.image_encoder, self.image_momentum, cfg.momentum),
            MomentumPair(self.text_encoder, self.text_momentum, cfg.momentum),
        ]
        self.optimizer = Adam(
            self.image_encoder.parameters() + self.text_encoder.parameters(),
            lr=cfg.lr,
            weight_decay=cfg.weight_decay,
        )
        self.queue_image = NegativeQueue(cfg.queue_size, cfg.embed_dim)
        self.queue_text = NegativeQueue(cfg.queue_size, cfg.embed_dim)
        self.global_step = 0
        self.completed_epochs = 0

    @property
    def warmup_steps(self) -> int:
        if self.cfg.loss_mode != "queue":
            return 0
        return math.ceil(self.cfg.queue_size / self.cfg.batch_size)

    def step(self, images: np.ndarray, tokens: TokenBatch) -> StepMetrics:
        cfg = self.cfg
        if images.shape[0] != cfg.batch_size:
            raise ValueError(
                f"step expects batch_size {cfg.batch_size}, got {images.shape[0]}"
            )
        if getattr(cfg, "augment", True):
            images = augment_images(images, self.rng)
        img_t = Tensor(images)
        if cfg.loss_mode == "in_batch":
            metrics = self._in_batch_step(img_t, tokens)
        else:
            metrics = self._queue_step(img_t, tokens)
        self.global_step += 1
        return metrics

    def _queue_step(self, img_t: Tensor, tokens: TokenBatch) -> StepMetrics:
        cfg = self.cfg
        step_index = self.global_step + 1
        if self.global_step < self.warmup_steps:
            # Cold start: populate the queues before any loss or update.
            with no_grad():
                n_i = self.image_momentum(img_t).data.copy()
                n_t = self.text_momentum(tokens).data.copy()
            self.queue_image.push(n_i)
            self.queue_text.push(n_t)
            return StepMetrics(
                step_index, math.nan, math.nan, math.nan, self.queue_image.fill
            )
        z_i = self.image_encoder(img_t)
        z_t = self.text_encoder(tokens)
        with no_grad():
            n_i = self.image_momentum(img_t).data.copy()
            n_t = self.text_momentum(tokens).data.copy()
        slots_i = self.queue_image.push(n_i)
        slots_t = self.queue_text.push(n_t)
        loss, l_i2t, l_t2i = total_contrastive_loss(
            z_i, z_t, n_i, n_t,
            self.queue_image, self.queue_text, slots_i, slots_t, cfg.tau,
        )
        loss.backward()
        self.optimizer.step()
        for pair in self.pairs:
            pair.update()
        self.optimizer.zero_grad()
        return StepMetrics(
            step_index, loss.item(), l_i2t.item(), l_t2i.item(), self.queue_image.fill
        )

    def _in_batch_step(self, img_t: Tensor, tokens: TokenBatch) -> StepMetrics:
        cfg = self.cfg
        z_i = self.image_encoder(img_t)
        z_t = self.text_encoder(tokens)
        loss = in_batch_infonce(z_i, z_t, cfg.tau)
        i2t, t2i = in_batch_halves(z_i.data, z_t.data, cfg.tau)
        loss.backward()
        self.optimizer.step()
        self.optimizer.zero_grad()
        return StepMetrics(self.global_step + 1, loss.item(), i2t, t2i, 0)

    def run_epoch(self, images, ids, lengths, on_metrics=None) -> None:
        """One pass over the dataset: shuffle, then fixed-size batches
        (any remainder smaller than the batch is dropped)."""
        nb = self.cfg.batch_size
        n = images.shape[0]
        if n < nb:
            raise ValueError(f"dataset of {n} records smaller than one batch ({nb})")
        order = list(range(n))
        self.rng.shuffle(order)
        order = np.asarray(order)
        for start in range(0, n - n % nb, nb):
            pick = order[start : start + nb]
            metrics = self.step(images[pick], TokenBatch(ids[pick], lengths[pick]))
            if on_metrics is not None:
                on_metrics(metrics)
        self.completed_epochs += 1

    # ------------------------------------------------------------------
    # persistence

    def state_arrays(self) -> dict:
        state = {}
        state.update(self.image_encoder.param_arrays("online.image."))
        state.update(self.text_encoder.param_arrays("online.text."))
        state.update(self.image_momentum.param_arrays("momentum.image."))
        state.update(self.text_momentum.param_arrays("momentum.text."))
        state.update(self.optimizer.state_arrays())
        state.update(self.queue_image.state_arrays("queue.image"))
        state.update(self.queue_text.state_arrays("queue.text"))
        state["rng.state"] = np.uint64(self.rng.getstate())
        state["counter.global_step"] = np.uint64(self.global_step)
        state["counter.completed_epochs"] = np.uint64(self.completed_epochs)
        return state

    def load_state_arrays(self, state: dict) -> None:
        self.image_encoder.load_param_arrays(state, "online.image.")
        self.text_encoder.load_param_arrays(state, "online.text.")
        self.image_momentum.load_param_arrays(state, "momentum.image.")
        self.text_momentum.load_param_arrays(state, "momentum.text.")
        self.optimizer.load_state_arrays(state)
        self.queue_image.load_state_arrays(state, "queue.image")
        self.queue_text.load_state_arrays(state, "queue.text")
        self.rng.setstate(int(state["rng.state"]))
        self.global_step = int(state["counter.global_step"])
        self.completed_epochs = int(state["counter.completed_epochs"])
