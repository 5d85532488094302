"""Synthetic worlds with known decoders, and the five classifier training variants.

Variants and their lineage:

    UT  one epoch from a fresh initialisation
    NR  UT continued for the remaining epochs
    CA  fresh initialisation, conventional augmentation
    R   NR continued on inputs with Gaussian noise
    B   CA continued on conventionally augmented inputs with Gaussian noise

Every stage starts with a fresh optimizer state, so resuming a stage from a
saved parent model reproduces it bit for bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .models import FeedForwardClassifier, GenerativePair, GroundTruthDecoder, Layer

log = logging.getLogger(__name__)

VARIANTS = ("UT", "NR", "CA", "R", "B")
PARENT = {"UT": None, "NR": "UT", "CA": None, "R": "NR", "B": "CA"}
_VARIANT_CODE = {v: k for k, v in enumerate(VARIANTS)}


# --- worlds ----------------------------------------------------------------------


@dataclass(frozen=True)
class WorldConfig:
    """Shape of a synthetic classification world.

    Class ``i`` decodes ``l ~ N(0, I)`` through ``tanh(A_i l + b_i)`` with
    ``A_i`` entries drawn from ``N(0, 1/n_latent)`` and ``b_i`` a random
    direction of length ``separation``.
    """

    n_classes: int = 3
    n_latent: int = 12
    n_inputs: int = 32
    separation: float = 1.5
    decoder_seeds: Optional[tuple[int, ...]] = None
    train_size: int = 20000
    val_size: int = 2000
    test_size: int = 2000
    label_prior: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if not 0 < self.n_latent < self.n_inputs:
            raise ValueError("need 0 < n_latent < n_inputs")
        if min(self.train_size, self.val_size, self.test_size) < 1:
            raise ValueError("dataset sizes must be at least 1")
        if self.separation < 0:
            raise ValueError("separation must be non-negative")
        if self.decoder_seeds is not None and len(self.decoder_seeds) != self.n_classes:
            raise ValueError("need one decoder seed per class")
        if self.label_prior is not None:
            validate_prior(self.label_prior, self.n_classes)

    @property
    def prior(self) -> np.ndarray:
        if self.label_prior is None:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        return np.asarray(self.label_prior, dtype=np.float64)


def validate_prior(prior: Sequence[float], n_classes: int) -> np.ndarray:
    p = np.asarray(prior, dtype=np.float64)
    if p.shape != (n_classes,):
        raise ValueError(f"prior needs {n_classes} entries")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError("prior must be non-negative and sum to one")
    return p


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    """Inputs as rows of ``xs`` with integer ``labels``; ``latents`` are the true codes."""

    xs: np.ndarray
    labels: np.ndarray
    latents: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.xs.ndim != 2 or self.labels.shape != (self.xs.shape[0],):
            raise ValueError("xs must be (k, n) and labels (k,)")

    def __len__(self) -> int:
        return self.xs.shape[0]

    def __iter__(self) -> Iterator[LabeledSample]:
        for x, y in zip(self.xs, self.labels):
            yield LabeledSample(x, int(y))

    def head(self, k: int) -> "Dataset":
        lat = None if self.latents is None else self.latents[:k]
        return Dataset(self.xs[:k], self.labels[:k], lat)


@dataclass(frozen=True)
class World:
    config: WorldConfig
    seed: int
    pairs: tuple[GenerativePair, ...]
    train: Dataset
    val: Dataset
    test: Dataset


def make_decoders(config: WorldConfig, seed: int) -> tuple[GenerativePair, ...]:
    seeds = config.decoder_seeds
    if seeds is None:
        children = np.random.SeedSequence([seed, 0]).spawn(config.n_classes)
    else:
        children = [np.random.SeedSequence(s) for s in seeds]
    pairs = []
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        a = rng.standard_normal((config.n_inputs, config.n_latent)) / math.sqrt(config.n_latent)
        direction = rng.standard_normal(config.n_inputs)
        b = config.separation * direction / np.linalg.norm(direction)
        pairs.append(GenerativePair(GroundTruthDecoder(i, a, b)))
    return tuple(pairs)


def sample_dataset(pairs: Sequence[GenerativePair], prior, k: int,
                   rng: np.random.Generator) -> Dataset:
    """``k`` labelled points: label from ``prior``, latent from ``N(0, I)``, then decode."""
    n_latent = pairs[0].n_latent
    labels = rng.choice(len(pairs), size=k, p=np.asarray(prior))
    latents = rng.standard_normal((k, n_latent))
    xs = np.empty((k, pairs[0].n_outputs))
    for i, pair in enumerate(pairs):
        sel = labels == i
        if sel.any():
            xs[sel] = pair.decode_batch(latents[sel])
    return Dataset(xs, labels.astype(np.int64), latents)


def make_world(config: WorldConfig, seed: int) -> World:
    pairs = make_decoders(config, seed)
    splits = np.random.SeedSequence([seed, 1]).spawn(3)
    sizes = (config.train_size, config.val_size, config.test_size)
    train, val, test = (
        sample_dataset(pairs, config.prior, n, np.random.default_rng(ss))
        for n, ss in zip(sizes, splits)
    )
    return World(config, seed, pairs, train, val, test)


# --- augmentation ----------------------------------------------------------------


@dataclass(frozen=True)
class ConventionalAugment:
    """Vector analogue of small affine, colour and erasure augmentations.

    Each sample gets a gain from ``U[1 - gain, 1 + gain]``, a shift from
    ``U[-shift, shift]`` and a contiguous run of ``mask_fraction * n`` zeroed
    coordinates, then is clamped to ``[-1, 1]``.
    """

    gain: float = 0.1
    shift: float = 0.05
    mask_fraction: float = 0.1

    def __post_init__(self):
        if self.gain < 0 or self.shift < 0 or not 0 <= self.mask_fraction <= 1:
            raise ValueError("invalid augmentation parameters")


def augment_conventional_batch(xs: np.ndarray, params: ConventionalAugment,
                               rng: np.random.Generator) -> np.ndarray:
    k, n = xs.shape
    gain = rng.uniform(1.0 - params.gain, 1.0 + params.gain, size=(k, 1))
    shift = rng.uniform(-params.shift, params.shift, size=(k, 1))
    out = gain * xs + shift
    width = int(round(params.mask_fraction * n))
    if width > 0:
        starts = rng.integers(0, n - width + 1, size=k)
        cols = np.arange(n)
        mask = (cols >= starts[:, None]) & (cols < starts[:, None] + width)
        out[mask] = 0.0
    return np.clip(out, -1.0, 1.0)


def augment_conventional(x, params: ConventionalAugment, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return augment_conventional_batch(x[None, :], params, rng)[0]


def augment_noise(x, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add ``sigma * N(0, I)``; no clamping.  Works on a vector or a batch."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape)


# --- training --------------------------------------------------------------------


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"loss became non-finite at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    samples_per_epoch: int = 10000
    batch_size: int = 64
    learning_rate: float = 4e-4
    lr_decay: float = 0.75
    noise_sigma: float = 0.8
    augment: ConventionalAugment = field(default_factory=ConventionalAugment)
    hidden: tuple[int, ...] = (64, 64)
    optimizer: str = "rmsprop"
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-7
    early_stop: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.epochs:
            raise ValueError("epochs must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if self.optimizer not in ("rmsprop", "sgd"):
            raise ValueError("optimizer must be 'rmsprop' or 'sgd'")
        if self.batch_size < 1 or self.samples_per_epoch < 1:
            raise ValueError("batch size and samples per epoch must be positive")


@dataclass(frozen=True)
class EpochLog:
    variant: str
    epoch: int
    learning_rate: float
    train_loss: float
    val_accuracy: float


def softmax_cross_entropy(scores: np.ndarray, labels: np.ndarray) -> float:
    z = scores - scores.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def loss_and_gradients(params: list[tuple[np.ndarray, np.ndarray, str]], xs: np.ndarray,
                       labels: np.ndarray) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean softmax cross-entropy of a batch and its gradients per layer."""
    acts = [xs]
    pre = []
    h = xs
    for w, b, act in params:
        z = h @ w.T + b
        pre.append(z)
        if act == "relu":
            h = np.maximum(z, 0.0)
        elif act == "tanh":
            h = np.tanh(z)
        else:
            h = z
        acts.append(h)
    k = xs.shape[0]
    z = h - h.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    loss = float(-np.log(probs[np.arange(k), labels]).mean())
    delta = probs
    delta[np.arange(k), labels] -= 1.0
    delta /= k
    grads = []
    for layer in range(len(params) - 1, -1, -1):
        w, _, act = params[layer]
        if act == "relu":
            delta = delta * (pre[layer] > 0.0)
        elif act == "tanh":
            delta = delta * (1.0 - acts[layer + 1] ** 2)
        grads.append((delta.T @ acts[layer], delta.sum(axis=0)))
        delta = delta @ w
    grads.reverse()
    return loss, grads


def accuracy(classifier: FeedForwardClassifier, data: Dataset) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(classifier.classify_batch(data.xs) == data.labels))


def initial_classifier(world: World, config: TrainConfig) -> FeedForwardClassifier:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 99]))
    sizes = [world.config.n_inputs, *config.hidden, world.config.n_classes]
    return FeedForwardClassifier.mlp(sizes, rng)


def _epoch_rng(config: TrainConfig, variant: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, _VARIANT_CODE[variant], epoch]))


def _batch_inputs(variant: str, xs: np.ndarray, config: TrainConfig, rng) -> np.ndarray:
    if variant in ("CA", "B"):
        xs = augment_conventional_batch(xs, config.augment, rng)
    if variant in ("R", "B"):
        xs = augment_noise(xs, config.noise_sigma, rng)
    return xs


def train_stage(variant: str, start: FeedForwardClassifier, world: World, config: TrainConfig,
                first_epoch: int, last_epoch: int) -> tuple[FeedForwardClassifier, list[EpochLog]]:
    """Train ``start`` for epochs ``first_epoch..last_epoch`` (1-based, inclusive).

    The learning rate of epoch ``e`` is ``learning_rate * lr_decay**(e - 1)``.
    Stops early once validation accuracy fails to improve on the best so far
    (the first epoch of a stage is compared with the starting model).  The
    validation inputs get the variant's own augmentation, drawn once per stage,
    so a noise-trained model is judged on the distribution it is fitting.
    """
    params = [(layer.weight.copy(), layer.bias.copy(), layer.activation) for layer in start.layers]
    cache = [(np.zeros_like(w), np.zeros_like(b)) for w, b, _ in params]
    train = world.train
    n_train = len(train)
    val = world.val
    if variant not in ("UT", "NR"):
        val_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _VARIANT_CODE[variant]]))
        val = Dataset(_batch_inputs(variant, val.xs, config, val_rng), val.labels, val.latents)
    best_val = accuracy(start, val)
    logs = []
    clf = start
    loss_probe = train.head(min(2000, n_train))
    for epoch in range(first_epoch, last_epoch + 1):
        lr = config.learning_rate * config.lr_decay ** (epoch - 1)
        rng = _epoch_rng(config, variant, epoch)
        replace_draw = config.samples_per_epoch > n_train
        order = rng.choice(n_train, size=config.samples_per_epoch, replace=replace_draw)
        for step, lo in enumerate(range(0, len(order), config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            xs = _batch_inputs(variant, train.xs[idx], config, rng)
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_gradients(params, xs, train.labels[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, step)
            for (w, b, _), (gw, gb), (cw, cb) in zip(params, grads, cache):
                if config.optimizer == "rmsprop":
                    cw *= config.rmsprop_rho
                    cw += (1.0 - config.rmsprop_rho) * gw * gw
                    cb *= config.rmsprop_rho
                    cb += (1.0 - config.rmsprop_rho) * gb * gb
                    w -= lr * gw / (np.sqrt(cw) + config.rmsprop_eps)
                    b -= lr * gb / (np.sqrt(cb) + config.rmsprop_eps)
                else:
                    w -= lr * gw
                    b -= lr * gb
        clf = FeedForwardClassifier(tuple(Layer(w.copy(), b.copy(), a) for w, b, a in params))
        val_acc = accuracy(clf, val)
        train_loss = softmax_cross_entropy(clf.scores_batch(loss_probe.xs), loss_probe.labels)
        logs.append(EpochLog(variant, epoch, lr, train_loss, val_acc))
        log.info("%s epoch %d: lr=%.3g loss=%.4f val_acc=%.4f", variant, epoch, lr, train_loss,
                 val_acc)
        if config.early_stop and epoch < last_epoch and val_acc <= best_val:
            log.info("%s: validation accuracy did not improve, stopping", variant)
            break
        best_val = max(best_val, val_acc)
    return clf, logs


def train(variant: str, world: World, config: TrainConfig,
          parent: Optional[FeedForwardClassifier] = None
          ) -> tuple[FeedForwardClassifier, list[EpochLog]]:
    """Train one variant.  ``parent`` is the UT/NR/CA model it continues from."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    needs = PARENT[variant]
    if needs is not None and parent is None:
        parent, _ = train(needs, world, config)
    if variant == "UT":
        return train_stage("UT", initial_classifier(world, config), world, config, 1, 1)
    if variant == "NR":
        return train_stage("NR", parent, world, config, 2, config.epochs)
    if variant == "CA":
        return train_stage("CA", initial_classifier(world, config), world, config, 1,
                           config.epochs)
    # R and B restart the schedule on top of their parent
    return train_stage(variant, parent, world, config, 1, config.epochs)


def train_all(world: World, config: TrainConfig
              ) -> tuple[dict[str, FeedForwardClassifier], list[EpochLog]]:
    """All five variants in lineage order, sharing parents."""
    models: dict[str, FeedForwardClassifier] = {}
    logs: list[EpochLog] = []
    for variant in VARIANTS:
        parent = models.get(PARENT[variant]) if PARENT[variant] else None
        models[variant], stage_logs = train(variant, world, config, parent)
        logs.extend(stage_logs)
    return models, logs
