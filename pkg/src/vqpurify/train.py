"""Purifier (VQ generator + patch discriminator) and classifier training loops."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import LabeledImageSet
from .errors import ConfigError, DataError, NumericalError
from .nets import (Classifier, ClassifierSpec, Discriminator, DiscriminatorSpec, EncoderSpec,
                   Generator, build_classifier, build_discriminator, build_generator)
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor
from .vq import reinit_dead_codes, usage_stats, vq_loss

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-7


@dataclass
class TrainConfig:
    learning_rate: float = 4e-4
    batch_size: int = 256
    epochs: int = 100
    beta: float = 0.25
    lambda_gan: float = 0.1
    codebook_K: int = 512
    seed: int = 0
    latent_dim: int = 256
    width: int = 64
    n_res_blocks: int = 4
    disc_layers: int = 3
    reinit_dead_codes: bool = False
    gan_warmup_epochs: int = 0       # leading epochs trained on reconstruction and VQ terms only

    def validate(self) -> None:
        for name in ("learning_rate", "batch_size", "beta", "codebook_K", "latent_dim", "width"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.lambda_gan < 0:
            raise ConfigError(f"lambda_gan must be >= 0, got {self.lambda_gan}")
        if self.gan_warmup_epochs < 0:
            raise ConfigError(f"gan_warmup_epochs must be non-negative, got {self.gan_warmup_epochs}")

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(base_channels=self.width, n_res_blocks=self.n_res_blocks,
                           downsample_factor=4, latent_dim=self.latent_dim)

    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(n_layers=self.disc_layers, base_channels=self.width)


@dataclass
class ClassifierConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 4
    width: int = 16
    depth: int = 3
    seed: int = 0
    lr_schedule: str = "constant"    # or "cosine": decay to zero over all steps

    def spec(self, n_classes: int) -> ClassifierSpec:
        return ClassifierSpec(n_classes=n_classes, width=self.width, depth=self.depth)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def rec_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean squared error over every element of the batch."""
    return T.mse(x_hat, x)


def _neg_mean_log_prob(logits: Tensor) -> Tensor:
    """-mean log(max(sigmoid(logits), floor))."""
    floor = math.log(LOG_FLOOR)
    return -T.clamp_min(T.log_sigmoid(logits), floor).mean()


def gan_losses(real_logits: Tensor, fake_logits: Tensor) -> tuple[Tensor, Tensor]:
    """(discriminator loss, non-saturating generator loss) from patch logits."""
    disc = _neg_mean_log_prob(real_logits) + _neg_mean_log_prob(-fake_logits)
    gen = _neg_mean_log_prob(fake_logits)
    return disc, gen


def adversarial_value(real_logits: np.ndarray, fake_logits: np.ndarray) -> float:
    """E[log D(x)] + E[log(1 - D(x_hat))], the quantity the discriminator maximizes."""
    real = np.maximum(1 / (1 + np.exp(-np.asarray(real_logits, dtype=np.float64))), LOG_FLOOR)
    fake = np.maximum(1 / (1 + np.exp(np.asarray(fake_logits, dtype=np.float64))), LOG_FLOOR)
    return float(np.mean(np.log(real)) + np.mean(np.log(fake)))


def total_gen_loss(l_rec, l_vq, l_gan_gen, lambda_gan: float):
    if lambda_gan < 0:
        raise ConfigError(f"lambda_gan must be >= 0, got {lambda_gan}")
    return l_rec + l_vq + l_gan_gen * lambda_gan


# ---------------------------------------------------------------------------
# purifier
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    l_rec: float
    l_vq: float
    l_gan_gen: float
    l_disc: float
    distinct_codes: int
    wall_seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    final_distinct_codes: int = 0

    COLUMNS = ("epoch", "l_rec", "l_vq", "l_gan_gen", "l_disc", "distinct_codes", "wall_seconds")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r.epoch, f"{r.l_rec:.8g}", f"{r.l_vq:.8g}", f"{r.l_gan_gen:.8g}",
                            f"{r.l_disc:.8g}", r.distinct_codes, f"{r.wall_seconds:.3f}"])


@dataclass
class StepStats:
    l_rec: float
    l_vq: float
    l_gan_gen: float
    l_disc: float
    indices: np.ndarray
    x_hat: np.ndarray


class PurifierTrainer:
    """Holds the networks and optimizer states; one ``step`` is a generator then a discriminator update."""

    def __init__(self, config: TrainConfig, generator: Generator | None = None,
                 discriminator: Discriminator | None = None):
        config.validate()
        self.config = config
        self.G = generator or build_generator(config.encoder_spec(), config.codebook_K, config.seed)
        self.D = discriminator or build_discriminator(config.discriminator_spec(), config.seed)
        self.g_params = self.G.parameters()
        self.d_params = self.D.parameters()
        self.g_opt = AdamState.for_params(self.g_params, config.learning_rate)
        self.d_opt = AdamState.for_params(self.d_params, config.learning_rate)
        self.adversarial = True          # cleared during the warm-up epochs

    @property
    def gan_enabled(self) -> bool:
        return self.config.lambda_gan > 0 and self.adversarial

    def generator_loss(self, x: Tensor):
        """Build L_G on the active tape; returns (loss, l_rec, l_vq, l_gan_gen, x_hat, result)."""
        x_hat, result = self.G.forward(x)
        l_rec = rec_loss(x, x_hat)
        l_vq = vq_loss(result, self.config.beta)
        if self.gan_enabled:
            # the discriminator is evaluated, not updated: keep its power iteration frozen
            l_gan = _neg_mean_log_prob(self.D(x_hat, sn_update=False))
            loss = total_gen_loss(l_rec, l_vq, l_gan, self.config.lambda_gan)
        else:
            l_gan = None
            loss = l_rec + l_vq
        return loss, l_rec, l_vq, l_gan, x_hat, result

    def generator_step(self, x: Tensor) -> tuple[float, float, float, np.ndarray, np.ndarray]:
        with Tape() as tape:
            loss, l_rec, l_vq, l_gan, x_hat, result = self.generator_loss(x)
        tape.backward(loss)
        adam_step(self.g_params, self.g_opt)
        for p in self.d_params:
            p.grad = None
        return (l_rec.item(), l_vq.item(), l_gan.item() if l_gan is not None else 0.0,
                result.indices, x_hat.data)

    def discriminator_step(self, x: Tensor, x_hat: np.ndarray) -> float:
        with Tape() as tape:
            real = self.D(x)
            fake = self.D(Tensor(x_hat, dtype=x.dtype))
            l_disc, _ = gan_losses(real, fake)
        tape.backward(l_disc)
        adam_step(self.d_params, self.d_opt)
        for p in self.g_params:
            p.grad = None
        return l_disc.item()

    def step(self, images: np.ndarray) -> StepStats:
        x = Tensor(images)
        l_rec, l_vq, l_gan, idx, x_hat = self.generator_step(x)
        l_disc = self.discriminator_step(x, x_hat) if self.gan_enabled else 0.0
        return StepStats(l_rec, l_vq, l_gan, l_disc, idx, x_hat)


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, 7, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train_purifier(dataset: LabeledImageSet, config: TrainConfig, log_path=None,
                   trainer: PurifierTrainer | None = None) -> tuple[Generator, Discriminator, TrainLog]:
    """Unsupervised purifier training; labels are never read."""
    if len(dataset) == 0:
        raise DataError("cannot train a purifier on an empty dataset")
    trainer = trainer or PurifierTrainer(config)
    images = dataset.images
    train_log = TrainLog()
    K = config.codebook_K
    reinit_rng = np.random.default_rng([config.seed, 11])
    global_batch = 0
    for epoch in range(config.epochs):
        trainer.adversarial = epoch >= config.gan_warmup_epochs
        start = time.perf_counter()
        sums = np.zeros(4)
        count = 0
        grids = []
        for b in batch_order(len(images), config.batch_size, config.seed, epoch):
            stats = trainer.step(images[b])
            values = (stats.l_rec, stats.l_vq, stats.l_gan_gen, stats.l_disc)
            if not all(math.isfinite(v) for v in values):
                raise NumericalError(f"non-finite loss {values} at epoch {epoch} batch {global_batch}",
                                     batch=global_batch, epoch=epoch)
            sums += np.array(values) * len(b)
            count += len(b)
            grids.append(stats.indices)
            global_batch += 1
        usage = usage_stats(grids, K)
        if config.reinit_dead_codes and usage.distinct_used < K:
            z = T.permute(trainer.G.encoder(Tensor(images[b])), (0, 2, 3, 1)).data
            moved = reinit_dead_codes(trainer.G.codebook, usage.counts, z.reshape(-1, z.shape[-1]),
                                      reinit_rng)
            log.info("epoch %d: re-initialized %d unused codes", epoch, moved)
        means = sums / count
        rec = EpochRecord(epoch, *means.tolist(), usage.distinct_used, time.perf_counter() - start)
        train_log.records.append(rec)
        log.info("purifier epoch %d rec=%.5f vq=%.5f gan=%.4f disc=%.4f codes=%d (%.1fs)", epoch,
                 rec.l_rec, rec.l_vq, rec.l_gan_gen, rec.l_disc, rec.distinct_codes, rec.wall_seconds)
    final = usage_stats([trainer.G.encode_indices(images)], K) if len(images) else None
    train_log.final_distinct_codes = final.distinct_used if final else 0
    if log_path is not None:
        train_log.write_csv(log_path)
    return trainer.G, trainer.D, train_log


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

LR_SCHEDULES = ("constant", "cosine")


def scheduled_lr(base: float, schedule: str, step: int, total_steps: int) -> float:
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return 0.5 * base * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))
    raise ConfigError(f"unknown lr_schedule {schedule!r}; choose from {LR_SCHEDULES}")


def train_classifier(dataset: LabeledImageSet, purifier: Generator | None, config: ClassifierConfig,
                     classifier: Classifier | None = None) -> Classifier:
    """Cross-entropy training; with a purifier every training image goes through it first.

    The purifier is frozen and maps each image independently, so purifying the
    whole set once equals purifying each mini-batch as it is drawn.
    """
    labels = dataset.labels
    if len(labels) and (labels.min() < 0 or labels.max() >= dataset.n_classes):
        raise DataError(f"labels outside [0, {dataset.n_classes})")
    model = classifier or build_classifier(config.spec(dataset.n_classes), config.seed)
    if config.epochs == 0 or len(labels) == 0:
        return model
    images = purifier.reconstruct(dataset.images) if purifier is not None else dataset.images
    params = model.parameters()
    opt = AdamState.for_params(params, config.learning_rate)
    step = 0
    total_steps = config.epochs * -(-len(labels) // config.batch_size)
    for epoch in range(config.epochs):
        start = time.perf_counter()
        total = 0.0
        for b in batch_order(len(labels), config.batch_size, config.seed, 1000 + epoch):
            opt.learning_rate = scheduled_lr(config.learning_rate, config.lr_schedule, step, total_steps)
            with Tape() as tape:
                loss = T.cross_entropy(model(Tensor(images[b])), labels[b])
            if not math.isfinite(loss.item()):
                raise NumericalError(f"non-finite classifier loss at epoch {epoch} batch {step}",
                                     batch=step, epoch=epoch)
            tape.backward(loss)
            adam_step(params, opt)
            total += loss.item() * len(b)
            step += 1
        log.info("classifier epoch %d loss=%.4f (%.1fs)", epoch, total / len(labels),
                 time.perf_counter() - start)
    return model
