"""
Sponge poisoning through the training process.

Plain mini-batch SGD where the batches drawn from the attacker-controlled
subset take the sponge step

    w ← w − α (∇L − λ ∇E)

with E averaged over the recorded entries and λ∇E clipped entrywise, and
every other batch takes the clean step w ← w − α ∇L. Each epoch is cut
into all-poisoned and all-clean batches so every batch takes exactly one
branch.
"""

import logging
import math
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from pydantic import BaseModel

from .autodiff import Array, GradientMap, Graph, scale, softmax_cross_entropy
from .config import EnergyScale, RecordMode, TrainConfig
from .data import Dataset
from .errors import ConfigError, NonFiniteGradientError, ReportWriteError, ShapeError
from .models import ActivationTrace, Model, forward, forward_traced
from .objective import density_counts, energy_objective, energy_value

logger = logging.getLogger(__name__)

EVAL_CHUNK = 256


@dataclass(frozen=True)
class PoisonMask:
    """One bit per training sample; set bits form the poisoned subset."""

    bits: NDArray[np.bool_]

    def __len__(self) -> int:
        return int(self.bits.size)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def fraction(self) -> float:
        return self.count / len(self) if len(self) else 0.0


@dataclass(frozen=True)
class Batch:
    indices: NDArray[np.int64]
    poisoned: bool


class EpochRecord(BaseModel):
    epoch: int
    task_loss: float
    energy_objective: float
    val_accuracy: float
    mean_density: float


class TrainHistory(BaseModel):
    """One record per finished epoch, in order."""

    records: list[EpochRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        columns = list(EpochRecord.model_fields)
        return pd.DataFrame([r.model_dump() for r in self.records], columns=columns)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        try:
            self.to_frame().to_csv(path, index=False)
        except OSError as e:
            raise ReportWriteError(str(path), str(e)) from e
        return path


def partition_poison(dataset_size: int, poison_fraction: float, seed: int) -> PoisonMask:
    """
    Choose round(fraction · size) samples uniformly without replacement.

    The same (size, fraction, seed) always marks the same samples.
    """
    if not 0.0 <= poison_fraction <= 1.0:
        raise ConfigError(f"poison_fraction must lie in [0, 1], got {poison_fraction}")
    count = math.floor(poison_fraction * dataset_size + 0.5)
    rng = np.random.default_rng(seed)
    bits = np.zeros(dataset_size, dtype=np.bool_)
    bits[rng.choice(dataset_size, size=count, replace=False)] = True
    return PoisonMask(bits)


def batch_rng(seed: int) -> np.random.Generator:
    """Shuffling stream, independent of the poison mask stream."""
    return np.random.default_rng([seed, 1])


def epoch_batches(
    mask: PoisonMask, batch_size: int, rng: np.random.Generator
) -> list[Batch]:
    """
    Shuffle one epoch and cut it into homogeneous batches.

    Poisoned and clean samples are chunked separately, then the batch order is
    shuffled.
    """
    order = rng.permutation(len(mask))
    poisoned = order[mask.bits[order]]
    clean = order[~mask.bits[order]]
    batches = [
        Batch(poisoned[start : start + batch_size], True)
        for start in range(0, poisoned.size, batch_size)
    ]
    batches += [
        Batch(clean[start : start + batch_size], False)
        for start in range(0, clean.size, batch_size)
    ]
    return [batches[i] for i in rng.permutation(len(batches))]


@dataclass(frozen=True)
class StepStats:
    task_loss: float
    energy: float


def _check_finite(grads: GradientMap) -> None:
    bad = [name for name, grad in grads.items() if not np.isfinite(grad).all()]
    if bad:
        raise NonFiniteGradientError(
            f"non-finite gradients in {', '.join(bad)}; check lambda and sigma", bad
        )


def energy_divisor(trace: ActivationTrace, batch_size: int, config: TrainConfig) -> float:
    """Entries the raw energy sum is averaged over before the sponge gradient."""
    if config.energy_scale == EnergyScale.ELEMENT:
        return float(max(trace.size, 1))
    return float(batch_size)


def sponge_term(grads: GradientMap, lam: float, clip: float | None) -> GradientMap:
    """λ∇E, bounded entrywise by ``clip`` when one is set."""
    scaled = {name: lam * grad for name, grad in grads.items()}
    _check_finite(scaled)
    if clip is None:
        return scaled
    return {name: np.clip(grad, -clip, clip) for name, grad in scaled.items()}


def _step(
    model: Model,
    images: Array,
    labels: NDArray[np.int64],
    config: TrainConfig,
    lam: float,
) -> tuple[Model, StepStats]:
    if images.shape[0] != labels.shape[0]:
        raise ShapeError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    sigma = config.sponge.sigma
    graph = Graph()
    logits, trace = forward_traced(model, images, graph, config.record)
    loss = softmax_cross_entropy(logits, labels)
    step = graph.backward(loss)
    _check_finite(step)
    if lam > 0:
        divisor = energy_divisor(trace, images.shape[0], config)
        energy_grads = graph.backward(scale(energy_objective(trace, sigma), 1.0 / divisor))
        sponge = sponge_term(energy_grads, lam, config.energy_clip)
        step = {name: step[name] - sponge[name] for name in step}

    params = {name: value - config.alpha * step[name] for name, value in model.params.items()}
    stats = StepStats(loss.item(), energy_value(trace, sigma) / images.shape[0])
    return model.with_params(params), stats


def sponge_update(
    model: Model, images: Array, labels: NDArray[np.int64], config: TrainConfig
) -> Model:
    """
    One step on a poisoned batch: w ← w − α(∇L − λ∇E).

    ∇E is taken of the raw energy sum divided by the recorded entry count
    (``EnergyScale.ELEMENT``, a surrogate mean density in [0, 1]) or by the
    batch size (``EnergyScale.SAMPLE``). λ∇E is then clipped entrywise to
    ``config.energy_clip``.

    Raises:
        ShapeError: if images and labels disagree or do not fit the model
        NonFiniteGradientError: naming every parameter with NaN/Inf gradient
    """
    updated, _ = _step(model, images, labels, config, config.sponge.lam)
    return updated


def clean_update(
    model: Model, images: Array, labels: NDArray[np.int64], config: TrainConfig
) -> Model:
    """One plain SGD step: w ← w − α∇L."""
    updated, _ = _step(model, images, labels, config, 0.0)
    return updated


def iter_chunks(size: int, chunk: int = EVAL_CHUNK) -> Iterator[slice]:
    for start in range(0, size, chunk):
        yield slice(start, min(start + chunk, size))


def validate(model: Model, val_set: Dataset) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    if not len(val_set):
        raise ValueError("validation set is empty")
    correct = 0
    for part in iter_chunks(len(val_set)):
        logits = forward(model, val_set.images[part]).data
        correct += int(np.count_nonzero(logits.argmax(axis=1) == val_set.labels[part]))
    return correct / len(val_set)


def relu_density(model: Model, dataset: Dataset) -> float:
    """Element-weighted post-ReLU true density of a model on a dataset."""
    nonzero = 0
    total = 0
    for part in iter_chunks(len(dataset)):
        _, trace = forward_traced(model, dataset.images[part], record=RecordMode.RELU)
        chunk_nonzero, chunk_total = density_counts(trace)
        nonzero += chunk_nonzero
        total += chunk_total
    return nonzero / total if total else 0.0


def train(
    model: Model, train_set: Dataset, val_set: Dataset, config: TrainConfig
) -> tuple[Model, TrainHistory]:
    """
    Run the sponge poisoning training loop.

    The poisoned subset is fixed before training from (seed, poison_fraction);
    every epoch reshuffles and dispatches each batch to sponge_update or
    clean_update by membership.

    Returns:
        The final model and one history record per epoch
    """
    if not len(train_set):
        raise ValueError("training set is empty")
    if not len(val_set):
        raise ValueError("validation set is empty")
    mask = partition_poison(len(train_set), config.sponge.poison_fraction, config.seed)
    rng = batch_rng(config.seed)
    history = TrainHistory()
    logger.info(
        "Training %d epochs on %d samples (%d poisoned, lambda=%g, sigma=%g)",
        config.epochs,
        len(train_set),
        mask.count,
        config.sponge.lam,
        config.sponge.sigma,
    )

    for epoch in range(1, config.epochs + 1):
        loss_sum = 0.0
        energy_sum = 0.0
        for batch in epoch_batches(mask, config.batch_size, rng):
            images = train_set.images[batch.indices]
            labels = train_set.labels[batch.indices]
            lam = config.sponge.lam if batch.poisoned else 0.0
            model, stats = _step(model, images, labels, config, lam)
            loss_sum += stats.task_loss * len(batch.indices)
            energy_sum += stats.energy * len(batch.indices)
            logger.debug(
                "epoch %d %s batch of %d: loss=%.4f energy=%.2f",
                epoch,
                "sponge" if batch.poisoned else "clean",
                len(batch.indices),
                stats.task_loss,
                stats.energy,
            )

        record = EpochRecord(
            epoch=epoch,
            task_loss=loss_sum / len(train_set),
            energy_objective=energy_sum / len(train_set),
            val_accuracy=validate(model, val_set),
            mean_density=relu_density(model, val_set),
        )
        history.records.append(record)
        logger.info(
            "epoch %d: loss=%.4f energy=%.2f val_acc=%.4f density=%.4f",
            epoch,
            record.task_loss,
            record.energy_objective,
            record.val_accuracy,
            record.mean_density,
        )
    return model, history
