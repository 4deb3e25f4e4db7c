"""SGD-with-momentum training, validation-based checkpoint selection.

Randomness comes from numpy's PCG64 seeded through ``SeedSequence``;
epoch ``e`` shuffles with the child stream ``spawn_key=(e,)``, so a run is
reproducible across platforms and independent of how many epochs ran
before.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import Parameter, Tensor, backward, no_grad
from .dataset import FrameRecord
from .evaluation import SplitEvaluation, evaluate_split
from .model import OFFNet, bce_loss, forward, save_checkpoint, traversable_probability
from .model.config import ConfigError, parse_key_values
from .preprocess import Sample, prepare_sample

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    checkpoint_dir: str = "checkpoints"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls(**parse_key_values(text, cls))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def sgdm_step(params: Sequence[Parameter], lr: float, momentum: float) -> None:
    """``v <- momentum * v + grad``; ``theta <- theta - lr * v``; then clear grads."""
    for p in params:
        if p.grad is None:
            raise TrainingError(f"parameter {p.name or '<unnamed>'} has no gradient")
    for p in params:
        g = p.grad.astype(p.data.dtype, copy=False)
        v = g.copy() if p.velocity is None else momentum * p.velocity + g
        p.velocity = v
        p.data = p.data - lr * v
        p.grad = None


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch,)))


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle split into batches; the last short batch is kept."""
    perm = epoch_rng(seed, epoch).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


class SampleCache:
    """Loads and preprocesses frames once, keyed by (sequence, frame)."""

    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self._cache: dict[tuple[str, str], Sample] = {}

    def get(self, record: FrameRecord) -> Sample:
        key = record.key
        if key not in self._cache:
            try:
                self._cache[key] = prepare_sample(record, self.width, self.height)
            except Exception as exc:  # noqa: BLE001 - re-raised with frame identity
                raise TrainingError(f"failed to load frame {record.name}: {exc}") from exc
        return self._cache[key]

    def many(self, records: Sequence[FrameRecord]) -> list[Sample]:
        return [self.get(r) for r in records]


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    batch_losses: list[float] = field(default_factory=list)


def train_step(model: OFFNet, batch: Sequence[Sample], lr: float, momentum: float) -> float:
    image = Tensor(np.stack([s.image for s in batch]))
    normals = Tensor(np.stack([s.normals for s in batch]))
    labels = np.stack([s.labels for s in batch])
    loss = bce_loss(forward(model, image, normals), labels)
    backward(loss)
    sgdm_step(model.parameters(), lr, momentum)
    return float(loss.item())


def train_epoch(model: OFFNet, samples: Sequence[Sample], config: TrainConfig, epoch: int = 1) -> EpochReport:
    """One pass over ``samples`` in seeded-shuffled mini-batches."""
    if not samples:
        raise TrainingError("training split is empty")
    losses = []
    for idx in batch_order(len(samples), config.batch_size, config.seed, epoch):
        losses.append(train_step(model, [samples[i] for i in idx], config.learning_rate, config.momentum))
    return EpochReport(epoch, float(np.mean(losses)), losses)


def predict_probability(model: OFFNet, samples: Sequence[Sample], batch_size: int = 8) -> list[np.ndarray]:
    """Traversable probability maps, one per sample."""
    out = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            probs = forward(model, Tensor(np.stack([s.image for s in chunk])), Tensor(np.stack([s.normals for s in chunk])))
            out.extend(traversable_probability(probs))
    return out


def evaluate_model(model: OFFNet, samples: Sequence[Sample], threshold: float = 0.5) -> SplitEvaluation:
    probs = {s.record.key: p for s, p in zip(samples, predict_probability(model, samples))}
    return evaluate_split(lambda s: probs[s.record.key], list(samples), threshold)


def select_best(scores: Sequence[float]) -> int:
    """1-based epoch of the highest score; ties keep the earlier epoch."""
    if not scores:
        raise ValueError("no scores")
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best + 1


@dataclass
class FitResult:
    best_path: Path
    last_path: Path
    best_epoch: int
    history: list[tuple[int, float, float]]  # (epoch, train_loss, val_fscore)


def fit(
    model: OFFNet,
    train: Sequence[Sample],
    val: Sequence[Sample],
    config: TrainConfig,
    validate: Callable[[OFFNet, int], float] | None = None,
    lr_schedule: Callable[[int], float] | None = None,
) -> FitResult:
    """Train for ``config.epochs`` epochs, keeping ``best.offn`` and ``last.offn``.

    ``validate(model, epoch)`` overrides the default validation F-score;
    ``lr_schedule(epoch)`` overrides the constant learning rate.
    """
    if not train or not val:
        raise TrainingError("fit needs non-empty train and validation splits")
    out_dir = Path(config.checkpoint_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create checkpoint directory {out_dir}: {exc}") from exc
    best_path, last_path = out_dir / "best.offn", out_dir / "last.offn"
    log_path = out_dir / "metrics.log"
    log_path.write_text("")

    def default_validate(m: OFFNet, _epoch: int) -> float:
        return evaluate_model(m, val).report.f_score

    validate = validate or default_validate
    history: list[tuple[int, float, float]] = []
    scores: list[float] = []
    for epoch in range(1, config.epochs + 1):
        cfg = config
        if lr_schedule is not None:
            cfg = TrainConfig(**{**config.__dict__, "learning_rate": lr_schedule(epoch)})
        report = train_epoch(model, train, cfg, epoch)
        score = float(validate(model, epoch))
        scores.append(score)
        history.append((epoch, report.mean_loss, score))
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(f"epoch {epoch} train_loss {report.mean_loss:.6f} val_fscore {score:.6f}\n")
        log.info("epoch %d train_loss %.6f val_fscore %.6f", epoch, report.mean_loss, score)
        save_checkpoint(last_path, model)
        if select_best(scores) == epoch:
            save_checkpoint(best_path, model)
    if config.epochs == 0:
        save_checkpoint(last_path, model)
        save_checkpoint(best_path, model)
    return FitResult(best_path, last_path, select_best(scores) if scores else 0, history)
