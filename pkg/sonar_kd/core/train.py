"""Training loops: plain supervised, offline distillation from a logit store, online distillation."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, List, Optional, Sequence

import numpy as np

from sonar_kd.core.autodiff import Tensor, no_grad
from sonar_kd.core.dataaug import DEFAULT_SIGMA, Sample, random_augment
from sonar_kd.core.detector import FpnLogits, Model, forward, save_checkpoint, to_input
from sonar_kd.core.distill import KDWeights, hard_loss, soft_components, total_loss, weighted_soft
from sonar_kd.core.logit_store import LogitStore, spec_hash
from sonar_kd.core.optim import SGD, SGDConfig
from sonar_kd.errors import ConfigError, DatasetError, DivergenceError, SpecMismatchError
from sonar_kd.protocols import LossRecord

logger = logging.getLogger(__name__)

KD_MODES = ("offline", "online")

ProgressCallback = Callable[[int, LossRecord], None]


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 200
    batch_size: int = 8
    sgd: SGDConfig = field(default_factory=SGDConfig)
    seed: int = 0
    augment: bool = True
    sigma: float = DEFAULT_SIGMA
    log_every: int = 10

    def validate(self) -> None:
        if self.iters < 1 or self.batch_size < 1:
            raise ConfigError("iters and batch_size must be >= 1", {"iters": self.iters, "batch_size": self.batch_size})
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1", {"log_every": self.log_every})
        self.sgd.validate()


@dataclass
class KDConfig:
    """Where teacher logits come from and how they are weighted."""

    weights: KDWeights = field(default_factory=KDWeights)
    mode: str = "offline"
    store: Optional[LogitStore] = None
    teacher: Optional[Model] = None

    def validate(self, student: Model, train_cfg: TrainConfig) -> None:
        self.weights.validate()
        if self.mode not in KD_MODES:
            raise ConfigError(f"unknown KD mode {self.mode!r}", {"mode": self.mode, "choices": list(KD_MODES)})
        if self.mode == "offline":
            if self.store is None:
                raise ConfigError("offline distillation needs a teacher logit store")
            if train_cfg.augment:
                raise ConfigError("offline distillation runs without online augmentation; disable it")
            expected = spec_hash(student.spec)
            if self.store.hash != expected:
                raise SpecMismatchError(
                    "teacher logits do not match the student's shape contract",
                    {"store": self.store.hash.hex(), "student": expected.hex()},
                )
        elif self.teacher is None:
            raise ConfigError("online distillation needs a teacher model")


@dataclass
class TrainResult:
    losses: List[LossRecord]
    checkpoint: Optional[Path] = None

    @property
    def first_total(self) -> float:
        return self.losses[0]["total"] if self.losses else float("nan")

    @property
    def last_total(self) -> float:
        return self.losses[-1]["total"] if self.losses else float("nan")


def batch_schedule(num_samples: int, batch_size: int, iters: int, seed: int) -> List[List[int]]:
    """Sample indices per iteration: reshuffled epochs, consumed in consecutive chunks."""
    rng = np.random.default_rng([seed, 0])
    size = min(batch_size, num_samples)
    schedule: List[List[int]] = []
    order: List[int] = []
    while len(schedule) < iters:
        if len(order) < size:
            order.extend(rng.permutation(num_samples).tolist())
        schedule.append(order[:size])
        del order[:size]
    return schedule


def _check_samples(model: Model, samples: Sequence[Sample]) -> None:
    if not samples:
        raise DatasetError("training set is empty")
    expected = tuple(model.spec.input_size)
    for s in samples:
        if (s.height, s.width) != expected:
            raise DatasetError(
                f"{s.image_id} is {s.height}x{s.width}, the model expects {expected[0]}x{expected[1]}",
                {"image_id": s.image_id, "expected": list(expected)},
            )


def train(
    model: Model,
    samples: Sequence[Sample],
    config: Optional[TrainConfig] = None,
    kd: Optional[KDConfig] = None,
    checkpoint_dir: Optional[Path] = None,
    progress: Optional[ProgressCallback] = None,
) -> TrainResult:
    """Optimize ``model`` on ``samples``; every iteration's losses go into the result."""
    config = config or TrainConfig()
    config.validate()
    _check_samples(model, samples)
    if kd is not None:
        kd.validate(model, config)
        if kd.mode == "offline" and kd.store is not None:
            kd.store.require(s.image_id for s in samples)

    optimizer = SGD(model.parameters(), config.sgd)
    schedule = batch_schedule(len(samples), config.batch_size, config.iters, config.seed)
    aug_rng = np.random.default_rng([config.seed, 1])
    dtype = model.spec.np_dtype
    strides = model.spec.strides
    losses: List[LossRecord] = []
    store = kd.store if kd is not None and kd.mode == "offline" else None
    if store is not None:
        store.prefetch(samples[i].image_id for i in schedule[0])

    for iteration, indices in enumerate(schedule, 1):
        batch = [samples[i] for i in indices]
        if config.augment:
            batch = [random_augment(s, aug_rng, config.sigma) for s in batch]
        if store is not None and iteration < len(schedule):
            store.prefetch(samples[i].image_id for i in schedule[iteration])
        images = to_input([s.image for s in batch], dtype)

        optimizer.zero_grad()
        student = forward(model, images)
        hard = hard_loss(student, [s.boxes for s in batch], strides)
        record: LossRecord = {"iteration": iteration, "hard": hard.item(), "soft": 0.0, "bbox": 0.0, "obj": 0.0, "cls": 0.0}
        if kd is not None:
            teacher = _teacher_logits(kd, batch, images, dtype)
            components = soft_components(student, teacher, kd.weights)
            soft = weighted_soft(components, kd.weights)
            loss = total_loss(hard, soft, kd.weights)
            record["soft"] = soft.item()
            for name, term in components.items():
                record[name] = term.item()  # type: ignore[literal-required]
        else:
            loss = hard
        record["total"] = loss.item()
        if not np.isfinite(record["total"]):
            raise DivergenceError(
                f"loss became non-finite at iteration {iteration}",
                {"iteration": iteration, "hard": record["hard"], "soft": record["soft"]},
            )
        loss.backward()
        record["grad_norm"] = optimizer.step()
        losses.append(record)
        if progress is not None:
            progress(iteration, record)
        if iteration == 1 or iteration % config.log_every == 0 or iteration == config.iters:
            logger.info(
                "iter %d/%d  hard %.4f  soft %.4f (bbox %.4f obj %.4f cls %.4f)  total %.4f",
                iteration,
                config.iters,
                record["hard"],
                record["soft"],
                record["bbox"],
                record["obj"],
                record["cls"],
                record["total"],
            )

    result = TrainResult(losses)
    if checkpoint_dir is not None:
        result.checkpoint = save_checkpoint(model, checkpoint_dir)
    return result


def _teacher_logits(kd: KDConfig, batch: Sequence[Sample], images: Tensor, dtype: Any) -> FpnLogits:
    if kd.mode == "offline":
        assert kd.store is not None
        return kd.store.batch([s.image_id for s in batch], dtype=dtype)
    assert kd.teacher is not None
    with no_grad():
        return forward(kd.teacher, images).detach()
