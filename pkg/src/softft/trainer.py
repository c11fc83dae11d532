"""Training modes, the source-loss decay schedule and the SGD optimizer.

Four modes share one loop:

``pretrain``      source data, source head only
``finetune``      target data only; every old head is dropped and a fresh
                  target head is initialised
``intermediate``  paired source/target batches, loss = loss_src + loss_tar
``soft``          paired batches, loss = (1 - alpha) loss_src + loss_tar with
                  alpha = min(1, epoch / E); training stops shortly after
                  alpha saturates
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .data import Dataset, batch_iter, batches_per_epoch, cycled_batch, dual_batch_iter
from .errors import ConfigError, ContractError, DimensionError, DivergenceError
from .model import DualHeadModel, add_head, forward_features, forward_head, remove_head, replace_head
from .seeding import derive_seed

INF = math.inf
MODES = ("pretrain", "finetune", "intermediate", "soft")
SOURCE, TARGET, TARGET2 = "source", "target", "target2"


@dataclass(frozen=True)
class Schedule:
    """Horizon ``E`` of the linear source-loss decay (``INF`` keeps alpha at 0).

    ``fixed_alpha`` pins alpha for every epoch; the intermediate stage is
    ``fixed_alpha=0``.
    """

    E: float = INF
    fixed_alpha: Optional[float] = None

    def __post_init__(self):
        if not (self.E == INF or (float(self.E).is_integer() and self.E >= 1)):
            raise ConfigError(f"E must be a positive integer or inf, got {self.E}")
        if self.fixed_alpha is not None and not 0.0 <= self.fixed_alpha <= 1.0:
            raise ConfigError(f"fixed alpha must lie in [0, 1], got {self.fixed_alpha}")

    def alpha(self, epoch: int) -> float:
        if self.fixed_alpha is not None:
            return float(self.fixed_alpha)
        return alpha_at(epoch, self.E)

    def first_saturated_epoch(self) -> Optional[int]:
        if self.fixed_alpha is not None:
            return 0 if self.fixed_alpha == 1.0 else None
        return None if self.E == INF else int(self.E)


def alpha_at(epoch: int, E: float) -> float:
    """min(1, epoch / E); an infinite horizon never decays the source loss."""
    if epoch < 0:
        raise ContractError(f"epoch must be non-negative, got {epoch}")
    if E == INF:
        return 0.0
    return min(1.0, epoch / E)


def combined_loss(loss_src, loss_tar, alpha: float, loss_tar2=None) -> Tensor:
    """(1 - alpha) * loss_src + loss_tar [+ loss_tar2]."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    total = ad.add(ad.scale(_scalar(loss_src), 1.0 - alpha), _scalar(loss_tar))
    if loss_tar2 is not None:
        total = ad.add(total, _scalar(loss_tar2))
    return total


def _scalar(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.size != 1:
        raise ContractError(f"loss terms must be scalars, got shape {t.shape}")
    return t


def sgd_step(params, grads, velocity, lr: float, momentum: float):
    """In-place momentum SGD: v <- momentum * v + g; theta <- theta - lr * v."""
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise DimensionError(f"sgd_step shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        p -= lr * v
    return params, velocity


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "soft"
    lr: float = 0.01
    momentum: float = 0.9
    batch: int = 32
    epochs: int = 30
    post_saturation_epochs: Optional[int] = None
    smoothing: float = 0.0
    seed: int = 0
    use_target2: bool = False
    freeze_source_head: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch < 1:
            raise ConfigError(f"batch must be positive, got {self.batch}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        if self.post_saturation_epochs is not None and self.post_saturation_epochs < 1:
            raise ConfigError("post_saturation_epochs must be at least 1")

    def post_saturation(self, schedule: Schedule) -> int:
        if self.post_saturation_epochs is not None:
            return self.post_saturation_epochs
        if schedule.E == INF:
            return 1
        return max(1, math.ceil(0.1 * schedule.E))


@dataclass
class TrainingData:
    """Datasets a run may draw on; which ones are required depends on the mode."""

    source: Optional[Dataset] = None
    target: Optional[Dataset] = None
    target_test: Optional[Dataset] = None
    target2: Optional[Dataset] = None
    source_test: Optional[Dataset] = None


@dataclass
class EpochRow:
    epoch: int
    alpha: float
    loss_src: float
    loss_tar: float
    loss_tar2: float
    train_acc: float
    test_acc: float


@dataclass
class TrainRecord:
    mode: str
    rows: list[EpochRow] = field(default_factory=list)
    model: Optional[DualHeadModel] = None
    checkpoint: Optional[str] = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def as_tuples(self) -> list[tuple]:
        return [tuple(vars(r).values()) for r in self.rows]


def stop_epoch(schedule: Schedule, config: TrainConfig) -> int:
    """Number of epochs a soft run trains: ``min(total, first_saturated + post)``."""
    first = schedule.first_saturated_epoch()
    if first is None:
        return config.epochs
    return min(config.epochs, first + config.post_saturation(schedule))


def head_seed(config: TrainConfig, head_id: str) -> int:
    return derive_seed(config.seed, "head", head_id)


def _prepare(model: DualHeadModel, data: TrainingData, config: TrainConfig) -> DualHeadModel:
    mode = config.mode
    if mode == "pretrain":
        if data.source is None:
            raise ConfigError("pretrain needs a source dataset")
        if SOURCE not in model.heads:
            raise ConfigError("pretrain needs a model with a 'source' head")
        return model.copy()
    if data.target is None:
        raise ConfigError(f"{mode} needs a target dataset")
    k_tar = data.target.num_classes
    if mode == "finetune":
        out = model.copy()
        for hid in [h for h in out.heads if h != TARGET]:
            out = remove_head(out, hid)
        if TARGET in out.heads:
            return replace_head(out, TARGET, k_tar, head_seed(config, TARGET))
        return add_head(out, TARGET, k_tar, head_seed(config, TARGET))
    if data.source is None:
        raise ConfigError(f"{mode} needs a source dataset")
    if SOURCE not in model.heads:
        raise ConfigError(f"{mode} needs the pretrained 'source' head")
    if model.heads[SOURCE].num_classes <= int(data.source.original_labels().max(initial=0)):
        raise ConfigError("source labels exceed the source head's classes")
    out = model
    for hid in (TARGET, TARGET2):
        if hid in out.heads:
            out = remove_head(out, hid)
    out = add_head(out, TARGET, k_tar, head_seed(config, TARGET))
    if config.use_target2:
        if data.target2 is None:
            raise ConfigError("use_target2 is set but no second target dataset was given")
        out = add_head(out, TARGET2, data.target2.num_classes, head_seed(config, TARGET2))
    return out


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def predict_logits(model: DualHeadModel, head_id: str, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = []
    for i in range(0, len(x), chunk):
        out.append(forward_head(model, head_id, forward_features(model, Tensor(x[i : i + chunk]))).values)
    if not out:
        return np.zeros((0, model.heads[head_id].num_classes))
    return np.concatenate(out)


def extract_features(model: DualHeadModel, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = [forward_features(model, Tensor(x[i : i + chunk])).values for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.config.feature_dim))


def evaluate_accuracy(model: DualHeadModel, head_id: str, ds: Optional[Dataset]) -> float:
    if ds is None or len(ds) == 0:
        return math.nan
    return _accuracy(predict_logits(model, head_id, ds.data), ds.labels)


def train(model: DualHeadModel, data: TrainingData, config: TrainConfig, schedule: Schedule = Schedule()) -> TrainRecord:
    """Run one training mode; the input model is never mutated."""
    mode = config.mode
    if mode == "intermediate":
        schedule = Schedule(fixed_alpha=0.0)
    model = _prepare(model, data, config)
    record = TrainRecord(mode, model=model)
    n_epochs = stop_epoch(schedule, config) if mode == "soft" else config.epochs

    frozen = {SOURCE} if config.freeze_source_head and mode in ("intermediate", "soft") else set()
    trainable = [(n, p) for n, p in model.parameters() if not any(n.startswith(f"head.{h}.") for h in frozen)]
    velocity = [np.zeros_like(p.values) for _, p in trainable]
    eps = config.smoothing
    paired = mode in ("intermediate", "soft")

    for epoch in range(n_epochs):
        alpha = schedule.alpha(epoch) if paired else math.nan
        sums = {"src": 0.0, "tar": 0.0, "tar2": 0.0}
        correct = seen = steps = 0
        if paired:
            stream = dual_batch_iter(data.source, data.target, config.batch, config.seed, epoch)
        else:
            primary = data.source if mode == "pretrain" else data.target
            stream = ((None, b) for b in batch_iter(primary, config.batch, config.seed, epoch))
        use_t2 = paired and config.use_target2
        for step, (src_b, tar_b) in enumerate(stream):
            model.zero_grad()
            with Graph() as g:
                if mode == "pretrain":
                    logits = forward_head(model, SOURCE, forward_features(model, Tensor(tar_b.data)))
                    loss = ad.softmax_cross_entropy(logits, tar_b.labels, eps)
                    parts = {"src": loss}
                elif mode == "finetune":
                    logits = forward_head(model, TARGET, forward_features(model, Tensor(tar_b.data)))
                    loss = ad.softmax_cross_entropy(logits, tar_b.labels, eps)
                    parts = {"tar": loss}
                else:
                    src_logits = forward_head(model, SOURCE, forward_features(model, Tensor(src_b.data)))
                    loss_src = ad.softmax_cross_entropy(src_logits, data.source.original_labels()[src_b.indices], eps)
                    logits = forward_head(model, TARGET, forward_features(model, Tensor(tar_b.data)))
                    loss_tar = ad.softmax_cross_entropy(logits, tar_b.labels, eps)
                    parts = {"src": loss_src, "tar": loss_tar}
                    loss_tar2 = None
                    if use_t2:
                        position = (epoch * batches_per_epoch(len(data.target), config.batch) + step) * config.batch
                        b2 = cycled_batch(data.target2, config.batch, derive_seed(config.seed, TARGET2), position)
                        t2_logits = forward_head(model, TARGET2, forward_features(model, Tensor(b2.data)))
                        loss_tar2 = ad.softmax_cross_entropy(t2_logits, b2.labels, eps)
                        parts["tar2"] = loss_tar2
                    loss = combined_loss(loss_src, loss_tar, alpha, loss_tar2)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, step, value)
            ad.backward(loss, g)
            sgd_step([p.values for _, p in trainable], [p.grad for _, p in trainable], velocity, config.lr, config.momentum)
            for key, t in parts.items():
                sums[key] += t.item()
            correct += int(np.sum(np.argmax(logits.values, axis=1) == tar_b.labels))
            seen += len(tar_b.labels)
            steps += 1

        def mean_of(key, used):
            return sums[key] / steps if used and steps else math.nan

        if mode == "pretrain":
            test_acc = evaluate_accuracy(model, SOURCE, data.source_test)
        else:
            test_acc = evaluate_accuracy(model, TARGET, data.target_test)
        record.rows.append(
            EpochRow(
                epoch=epoch,
                alpha=alpha,
                loss_src=mean_of("src", mode != "finetune"),
                loss_tar=mean_of("tar", mode != "pretrain"),
                loss_tar2=mean_of("tar2", use_t2),
                train_acc=correct / seen if seen else math.nan,
                test_acc=test_acc,
            )
        )
    return record

