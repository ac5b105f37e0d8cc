"""Huber loss, NLL metric, AdamW, plateau scheduling and the train/evaluate loops."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .datasets import SHUFFLE_STREAM, FrameSet, MinMaxScaler, substream
from .network import Model

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_huber", "test_huber", "test_nll", "lr", "seconds")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


def huber(pred, target, delta: float = 1.0):
    """Quadratic for ``|e| <= delta``, linear beyond."""
    e = np.abs(np.asarray(pred, dtype=float) - np.asarray(target, dtype=float))
    out = np.where(e <= delta, 0.5 * e * e, delta * (e - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def nll(mean_loss: float) -> float:
    """Negative natural log of a mean loss; a zero loss maps to +inf."""
    if mean_loss < 0 or math.isnan(mean_loss):
        raise ValueError(f"mean loss must be non-negative, got {mean_loss!r}")
    if mean_loss == 0.0:
        return math.inf
    return -math.log(mean_loss)


@dataclass
class PlateauSpec:
    factor: float = 0.5
    patience: int = 20
    min_lr: float = 1e-5
    threshold: float = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 4092
    lr: float = 1e-3
    weight_decay: float = 1e-9
    scheduler: PlateauSpec = field(default_factory=PlateauSpec)
    seed: int = 0
    huber_delta: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if isinstance(self.scheduler, dict):
            self.scheduler = PlateauSpec(**self.scheduler)
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0 or self.huber_delta <= 0:
            raise ValueError("invalid training configuration")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0,
               betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """In-place AdamW update: decoupled decay first, then the bias-corrected Adam step."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


@dataclass
class PlateauState:
    lr: float
    spec: PlateauSpec = field(default_factory=PlateauSpec)
    best: float = math.inf
    bad: int = 0


def plateau_scheduler(state: PlateauState, test_loss: float) -> float:
    """Reduce the rate once ``patience`` consecutive evaluations fail to improve."""
    if test_loss < state.best - state.spec.threshold:
        state.best = test_loss
        state.bad = 0
    else:
        state.bad += 1
        if state.bad >= state.spec.patience:
            state.lr = max(state.lr * state.spec.factor, state.spec.min_lr)
            state.bad = 0
    return state.lr


@dataclass
class EpochRecord:
    epoch: int
    train_huber: float
    test_huber: float
    test_nll: float
    lr: float
    seconds: float


class History(list):
    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self:
            w.writerow([r.epoch, repr(r.train_huber), repr(r.test_huber), repr(r.test_nll), repr(r.lr),
                        f"{r.seconds:.3f}" if timing else ""])
        return buf.getvalue()

    def save_csv(self, path, timing: bool = True) -> None:
        from .network import atomic_write_text

        atomic_write_text(path, self.to_csv(timing))

    @property
    def last(self) -> EpochRecord:
        return self[-1]


def evaluate(model: Model, X, y, delta: float = 1.0) -> tuple[float, float]:
    """Mean Huber over the split (normalized targets) and its NLL."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("empty evaluation set")
    mean = float(np.mean(huber(model.forward(X), y, delta)))
    return mean, nll(mean)


@dataclass
class PreparedData:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray


def prepare(model: Model, train: FrameSet, test: FrameSet) -> PreparedData:
    """Featurize both splits, fit the input standardizer and target scaler on the training split."""
    X_train = model.features(train.coords, train.types)
    X_test = model.features(test.coords, test.types)
    model.fit_input_scaler(X_train)
    scaler = MinMaxScaler.fit(train.energies)
    model.output_scaler = (scaler.lo, scaler.hi)
    return PreparedData(X_train, scaler.transform(train.energies), X_test, scaler.transform(test.energies))


def target_scaler(model: Model) -> MinMaxScaler:
    return MinMaxScaler(*model.output_scaler)


def train(model: Model, data: PreparedData, config: TrainConfig, progress=None) -> tuple[Model, History]:
    """Mini-batch AdamW on the mean Huber loss; deterministic given the seed."""
    params = model.parameters()
    state = AdamState.like(params)
    sched = PlateauState(config.lr, config.scheduler)
    history = History()
    N = data.y_train.size
    if config.epochs and N == 0:
        raise ValueError("empty training set")
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        order = substream(config.seed, SHUFFLE_STREAM, epoch).permutation(N)
        total = 0.0
        for b, start in enumerate(range(0, N, config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, grads, _ = model.loss_and_grads(data.X_train[idx], data.y_train[idx], config.huber_delta)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(epoch, b, loss)
            adamw_step(params, grads, state, sched.lr, config.weight_decay, config.betas, config.eps)
            total += loss * idx.size
        test_huber, test_nll = evaluate(model, data.X_test, data.y_test, config.huber_delta)
        lr_used = sched.lr
        plateau_scheduler(sched, test_huber)
        rec = EpochRecord(epoch, total / N, test_huber, test_nll, lr_used, time.perf_counter() - t0)
        history.append(rec)
        if progress is not None:
            progress(rec)
    return model, history
