"""GD/SGD training loops with constant, step and AutoDecay learning-rate schedules."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import ndgrad
from .autodecay import DECAY, TERMINATE, AutoDecay, AutoDecayConfig
from .errors import DimensionError, ValidationError
from .ps10 import Ps10Dataset, Subset

__all__ = [
    "Constant",
    "Step",
    "Auto",
    "TrainConfig",
    "MetricsRecord",
    "Snapshot",
    "RunResult",
    "lr_at",
    "train",
    "fit_arrays",
    "evaluate_subsets",
    "subset_accuracies",
    "predict",
    "write_metrics_csv",
    "read_metrics_csv",
    "save_snapshot",
    "load_snapshot",
    "DIVERGENCE_LOSS",
]

DIVERGENCE_LOSS = 1e6

EPOCH_LIMIT = "epoch_limit"
AUTO_TERMINATED = "auto_terminated"
DIVERGED = "diverged"


@dataclass(frozen=True)
class Constant:
    lr: float

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError("learning rate must be positive")

    @property
    def lr0(self) -> float:
        return self.lr

    def to_dict(self):
        return {"kind": "constant", "lr": self.lr}


@dataclass(frozen=True)
class Step:
    lr0: float
    milestones: tuple[int, ...] = ()
    factor: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if not self.lr0 > 0 or not self.factor > 0:
            raise ValidationError("lr0 and factor must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValidationError("milestones must be strictly increasing")

    def to_dict(self):
        return {"kind": "step", "lr0": self.lr0, "milestones": list(self.milestones), "factor": self.factor}


@dataclass(frozen=True)
class Auto:
    config: AutoDecayConfig
    lr0: float

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValidationError("lr0 must be positive")

    def to_dict(self):
        return {"kind": "auto", "lr0": self.lr0, **self.config.to_dict()}


def schedule_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "constant":
        return Constant(d["lr"])
    if kind == "step":
        return Step(d["lr0"], tuple(d.get("milestones", ())), d.get("factor", 10.0))
    if kind == "auto":
        lr0 = d.pop("lr0")
        return Auto(AutoDecayConfig(**d), lr0)
    raise ValidationError(f"unknown schedule kind {kind!r}")


def lr_at(schedule, epoch: int) -> float:
    """Learning rate once ``epoch`` epochs have completed (decay applies at the milestone itself)."""
    if isinstance(schedule, Constant):
        return schedule.lr
    if isinstance(schedule, Step):
        k = sum(1 for m in schedule.milestones if epoch >= m)
        return schedule.lr0 / schedule.factor**k
    if isinstance(schedule, Auto):
        raise ValidationError("AutoDecay schedules are event-driven; lr_at is undefined")
    raise ValidationError(f"unknown schedule {schedule!r}")


@dataclass(frozen=True)
class TrainConfig:
    schedule: object
    epochs: int = 100
    optimizer: str = "sgd"
    batch_size: int = 128
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.optimizer not in ("gd", "sgd"):
            raise ValidationError(f"optimizer must be 'gd' or 'sgd', got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")

    def to_dict(self):
        return {
            "schedule": self.schedule.to_dict(),
            "epochs": self.epochs,
            "optimizer": self.optimizer,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "shuffle": self.shuffle,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["schedule"] = schedule_from_dict(d["schedule"])
        return cls(**d)


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    lr: float
    train_loss: float
    total_acc: float | None
    simple_acc: float | None
    complex_acc: float | None
    noise_fit_acc: float | None
    stage: int


METRIC_COLUMNS = [f.name for f in MetricsRecord.__dataclass_fields__.values()]


@dataclass(frozen=True)
class Snapshot:
    stage: int
    epoch: int
    params: np.ndarray


@dataclass
class RunResult:
    records: list[MetricsRecord]
    snapshots: list[Snapshot]
    termination: str
    initial_params: np.ndarray
    final_params: np.ndarray
    trace: list = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return self.termination == DIVERGED

    @property
    def epochs_run(self) -> int:
        return self.records[-1].epoch if self.records else 0

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records])

    def decay_epochs(self) -> list[int]:
        """Epochs after which the stage counter advanced."""
        return [s.epoch for s in self.snapshots[:-1]]


def predict(model: ndgrad.MlpConfig, params, inputs) -> np.ndarray:
    with np.errstate(all="ignore"):
        logits = ndgrad.forward(model, params, inputs)
    return np.argmax(np.nan_to_num(logits, nan=-np.inf), axis=1)


def _acc(pred, target, mask):
    if not mask.any():
        return None
    return float((pred[mask] == target[mask]).mean())


def subset_accuracies(predictions, data: Ps10Dataset):
    """``(total, simple, complex, noise_fit)`` for given predictions; ``None`` for empty subsets.

    ``total`` covers the clean (non-noise) examples. ``noise_fit`` is the share
    of noise examples predicted as their corrupted label.
    """
    pred = np.asarray(predictions)
    clean = data.subsets != Subset.NOISE
    return (
        _acc(pred, data.labels, clean),
        _acc(pred, data.labels, data.subsets == Subset.SIMPLE_ONLY),
        _acc(pred, data.labels, data.subsets == Subset.COMPLEX_ONLY),
        _acc(pred, data.labels, data.subsets == Subset.NOISE),
    )


def evaluate_subsets(model, params, data: Ps10Dataset):
    """Accuracies of ``model`` on each subset of ``data``.

    ``model`` is an :class:`~lrdecay.ndgrad.MlpConfig` (used with ``params``) or
    any callable mapping a feature matrix to predicted labels.
    """
    if isinstance(model, ndgrad.MlpConfig):
        pred = predict(model, params, data.features)
    else:
        pred = model(data.features)
    return subset_accuracies(pred, data)


def _full_loss(model, params, x, y):
    with np.errstate(all="ignore"):
        return ndgrad.loss(model, params, x, y)


def _bad(loss_value):
    return not math.isfinite(loss_value) or loss_value > DIVERGENCE_LOSS


def fit_arrays(
    model: ndgrad.MlpConfig,
    x,
    y,
    cfg: TrainConfig,
    init_params=None,
    evaluate: Callable | None = None,
    loss_injector: Callable[[int, float], float] | None = None,
) -> RunResult:
    """Core loop over a plain feature matrix.

    ``evaluate(params)`` returns the four accuracies logged per epoch.
    ``loss_injector(epoch, loss)`` replaces the loss handed to AutoDecay
    (testing hook); the logged loss is always the real one.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("training data must be a nonempty 2-D array")
    if x.shape[1] != model.input_dim:
        raise DimensionError(f"model expects {model.input_dim} inputs, data has {x.shape[1]}")
    n = x.shape[0]
    params = ndgrad.init_params(model) if init_params is None else np.array(init_params, dtype=np.float64)
    initial = params.copy()
    evaluate = evaluate or (lambda p: (None, None, None, None))

    schedule = cfg.schedule
    controller = AutoDecay(schedule.config, schedule.lr0) if isinstance(schedule, Auto) else None

    def current_lr(done):
        return controller.lr if controller else lr_at(schedule, done)

    def stage_of(done):
        if controller:
            return controller.stage
        if isinstance(schedule, Step):
            return 1 + sum(1 for m in schedule.milestones if done >= m)
        return 1

    records = [MetricsRecord(0, current_lr(0), _full_loss(model, params, x, y), *evaluate(params), stage_of(0))]
    snapshots = []
    termination = EPOCH_LIMIT
    if _bad(records[0].train_loss):
        termination = DIVERGED

    batch = n if cfg.optimizer == "gd" else min(cfg.batch_size, n)
    epoch = 0
    while termination == EPOCH_LIMIT and epoch < cfg.epochs:
        lr, stage = current_lr(epoch), stage_of(epoch)
        if cfg.shuffle and cfg.optimizer == "sgd":
            order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(n)
        else:
            order = np.arange(n)
        total = 0.0
        with np.errstate(all="ignore"):
            for start in range(0, n, batch):
                idx = order[start : start + batch]
                loss_value, grad = ndgrad.loss_and_grad(model, params, x[idx], y[idx])
                total += loss_value * idx.size
                params = params - lr * grad
        epoch += 1
        epoch_loss = total / n
        records.append(MetricsRecord(epoch, lr, epoch_loss, *evaluate(params), stage))
        if _bad(epoch_loss) or not np.all(np.isfinite(params)):
            termination = DIVERGED
            break
        if controller:
            fed = loss_injector(epoch, epoch_loss) if loss_injector else epoch_loss
            decision = controller.step(fed)
            if decision.action == DECAY:
                snapshots.append(Snapshot(stage, epoch, params.copy()))
            elif decision.action == TERMINATE:
                termination = AUTO_TERMINATED
        elif epoch < cfg.epochs and stage_of(epoch) != stage:
            snapshots.append(Snapshot(stage, epoch, params.copy()))

    snapshots.append(Snapshot(records[-1].stage, epoch, params.copy()))
    return RunResult(
        records=records,
        snapshots=snapshots,
        termination=termination,
        initial_params=initial,
        final_params=params,
        trace=list(controller.trace) if controller else [],
    )


def train(
    model: ndgrad.MlpConfig,
    data: Ps10Dataset,
    cfg: TrainConfig,
    eval_data: Ps10Dataset | None = None,
    init_params=None,
    loss_injector=None,
) -> RunResult:
    """Train on ``data``; log clean accuracies on ``eval_data`` (default ``data``).

    Noise-fit accuracy is always measured on the training set, where the
    corrupted labels live.
    """
    if len(data) == 0:
        raise ValidationError("training dataset is empty")
    eval_data = data if eval_data is None else eval_data

    def evaluate(params):
        total, simple, complex_, _ = evaluate_subsets(model, params, eval_data)
        if eval_data is data:
            noise = evaluate_subsets(model, params, data)[3]
        else:
            noisy = data.subset_view(data.subsets == Subset.NOISE)
            noise = evaluate_subsets(model, params, noisy)[3] if len(noisy) else None
        return total, simple, complex_, noise

    return fit_arrays(
        model,
        data.features,
        data.labels,
        cfg,
        init_params=init_params,
        evaluate=evaluate,
        loss_injector=loss_injector,
    )


def write_metrics_csv(result: RunResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for r in result.records:
            row = asdict(r)
            writer.writerow(["" if row[c] is None else repr(row[c]) for c in METRIC_COLUMNS])


def read_metrics_csv(path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {}
            for c in METRIC_COLUMNS:
                v = row[c]
                if c in ("epoch", "stage"):
                    vals[c] = int(v)
                else:
                    vals[c] = None if v == "" else float(v)
            out.append(MetricsRecord(**vals))
    return out


def save_snapshot(snapshot: Snapshot, path) -> None:
    """Write the flat ParamVector as a float64 ``.npy`` array (layout of :mod:`lrdecay.ndgrad`)."""
    np.save(path, np.asarray(snapshot.params, dtype=np.float64), allow_pickle=False)


def load_snapshot(path, model: ndgrad.MlpConfig | None = None) -> np.ndarray:
    params = np.load(path, allow_pickle=False)
    if params.ndim != 1 or params.dtype != np.float64:
        raise ValidationError(f"{path}: snapshot must be a 1-D float64 array")
    if model is not None and params.size != model.num_params:
        raise DimensionError(f"{path}: snapshot has {params.size} values, model needs {model.num_params}")
    return params
