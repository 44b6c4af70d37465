"""Splitting, training with early stopping, inference and cohort evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from . import tensor as T
from . import unet
from .phantom import SubjectRecord
from .regions import NUM_REGIONS, TARGET_COMPOSITES, RegionTable
from .tensor import Tensor
from .volume_io import LabelMap, Volume

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    patience: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.65, 0.10, 0.25)
    class_weighting: bool = False
    checkpoint: str | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be three values summing to 1, got {self.split_fractions}")
        if min(self.split_fractions) < 0:
            raise ValueError("split fractions must be non-negative")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(subjects: Sequence, fractions=(0.65, 0.10, 0.25), seed: int = 0):
    """Seeded shuffle, then contiguous train/val/test blocks.

    Validation and test sizes are ``round(n * f)``; train takes the rest.
    """
    n = len(subjects)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    n_val = _round_half_up(n * fractions[1])
    n_test = _round_half_up(n * fractions[2])
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(
            f"cannot split {n} subjects with fractions {tuple(fractions)}: "
            f"sizes would be {n_train}/{n_val}/{n_test}"
        )
    order = np.random.default_rng(seed).permutation(n)
    picked = [subjects[i] for i in order]
    return picked[:n_train], picked[n_train : n_train + n_val], picked[n_train + n_val :]


class EarlyStopping:
    """Stop once validation loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch; returns True when this epoch was a new best."""
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss, self.best_epoch = val_loss, self.epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.epoch - self.best_epoch >= self.patience


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    stop_reason: str = ""

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        rows += [f"{i},{tr!r},{va!r}" for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), 1)]
        rows.append(f"# best_epoch={self.best_epoch} stopped_epoch={self.stopped_epoch} stop_reason={self.stop_reason}")
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        h = cls()
        for line in text.splitlines()[1:]:
            if line.startswith("#"):
                meta = dict(kv.split("=") for kv in line[1:].split())
                h.best_epoch, h.stopped_epoch = int(meta["best_epoch"]), int(meta["stopped_epoch"])
                h.stop_reason = meta["stop_reason"]
            elif line:
                _, tr, va = line.split(",")
                h.train_loss.append(float(tr))
                h.val_loss.append(float(va))
        return h


def normalize(pet: Volume | np.ndarray) -> Tensor:
    """Per-volume z-score, returned as a ``[1, D, H, W]`` float32 tensor."""
    v = np.asarray(getattr(pet, "data", pet), dtype=np.float64)
    std = v.std()
    z = (v - v.mean()) / (std if std > 0 else 1.0)
    return Tensor(z.astype(np.float32)[None])


def class_weights(subjects: Sequence[SubjectRecord], num_classes: int = NUM_REGIONS + 1) -> np.ndarray:
    """Inverse square-root class frequencies, scaled so the voxel-weighted mean is 1.

    Plain inverse frequency lets the largest tissue classes be mislabelled
    almost for free; the square root still lifts the small nuclei.
    """
    counts = np.zeros(num_classes, dtype=np.float64)
    for s in subjects:
        counts += np.bincount(s.labels.data.ravel(), minlength=num_classes)[:num_classes]
    w = np.zeros(num_classes)
    present = counts > 0
    w[present] = 1.0 / np.sqrt(counts[present])
    return w * counts.sum() / (w * counts).sum()


def _loss_terms(probs: np.ndarray, target: np.ndarray, weights: np.ndarray | None) -> tuple[float, float]:
    """(sum of weighted NLL, sum of weights) for pooling a loss across volumes."""
    picked = np.take_along_axis(probs, target[None].astype(np.intp), axis=0)[0]
    nll = -np.log(np.maximum(picked, T.LOG_CLAMP)).astype(np.float64)
    if weights is None:
        return float(nll.sum()), float(nll.size)
    vw = weights[target]
    return float((vw * nll).sum()), float(vw.sum())


def validation_loss(model: unet.UNetModel, subjects: Sequence[SubjectRecord], weights=None) -> float:
    """Loss pooled over every validation voxel (not averaged per subject)."""
    num = den = 0.0
    for s in subjects:
        with T.no_grad():
            probs = unet.forward(model, normalize(s.pet)).data
        a, b = _loss_terms(probs, s.labels.data, weights)
        num += a
        den += b
    return num / den


def _snapshot(model: unet.UNetModel) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.params.items()}


def train(
    model: unet.UNetModel,
    train_set: Sequence[SubjectRecord],
    val_set: Sequence[SubjectRecord],
    config: TrainConfig,
) -> tuple[unet.UNetModel, TrainHistory]:
    """Adam training with early stopping; returns the best-validation model."""
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    for s in list(train_set) + list(val_set):
        unet.check_extents(s.pet.dims)

    weights = class_weights(train_set, model.config.num_classes) if config.class_weighting else None
    params = model.parameters()
    state = T.AdamState.zeros_like(params)
    rng = np.random.default_rng(config.seed)
    stopper = EarlyStopping(config.patience)
    history = TrainHistory()
    best = _snapshot(model)
    ckpt = Path(config.checkpoint) if config.checkpoint else None

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_set))
        batch_losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size), 1):
            batch = [train_set[i] for i in order[start : start + config.batch_size]]
            model.zero_grad()
            total = 0.0
            for s in batch:
                probs = unet.forward(model, normalize(s.pet))
                loss = T.cross_entropy_loss(probs, s.labels.data, weights)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteLossError(epoch, b, value)
                total += value
                if len(batch) > 1:
                    loss = T.mul(loss, Tensor(np.asarray(1.0 / len(batch), dtype=loss.dtype)))
                T.backward(loss)
            T.adam_step(
                params, [p.grad for p in params], state, config.lr, config.beta1, config.beta2, config.eps
            )
            batch_losses.append(total / len(batch))

        val = validation_loss(model, val_set, weights)
        if not math.isfinite(val):
            raise NonFiniteLossError(epoch, 0, val)
        history.train_loss.append(float(np.mean(batch_losses)))
        history.val_loss.append(val)
        if stopper.update(val):
            best = _snapshot(model)
            if ckpt is not None:
                unet.save_weights(model, ckpt)
        log.info("epoch %d train %.5f val %.5f best %d", epoch, history.train_loss[-1], val, stopper.best_epoch)
        if stopper.should_stop:
            history.stop_reason = "early"
            break
    else:
        history.stop_reason = "max_epochs"

    history.best_epoch = stopper.best_epoch
    history.stopped_epoch = stopper.epoch
    if ckpt is not None:
        Path(str(ckpt) + ".history.csv").write_text(history.to_csv())
    for name, arr in best.items():
        model.params[name].data[...] = arr
    model.zero_grad()
    return model, history


def predict(model: unet.UNetModel, pet: Volume) -> LabelMap:
    """Per-voxel argmax of the class probabilities; ties go to the lower class."""
    unet.check_extents(pet.dims)
    with T.no_grad():
        probs = unet.forward(model, normalize(pet)).data
    return LabelMap(probs.argmax(axis=0).astype(np.uint8), pet.spacing_mm)


@dataclass
class EvaluationReport:
    subject_ids: list[str]
    amyloid_positive: list[bool]
    dice: metrics.DiceReport
    nrmse: dict[str, float]
    suvr_pred: list[float]
    suvr_true: list[float]
    roc_pred: metrics.RocCurve
    roc_true: metrics.RocCurve
    classification: metrics.Classification
    threshold: float
    warnings: list[str] = field(default_factory=list)


def evaluate_predictions(
    subjects: Sequence[SubjectRecord],
    predictions: Sequence[LabelMap],
    region_table: RegionTable,
    threshold: float,
) -> EvaluationReport:
    """Score given label maps against the subjects' ground truth."""
    if not subjects:
        raise ValueError("evaluation needs a non-empty test set")
    dice = metrics.mean_dice_reports([metrics.dice_report(p, s.labels) for p, s in zip(predictions, subjects)])
    triples = [(s.pet, p, s.labels) for p, s in zip(predictions, subjects)]
    nrmse, notes = {}, []
    for name in TARGET_COMPOSITES:
        res = metrics.nrmse_region(triples, region_table.composites[name])
        nrmse[name] = res.value
        notes += res.warnings
    suvr_pred = [metrics.suvr(s.pet, p, region_table) for p, s in zip(predictions, subjects)]
    suvr_true = [metrics.suvr(s.pet, s.labels, region_table) for s in subjects]
    flags = [s.amyloid_positive for s in subjects]
    return EvaluationReport(
        subject_ids=[s.id for s in subjects],
        amyloid_positive=flags,
        dice=dice,
        nrmse=nrmse,
        suvr_pred=suvr_pred,
        suvr_true=suvr_true,
        roc_pred=metrics.roc(suvr_pred, flags),
        roc_true=metrics.roc(suvr_true, flags),
        classification=metrics.classify(suvr_pred, flags, threshold),
        threshold=threshold,
        warnings=notes,
    )


def evaluate(
    model: unet.UNetModel,
    test_set: Sequence[SubjectRecord],
    region_table: RegionTable,
    threshold: float,
) -> EvaluationReport:
    preds = [predict(model, s.pet) for s in test_set]
    return evaluate_predictions(test_set, preds, region_table, threshold)
