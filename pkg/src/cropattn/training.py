"""Focal-loss training with Adam, warmup schedule and early stopping; evaluation metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataset import Dataset, iter_batches
from .errors import DivergedLoss, EmptySplit, InvalidConfig, NonFiniteLogits, NonFiniteLoss, ShapeMismatch
from .model import Checkpoint, ModelConfig, focal_loss_and_grad, forward, init_params, loss_gradients

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9
    base_learning_rate: float = 0.003
    weight_decay: float = 0.000413
    focal_gamma: float = 2.0
    max_epochs: int = 100
    early_stop_check_every: int = 5
    early_stop_patience: int = 1
    warmup_steps: int = 4000
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.base_learning_rate <= 0 or self.epsilon <= 0 or self.warmup_steps < 1:
            raise InvalidConfig("learning rate, epsilon and warmup_steps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfig("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.focal_gamma < 0:
            raise InvalidConfig("weight_decay and focal_gamma must be non-negative")
        if self.batch_size < 1 or self.early_stop_check_every < 1 or self.early_stop_patience < 1:
            raise InvalidConfig("batch_size and early-stopping settings must be >= 1")
        if self.max_epochs < self.early_stop_check_every:
            raise InvalidConfig("max_epochs must be >= early_stop_check_every")


# ---------------------------------------------------------------------------
# loss, schedule, optimizer


def focal_loss(logits, true_class: int, gamma: float = 2.0) -> float:
    """``-(1 - p_t)^gamma * log(p_t)`` for a single logit vector."""
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteLogits("logits must be finite")
    if gamma < 0:
        raise InvalidConfig("gamma must be >= 0")
    top = logits.max()
    log_pt = logits[true_class] - top - math.log(np.exp(logits - top).sum())
    miss = -math.expm1(log_pt)
    return float(-(miss ** gamma) * log_pt)


def learning_rate(step: int, config: TrainConfig, model_dim: int) -> float:
    """Inverse-square-root schedule with linear warmup."""
    if step < 1:
        raise InvalidConfig("step counts from 1")
    return config.base_learning_rate * model_dim ** -0.5 * min(step ** -0.5, step * config.warmup_steps ** -1.5)


@dataclass
class AdamState:
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, rate: float, config: TrainConfig):
    """One bias-corrected Adam update with decoupled weight decay.

    Decay shrinks parameters by ``(1 - rate * weight_decay)`` before the Adam
    step.  Returns new ``(params, state)``; inputs are left untouched.
    """
    step = state.step + 1
    b1, b2 = config.beta1, config.beta2
    new_params, first, second = {}, {}, {}
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {value.shape}")
        m = b1 * state.first.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.second.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        decayed = value * (1 - rate * config.weight_decay)
        new_params[name] = decayed - rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
        first[name], second[name] = m, v
    return new_params, AdamState(first, second, step)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    overall_accuracy: float
    class_accuracy: float
    macro_f1: float
    confusion_matrix: np.ndarray
    class_vocabulary: list = field(default_factory=list)

    @property
    def per_class_recall(self) -> dict:
        cm = self.confusion_matrix
        support = cm.sum(axis=1)
        return {c: float(cm[i, i] / support[i]) for i, c in enumerate(self.class_vocabulary) if support[i]}

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "class_accuracy": self.class_accuracy,
            "macro_f1": self.macro_f1,
            "confusion_matrix": self.confusion_matrix.tolist(),
            "class_vocabulary": list(self.class_vocabulary),
            "per_class_recall": self.per_class_recall,
        }


def metrics_from_confusion(cm, class_vocabulary=None) -> Metrics:
    """Overall accuracy, mean per-class recall and macro F1 from a ``[true, predicted]`` count matrix.

    Classes absent from the split are left out of the class accuracy; the
    macro F1 also keeps classes that were predicted but never true.
    """
    cm = np.asarray(cm, dtype=int)
    total = cm.sum()
    if total == 0:
        raise EmptySplit("confusion matrix is empty")
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    present = support > 0
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=present)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    scored = present | (predicted > 0)
    vocab = list(class_vocabulary) if class_vocabulary is not None else [str(i) for i in range(len(cm))]
    return Metrics(float(tp.sum() / total), float(recall[present].mean()), float(f1[scored].mean()), cm, vocab)


def confusion_matrix(true, predicted, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(cm, (np.asarray(true, dtype=int), np.asarray(predicted, dtype=int)), 1)
    return cm


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EarlyStopping:
    """Tracks validation loss at check epochs; stops after ``patience`` non-improving checks."""

    patience: int = 1
    best_loss: float = math.inf
    best_epoch: int = 0
    bad_checks: int = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best_loss:
            self.best_loss, self.best_epoch, self.bad_checks = loss, epoch, 0
            return False
        self.bad_checks += 1
        return self.bad_checks >= self.patience


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    best_epoch: int
    stopped_epoch: int


def resolve_model_config(model_config: ModelConfig, dataset: Dataset) -> ModelConfig:
    """Adapt class count and padded length to ``dataset``."""
    return replace(model_config, num_classes=len(dataset.class_vocabulary), t_max=dataset.max_length)


def predict(checkpoint: Checkpoint, parcels, batch_size: int = 256):
    """Logits and attention output per batch, concatenated logits returned first."""
    outputs = list(iter_forward(checkpoint, parcels, batch_size))
    logits = np.concatenate([o.logits for o in outputs]) if outputs else np.zeros((0, checkpoint.config.num_classes))
    return logits, outputs


def iter_forward(checkpoint: Checkpoint, parcels, batch_size: int = 256):
    t_max = max((len(p) for p in parcels), default=1)
    for batch in iter_batches(parcels, batch_size, t_max, checkpoint.class_vocabulary):
        yield forward(batch, checkpoint.params, checkpoint.config)


def mean_loss(checkpoint: Checkpoint, parcels, gamma: float, batch_size: int = 256) -> float:
    total, count = 0.0, 0
    t_max = max(len(p) for p in parcels)
    for batch in iter_batches(parcels, batch_size, t_max, checkpoint.class_vocabulary):
        out = forward(batch, checkpoint.params, checkpoint.config)
        _, _, per = focal_loss_and_grad(out.logits, batch.labels, gamma)
        total += per.sum()
        count += len(per)
    return total / count


def train(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig) -> TrainResult:
    """Mini-batch Adam on the train split with early stopping on the validation split.

    Every ``early_stop_check_every`` epochs the validation loss is compared to
    the best so far.  The parameters of the best check are returned.
    """
    train_parcels = dataset.split("train") if "train" in dataset.splits else []
    val_parcels = dataset.split("validation") if "validation" in dataset.splits else []
    if not train_parcels:
        raise EmptySplit("train split is empty")
    if not val_parcels:
        raise EmptySplit("validation split is empty")
    config = resolve_model_config(model_config, dataset)
    vocab = list(dataset.class_vocabulary)
    rng = np.random.default_rng(train_config.seed)
    params = init_params(config, train_config.seed)
    state = AdamState()
    stopper = EarlyStopping(train_config.early_stop_patience)
    metadata = {"train_config": asdict(train_config), "dataset_fingerprint": dataset.fingerprint(),
                "weight_decay_mode": "decoupled", "epoch_unit": "full pass over the train split"}
    best = Checkpoint(config, vocab, params, metadata)
    history = []
    epoch = 0
    for epoch in range(1, train_config.max_epochs + 1):
        order = rng.permutation(len(train_parcels))
        losses, correct = [], 0
        for batch in iter_batches(train_parcels, train_config.batch_size, config.t_max, vocab, order):
            try:
                loss, grads, out = loss_gradients(batch, params, config, train_config.focal_gamma, rng=rng)
            except NonFiniteLoss as exc:
                raise DivergedLoss(f"epoch {epoch}: {exc}") from exc
            rate = learning_rate(state.step + 1, train_config, config.model_dim)
            params, state = adam_step(params, grads, state, rate, train_config)
            losses.append(loss * len(batch))
            correct += int((out.logits.argmax(axis=1) == batch.labels).sum())
        entry = {"epoch": epoch, "train_loss": sum(losses) / len(train_parcels),
                 "train_accuracy": correct / len(train_parcels), "learning_rate": rate}
        if not math.isfinite(entry["train_loss"]):
            raise DivergedLoss(f"epoch {epoch}: train loss {entry['train_loss']}")
        stop = False
        if epoch % train_config.early_stop_check_every == 0:
            current = Checkpoint(config, vocab, params, metadata)
            val = mean_loss(current, val_parcels, train_config.focal_gamma)
            entry["validation_loss"] = val
            stop = stopper.update(epoch, val)
            if stopper.best_epoch == epoch:
                best = current
        history.append(entry)
        log.debug("epoch %d: %s", epoch, entry)
        if stop:
            break
    if stopper.best_epoch == 0:
        # no check happened; keep the final parameters
        best = Checkpoint(config, vocab, params, metadata)
    best.metadata = dict(metadata, best_epoch=stopper.best_epoch, stopped_epoch=epoch)
    return TrainResult(best, history, stopper.best_epoch, epoch)


def evaluate(checkpoint: Checkpoint, dataset: Dataset, split: str | None = "test", batch_size: int = 256) -> Metrics:
    """Single deterministic pass over a split."""
    parcels = dataset.split(split)
    if not parcels:
        raise EmptySplit(f"split {split!r} is empty")
    logits, _ = predict(checkpoint, parcels, batch_size)
    index = {c: i for i, c in enumerate(checkpoint.class_vocabulary)}
    true = [index[p.crop] for p in parcels]
    cm = confusion_matrix(true, logits.argmax(axis=1), len(index))
    return metrics_from_confusion(cm, checkpoint.class_vocabulary)
