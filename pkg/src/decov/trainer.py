"""Mini-batch SGD with momentum, weight decay and the DeCov penalty."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .decov import DecovPenalty, decov_forward
from .layers import mse_loss, softmax_xent
from .models import Network
from .tensor import Rng

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid optimiser or regulariser settings."""


class DivergenceError(FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, iteration: int, what: str, value: float):
        super().__init__(f"{what} became {value} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class OptimConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    # (iteration, multiplier): from that iteration on the rate is scaled by
    # the product of all multipliers reached so far
    lr_schedule: list = field(default_factory=list)
    batch_size: int = 64
    max_epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        self.lr_schedule = [tuple(e) for e in self.lr_schedule]

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        for entry in self.lr_schedule:
            if len(entry) != 2 or entry[0] < 0 or entry[1] < 0:
                raise ConfigError(f"bad lr_schedule entry {entry!r}")

    def lr_at(self, iteration: int) -> float:
        lr = self.learning_rate
        for it, mult in self.lr_schedule:
            if iteration >= it:
                lr *= mult
        return lr


@dataclass
class RegularizerSpec:
    decov_weight: float = 0.0
    dropout_p: float = 0.0

    def validate(self) -> None:
        if not self.decov_weight >= 0:
            raise ConfigError(f"decov_weight must be >= 0, got {self.decov_weight}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


@dataclass
class Split:
    """Inputs plus targets: integer labels (N,) or (N, heads), or float targets."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.x)

    def take(self, idx) -> "Split":
        return Split(self.x[idx], self.y[idx])


class ClassificationTask:
    """Softmax cross-entropy summed over heads; accuracy averaged over heads."""

    has_accuracy = True

    def __init__(self, head_names: Sequence[str]):
        self.head_names = list(head_names)

    def _labels(self, y, h):
        return y if y.ndim == 1 else y[:, h]

    def loss(self, outputs, y):
        total = 0.0
        grads = []
        for h, logits in enumerate(outputs):
            l, g = softmax_xent(logits, self._labels(y, h))
            total += l
            grads.append(g)
        return total, grads

    def correct(self, outputs, y) -> list[int]:
        return [int(np.sum(logits.argmax(axis=1) == self._labels(y, h)))
                for h, logits in enumerate(outputs)]


class ReconstructionTask:
    """Squared error summed over pixels, averaged over the batch."""

    has_accuracy = False
    head_names = ["reconstruction"]

    def loss(self, outputs, y):
        pred = outputs[0]
        l, g = mse_loss(pred, y.reshape(pred.shape))
        return l, [g]


@dataclass
class EvalResult:
    task_loss: float
    accuracy: float | None = None
    head_accuracy: dict = field(default_factory=dict)
    decov_loss: float = 0.0
    offdiag_cov_norm: float = 0.0


def evaluate(model: Network, data: Split, task, batch_size: int = 64) -> EvalResult:
    """Score ``model`` on ``data`` in test mode (dropout off, no updates).

    The DeCov value and off-diagonal covariance norm are averaged over
    mini-batches of ``batch_size`` since they are batch statistics; batches
    of a single example are skipped for them.
    """
    n = len(data)
    loss_sum = 0.0
    correct = None
    dec, norms = [], []
    for start in range(0, n, batch_size):
        b = data.take(slice(start, start + batch_size))
        outs = model.forward(b.x, training=False)
        l, _ = task.loss(outs, b.y)
        loss_sum += l * len(b)
        if task.has_accuracy:
            c = task.correct(outs, b.y)
            correct = c if correct is None else [a + x for a, x in zip(correct, c)]
        if len(b) > 1:
            v, diag = decov_forward(model.hidden)
            dec.append(v)
            norms.append(diag.offdiag_norm)
    res = EvalResult(task_loss=loss_sum / n,
                     decov_loss=float(np.mean(dec)) if dec else 0.0,
                     offdiag_cov_norm=float(np.mean(norms)) if norms else 0.0)
    if task.has_accuracy:
        accs = [c / n for c in correct]
        res.head_accuracy = dict(zip(task.head_names, accs))
        res.accuracy = float(np.mean(accs))
    return res


@dataclass
class RunRecord:
    """Per-evaluation metrics rows plus the settings that produced them."""

    rows: list = field(default_factory=list)
    optim: OptimConfig | None = None
    reg: RegularizerSpec | None = None
    head_names: list = field(default_factory=list)
    has_accuracy: bool = True

    @property
    def columns(self) -> list[str]:
        cols = ["epoch", "iteration", "lr", "train_loss", "decov_loss",
                "train_task_loss", "eval_task_loss"]
        if self.has_accuracy:
            cols += ["train_accuracy", "eval_accuracy"]
            if len(self.head_names) > 1:
                for h in self.head_names:
                    cols += [f"train_accuracy_{h}", f"eval_accuracy_{h}"]
        cols += ["eval_decov_loss", "offdiag_cov_norm"]
        return cols

    @property
    def final(self) -> dict:
        return self.rows[-1]

    @property
    def gap(self) -> float:
        return self.final["train_accuracy"] - self.final["eval_accuracy"]

    def head_gap(self, head: str) -> float:
        return self.final[f"train_accuracy_{head}"] - self.final[f"eval_accuracy_{head}"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = self.columns
        w.writerow(cols)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in cols])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {
            "optim": asdict(self.optim) if self.optim else None,
            "regularizer": asdict(self.reg) if self.reg else None,
            "epochs": self.final["epoch"] if self.rows else 0,
            "final": dict(self.final) if self.rows else {},
        }
        return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _check_finite(value: float, iteration: int, what: str) -> None:
    if not math.isfinite(value):
        raise DivergenceError(iteration, what, value)


def sgd_step(params, velocities, lr: float, momentum: float, weight_decay: float) -> None:
    """v <- m v - lr (g + wd w);  w <- w + v.  Weight decay skips biases."""
    for p, v in zip(params, velocities):
        g = p.grad + weight_decay * p.value if (p.decay and weight_decay) else p.grad
        v *= momentum
        v -= lr * g
        p.value += v


ModelFactory = Callable[[Rng, float], Network]


def train(model_fn: ModelFactory, train_data: Split, eval_data: Split, task,
          optim: OptimConfig, reg: RegularizerSpec, eval_every: int = 1,
          train_eval_size: int | None = None,
          on_batch: Callable | None = None) -> tuple[Network, RunRecord]:
    """Train a freshly initialised model and record metrics.

    ``model_fn(rng, dropout_p)`` builds the network; all randomness (weights,
    shuffling, dropout masks) derives from ``optim.seed``. Metrics are taken
    every ``eval_every`` epochs and always after the last one. Training
    accuracy is measured in test mode on the first ``train_eval_size``
    training examples (all of them by default).

    ``on_batch(iteration, hidden, decov_value)`` is called after every
    update, mainly for tests.
    """
    optim.validate()
    reg.validate()
    init_rng, shuffle_rng, drop_rng = Rng(optim.seed).spawn(3)
    model = model_fn(init_rng, reg.dropout_p)
    penalty = DecovPenalty(reg.decov_weight)
    params = model.params()
    velocities = [np.zeros_like(p.value) for p in params]
    record = RunRecord(optim=optim, reg=reg, head_names=list(task.head_names),
                       has_accuracy=task.has_accuracy)
    train_eval = train_data if train_eval_size is None else train_data.take(slice(0, train_eval_size))

    n = len(train_data)
    iteration = 0
    for epoch in range(1, optim.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = dec_sum = 0.0
        batches = 0
        for start in range(0, n, optim.batch_size):
            b = train_data.take(order[start:start + optim.batch_size])
            lr = optim.lr_at(iteration)
            model.zero_grad()
            outs = model.forward(b.x, training=True, rng=drop_rng)
            task_loss, douts = task.loss(outs, b.y)
            _check_finite(task_loss, iteration, "task loss")
            dec_value, dhidden = penalty(model.hidden)
            _check_finite(dec_value, iteration, "DeCov loss")
            model.backward(douts, dhidden)
            sgd_step(params, velocities, lr, optim.momentum, optim.weight_decay)
            if on_batch is not None:
                on_batch(iteration, model.hidden, dec_value)
            loss_sum += task_loss
            dec_sum += dec_value
            batches += 1
            iteration += 1
        if epoch % eval_every and epoch != optim.max_epochs:
            continue
        tr = evaluate(model, train_eval, task, optim.batch_size)
        ev = evaluate(model, eval_data, task, optim.batch_size)
        row = {
            "epoch": epoch,
            "iteration": iteration,
            "lr": optim.lr_at(iteration),
            "train_loss": loss_sum / max(batches, 1),
            "decov_loss": dec_sum / max(batches, 1),
            "train_task_loss": tr.task_loss,
            "eval_task_loss": ev.task_loss,
            "eval_decov_loss": ev.decov_loss,
            "offdiag_cov_norm": ev.offdiag_cov_norm,
        }
        if task.has_accuracy:
            row["train_accuracy"] = tr.accuracy
            row["eval_accuracy"] = ev.accuracy
            for h in task.head_names:
                row[f"train_accuracy_{h}"] = tr.head_accuracy[h]
                row[f"eval_accuracy_{h}"] = ev.head_accuracy[h]
        record.rows.append(row)
        log.info("epoch %d: %s", epoch, {k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()})
    return model, record


def grid_search(points: Sequence[tuple[OptimConfig, RegularizerSpec]], model_fn: ModelFactory,
                train_data: Split, val_data: Split, task, **train_kw):
    """Train one model per point and pick the best on the validation split.

    Best means highest validation accuracy (lowest validation loss for tasks
    without accuracy); ties go to the smaller train-val gap, then to the
    earlier point. Returns (best index, list of RunRecords).
    """
    if not points:
        raise ConfigError("grid search over an empty space")
    records = []
    for optim, reg in points:
        _, rec = train(model_fn, train_data, val_data, task, optim, reg, **train_kw)
        records.append(rec)

    def key(i):
        rec = records[i]
        if task.has_accuracy:
            return (-rec.final["eval_accuracy"], rec.gap, i)
        return (rec.final["eval_task_loss"], 0.0, i)

    best = min(range(len(records)), key=key)
    return best, records
