"""Binary classification metrics, the majority-class baseline and result tables."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .exceptions import ContractError

RESULT_COLUMNS = ("model", "strategy", "embedder", "epoch", "mcc", "f1_macro", "f1_class0",
                  "f1_class1", "accuracy", "seed")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 0:
                raise ContractError(f"{f.name} must be a non-negative integer, got {v!r}")
            object.__setattr__(self, f.name, int(v))

    @classmethod
    def from_labels(cls, y_true, y_pred):
        y_true = np.asarray(y_true).astype(bool)
        y_pred = np.asarray(y_pred).astype(bool)
        if y_true.shape != y_pred.shape:
            raise ContractError(f"label shapes differ: {y_true.shape} vs {y_pred.shape}")
        return cls(tp=int(np.sum(y_true & y_pred)), fp=int(np.sum(~y_true & y_pred)),
                   tn=int(np.sum(~y_true & ~y_pred)), fn=int(np.sum(y_true & ~y_pred)))

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def swapped(self):
        """The same table with the roles of the two classes exchanged."""
        return ConfusionCounts(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)


def _nonempty(c):
    if c.total == 0:
        raise ContractError("metrics need at least one instance")


def mcc(c):
    """Matthews correlation; 0 when any marginal is empty."""
    _nonempty(c)
    denom = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if denom == 0:
        return 0.0
    # integer numerator and denominator keep the only rounding in sqrt and the division
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(denom)


def f1(c, positive=1):
    """F1 of one class (``positive`` = 1 or 0); 0 when the class never occurs or is predicted."""
    _nonempty(c)
    if positive not in (0, 1):
        raise ContractError(f"positive must be 0 or 1, got {positive!r}")
    tp, fp, fn = (c.tp, c.fp, c.fn) if positive == 1 else (c.tn, c.fn, c.fp)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def f1_macro(c):
    return (f1(c, 0) + f1(c, 1)) / 2


def accuracy(c):
    _nonempty(c)
    return (c.tp + c.tn) / c.total


@dataclass(frozen=True)
class EvalResult:
    model: str
    strategy: str
    embedder: str
    mcc: float
    f1_macro: float
    f1_class0: float
    f1_class1: float
    accuracy: float
    split_id: str = ""
    epoch: object = ""
    seed: int = 0

    def __post_init__(self):
        if not -1.0 - 1e-12 <= self.mcc <= 1.0 + 1e-12:
            raise ContractError(f"mcc out of range: {self.mcc}")
        for name in ("f1_macro", "f1_class0", "f1_class1", "accuracy"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} out of range: {getattr(self, name)}")

    @property
    def f1(self):
        return self.f1_macro

    def to_row(self):
        row = asdict(self)
        return {k: row[k] for k in RESULT_COLUMNS}


def evaluate_counts(c, model, strategy="none", embedder="none", **extra):
    return EvalResult(model=model, strategy=strategy, embedder=embedder, mcc=mcc(c),
                      f1_macro=f1_macro(c), f1_class0=f1(c, 0), f1_class1=f1(c, 1),
                      accuracy=accuracy(c), **extra)


def evaluate_predictions(y_true, y_pred, model, strategy="none", embedder="none", **extra):
    return evaluate_counts(ConfusionCounts.from_labels(y_true, y_pred), model, strategy,
                           embedder, **extra)


def majority_label(train_labels):
    """Most frequent training label; ties go to 0."""
    labels = np.asarray(train_labels).astype(int)
    if labels.size == 0:
        raise ContractError("cannot take the majority of an empty label set")
    return int(labels.sum() * 2 > labels.size)


def dummy_baseline(test_labels, train_labels=None, strategy="none", **extra):
    """Predict the majority training label everywhere (test labels if no training set given)."""
    test_labels = np.asarray(test_labels).astype(int)
    if test_labels.size == 0:
        raise ContractError("dummy baseline needs a non-empty test set")
    label = majority_label(test_labels if train_labels is None else train_labels)
    return evaluate_predictions(test_labels, np.full(test_labels.shape, label), "dummy",
                                strategy=strategy, **extra)


def sort_results(results):
    """Deterministic table order: by strategy, then best MCC first, then names."""
    return sorted(results, key=lambda r: (r.strategy, -r.mcc, r.model, r.embedder, str(r.epoch)))


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_results_csv(results, path, extra_rows=()):
    """Write rows with :data:`RESULT_COLUMNS`; ``extra_rows`` are raw dicts (e.g. failure rows)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for r in results:
            row = r.to_row()
            writer.writerow([_fmt(row[k]) for k in RESULT_COLUMNS])
        for row in extra_rows:
            writer.writerow([_fmt(row.get(k, "")) for k in RESULT_COLUMNS])


def read_results_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
