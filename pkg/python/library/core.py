"""
Domain types shared by every module.

All types are frozen after construction and their arrays are flagged
read-only, so they can be shared across threads freely.
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from library.config import SOFT_SUM_TOLERANCE, AGREEMENT_ROW_TOLERANCE
from library.errors import InputError


def to_checkpoint(value):
    """Parse an epoch identifier (int, Fraction, float or "num/den") to an exact rational."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, np.integer)):
        return Fraction(int(value))
    if isinstance(value, (float, np.floating)):
        if not np.isfinite(value):
            raise InputError(f"checkpoint must be finite, got {value}")
        return Fraction(repr(float(value)))
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as e:
            raise InputError(f"bad checkpoint identifier {value!r}") from e
    raise InputError(f"bad checkpoint identifier {value!r}")


def smallest_label_dtype(num_classes):
    """Smallest unsigned integer type holding num_classes - 1."""
    return np.min_scalar_type(max(int(num_classes) - 1, 0))


def _frozen(array):
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


def _class_indices(values, name):
    """Reject arrays that are not whole-number class indices."""
    values = np.asarray(values)
    if values.size == 0 or np.issubdtype(values.dtype, np.integer):
        return values
    if not np.issubdtype(values.dtype, np.floating):
        raise InputError(f"{name} must hold integer class indices, got dtype {values.dtype}")
    if not np.all(np.isfinite(values)) or not np.all(np.equal(np.mod(values, 1), 0)):
        raise InputError(f"{name} must hold integer class indices")
    return values


@dataclass(frozen=True)
class PredictionLog:
    """Predicted class per (network, checkpoint, example), optionally with probabilities."""
    hard_preds: np.ndarray
    checkpoints: tuple
    num_classes: int
    soft_preds: np.ndarray = None

    def __post_init__(self):
        num_classes = int(self.num_classes)
        if num_classes < 1:
            raise InputError("num_classes must be positive")
        object.__setattr__(self, "num_classes", num_classes)

        checkpoints = tuple(to_checkpoint(c) for c in self.checkpoints)
        if not checkpoints:
            raise InputError("a log needs at least one checkpoint")
        if any(b <= a for a, b in zip(checkpoints, checkpoints[1:])):
            raise InputError("checkpoints must be strictly increasing")
        object.__setattr__(self, "checkpoints", checkpoints)

        hard = _class_indices(self.hard_preds, "hard_preds")
        if hard.ndim != 3:
            raise InputError(f"hard_preds must be [N x E x T], got shape {hard.shape}")
        n, e, t = hard.shape
        if n < 1 or t < 1:
            raise InputError("a log needs at least one network and one example")
        if e != len(checkpoints):
            raise InputError(f"hard_preds has {e} checkpoints, header lists {len(checkpoints)}")
        if hard.size and (hard.min() < 0 or hard.max() >= num_classes):
            raise InputError(f"hard_preds entries must lie in [0, {num_classes})")
        object.__setattr__(self, "hard_preds", _frozen(hard.astype(smallest_label_dtype(num_classes))))

        if self.soft_preds is not None:
            soft = np.asarray(self.soft_preds, dtype=np.float32)
            if soft.shape != (n, e, t, num_classes):
                raise InputError(f"soft_preds must be {(n, e, t, num_classes)}, got {soft.shape}")
            if not np.all(np.isfinite(soft)) or soft.min() < 0:
                raise InputError("soft_preds must be finite and nonnegative")
            sums = soft.sum(axis=-1, dtype=np.float64)
            if np.max(np.abs(sums - 1.0)) > SOFT_SUM_TOLERANCE:
                raise InputError("each soft_preds slice must sum to 1")
            if not np.array_equal(np.argmax(soft, axis=-1), self.hard_preds):
                raise InputError("argmax of soft_preds disagrees with hard_preds")
            object.__setattr__(self, "soft_preds", _frozen(soft))

    @property
    def num_networks(self):
        return self.hard_preds.shape[0]

    @property
    def num_checkpoints(self):
        return self.hard_preds.shape[1]

    @property
    def num_examples(self):
        return self.hard_preds.shape[2]

    @property
    def has_soft(self):
        return self.soft_preds is not None

    @property
    def final_index(self):
        return self.num_checkpoints - 1

    def resolve_checkpoint(self, checkpoint):
        """Validate a checkpoint position; negative positions count from the end."""
        index = int(checkpoint)
        if index < 0:
            index += self.num_checkpoints
        if not 0 <= index < self.num_checkpoints:
            raise InputError(f"checkpoint {checkpoint} out of range for {self.num_checkpoints} checkpoints")
        return index

    def first_networks(self, count):
        """The same log restricted to networks 0..count-1."""
        count = int(count)
        if not 1 <= count <= self.num_networks:
            raise InputError(f"network count must lie in [1, {self.num_networks}], got {count}")
        soft = None if self.soft_preds is None else self.soft_preds[:count]
        return PredictionLog(self.hard_preds[:count], self.checkpoints, self.num_classes, soft)

    def permute_networks(self, order):
        order = np.asarray(order)
        soft = None if self.soft_preds is None else self.soft_preds[order]
        return PredictionLog(self.hard_preds[order], self.checkpoints, self.num_classes, soft)


@dataclass(frozen=True)
class LabelSet:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        num_classes = int(self.num_classes)
        if num_classes < 1:
            raise InputError("num_classes must be positive")
        labels = _class_indices(self.labels, "labels")
        if labels.ndim != 1:
            raise InputError("labels must be a vector")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise InputError(f"labels must lie in [0, {num_classes})")
        object.__setattr__(self, "num_classes", num_classes)
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int64)))

    def __len__(self):
        return self.labels.shape[0]


@dataclass(frozen=True)
class EpochSubset:
    """The set of checkpoint positions an agreement score is averaged over."""
    indices: tuple

    def __post_init__(self):
        indices = tuple(int(i) for i in self.indices)
        if not indices:
            raise InputError("epoch subset must be nonempty")
        if indices[0] < 0 or any(b <= a for a, b in zip(indices, indices[1:])):
            raise InputError("epoch subset must be nonnegative and strictly increasing")
        object.__setattr__(self, "indices", indices)

    @classmethod
    def all(cls, total):
        return cls(tuple(range(int(total))))

    @classmethod
    def last(cls, total):
        return cls((int(total) - 1,))

    @classmethod
    def prefix(cls, end):
        """Checkpoints 0..end inclusive."""
        return cls(tuple(range(int(end) + 1)))

    def __len__(self):
        return len(self.indices)

    def validate_for(self, log):
        if self.indices[-1] >= log.num_checkpoints:
            raise InputError(f"epoch subset index {self.indices[-1]} out of range for "
                             f"{log.num_checkpoints} checkpoints")
        return self


@dataclass(frozen=True)
class AgreementTable:
    scores: np.ndarray
    epoch_subset: EpochSubset
    counts: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            raise InputError("agreement scores must be [T x C]")
        if scores.size and (scores.min() < 0 or scores.max() > 1):
            raise InputError("agreement scores must lie in [0, 1]")
        if np.max(np.abs(scores.sum(axis=1) - 1.0), initial=0.0) > AGREEMENT_ROW_TOLERANCE:
            raise InputError("agreement rows must sum to 1")
        object.__setattr__(self, "scores", _frozen(scores))
        if self.counts is not None:
            object.__setattr__(self, "counts", _frozen(np.asarray(self.counts, dtype=np.int64)))


def accuracy(preds, labels):
    """Fraction of positions where preds equals labels."""
    preds = np.asarray(preds)
    truth = labels.labels if isinstance(labels, LabelSet) else np.asarray(labels)
    if preds.shape != truth.shape:
        raise InputError(f"prediction length {preds.shape} does not match label length {truth.shape}")
    if truth.size == 0:
        raise InputError("accuracy of an empty label set is undefined")
    return float(np.count_nonzero(preds == truth)) / truth.size
