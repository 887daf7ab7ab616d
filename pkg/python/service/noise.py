import math
import logging
from dataclasses import dataclass

import numpy as np

from library.config import make_generator
from library.core import LabelSet
from library.errors import InputError

logger = logging.getLogger(__name__)

NOISE_KINDS = ("symmetric", "asymmetric")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "symmetric"
    fraction: float = 0.0
    permutation: tuple = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise InputError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if not 0.0 <= float(self.fraction) <= 1.0:
            raise InputError(f"noise fraction must lie in [0, 1], got {self.fraction}")
        if self.permutation is not None:
            if self.kind != "asymmetric":
                raise InputError("a permutation only applies to asymmetric noise")
            object.__setattr__(self, "permutation", validate_permutation(self.permutation, len(self.permutation)))
        object.__setattr__(self, "fraction", float(self.fraction))
        object.__setattr__(self, "seed", int(self.seed))

    def to_dict(self):
        return {
            "kind": self.kind,
            "fraction": self.fraction,
            "permutation": None if self.permutation is None else list(self.permutation),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {"kind", "fraction", "permutation", "seed"}
        if unknown:
            raise InputError(f"unknown noise keys: {sorted(unknown)}")
        return cls(**data)


def corrupted_count(p, total):
    """round(p * total), halves rounded up."""
    return int(math.floor(float(p) * int(total) + 0.5))


def cyclic_permutation(num_classes):
    """Default asymmetric mapping c -> (c + 1) mod C."""
    return tuple((c + 1) % num_classes for c in range(num_classes))


def _select(labels, p, seed):
    if not 0.0 <= float(p) <= 1.0:
        raise InputError(f"noise fraction must lie in [0, 1], got {p}")
    total = len(labels)
    rng = make_generator(seed)
    chosen = rng.choice(total, size=corrupted_count(p, total), replace=False)
    mask = np.zeros(total, dtype=bool)
    mask[chosen] = True
    return rng, np.sort(chosen), mask


def inject_symmetric(labels, p, seed):
    """Flip round(p*T) labels, each uniformly to one of the other C - 1 classes."""
    num_classes = labels.num_classes
    if num_classes < 2:
        raise InputError("symmetric noise needs at least two classes")
    rng, chosen, mask = _select(labels, p, seed)
    noisy = labels.labels.copy()
    offsets = rng.integers(1, num_classes, size=chosen.size)
    noisy[chosen] = (noisy[chosen] + offsets) % num_classes
    logger.debug("Symmetric noise: %d of %d labels corrupted", chosen.size, len(labels))
    return LabelSet(noisy, num_classes), mask


def validate_permutation(permutation, num_classes):
    permutation = tuple(int(c) for c in permutation)
    if sorted(permutation) != list(range(num_classes)):
        raise InputError(f"permutation {permutation} is not a bijection on [0, {num_classes})")
    fixed = [c for c, image in enumerate(permutation) if c == image]
    if fixed:
        raise InputError(f"permutation has fixed points {fixed}; those classes would receive no noise")
    return permutation


def inject_asymmetric(labels, p, permutation=None, seed=0):
    """Map round(p*T) randomly chosen labels y to permutation[y]."""
    num_classes = labels.num_classes
    if permutation is None:
        permutation = cyclic_permutation(num_classes)
    table = np.asarray(validate_permutation(permutation, num_classes), dtype=np.int64)
    _, chosen, mask = _select(labels, p, seed)
    noisy = labels.labels.copy()
    noisy[chosen] = table[noisy[chosen]]
    logger.debug("Asymmetric noise: %d of %d labels corrupted", chosen.size, len(labels))
    return LabelSet(noisy, num_classes), mask


def inject_noise(labels, spec):
    if spec.kind == "symmetric":
        return inject_symmetric(labels, spec.fraction, spec.seed)
    return inject_asymmetric(labels, spec.fraction, spec.permutation, spec.seed)


def noise_transition_matrix(spec, num_classes):
    """Expected P(noisy = j | clean = i) for a corrupted fraction spec.fraction."""
    p = spec.fraction
    matrix = np.eye(num_classes) * (1.0 - p)
    if spec.kind == "symmetric":
        if num_classes < 2:
            raise InputError("symmetric noise needs at least two classes")
        matrix += (1.0 - np.eye(num_classes)) * (p / (num_classes - 1))
    else:
        permutation = spec.permutation or cyclic_permutation(num_classes)
        permutation = validate_permutation(permutation, num_classes)
        matrix[np.arange(num_classes), permutation] += p
    return matrix


def observed_transition_matrix(clean, noisy):
    """Row-normalised empirical transition counts between two label sets."""
    if len(clean) != len(noisy) or clean.num_classes != noisy.num_classes:
        raise InputError("clean and noisy label sets must match in length and classes")
    c = clean.num_classes
    counts = np.zeros((c, c), dtype=np.float64)
    np.add.at(counts, (clean.labels, noisy.labels), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
