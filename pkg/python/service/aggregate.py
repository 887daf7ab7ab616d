"""
Prediction-combination rules and diagnostics over a PredictionLog.

Every argmax in this module breaks ties toward the lowest class index
(numpy's argmax returns the first maximum). Agreement is accumulated as
exact integer vote counts, epoch outer and network inner, and only divided
at the end, so results do not depend on how the work is split.
"""

import logging
from dataclasses import dataclass

import numpy as np

from library.core import EpochSubset, AgreementTable, accuracy
from library.errors import InputError, CapabilityError

logger = logging.getLogger(__name__)

ECS_COUNTING = "example_class_pairs"


@dataclass(frozen=True)
class EcsHistogram:
    """counts[k - 1] is how many erroneous consensus groups had exactly k networks."""
    counts: np.ndarray
    total_errors: int
    checkpoint: int
    counting: str = ECS_COUNTING

    def __post_init__(self):
        if int(np.sum(self.counts)) != int(self.total_errors):
            raise InputError("ECS counts must sum to total_errors")

    @property
    def num_networks(self):
        return len(self.counts)


@dataclass(frozen=True)
class MarginReport:
    margins: np.ndarray
    final_votes: np.ndarray
    correct_mask: np.ndarray = None

    def split(self):
        """(margins of correct examples, margins of incorrect examples)."""
        if self.correct_mask is None:
            raise InputError("margin report was built without labels")
        return self.margins[self.correct_mask], self.margins[~self.correct_mask]


@dataclass(frozen=True)
class AggregationRule:
    kind: str
    network: int = None

    KINDS = ("single", "majority", "prob_average", "map_prefix", "map_full")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise InputError(f"unknown aggregation rule {self.kind!r}")
        if (self.kind == "single") != (self.network is not None):
            raise InputError("the single rule (and only it) takes a network index")

    @classmethod
    def parse(cls, text):
        """Accepts 'majority', 'prob_average', 'map_prefix', 'map_full', 'single:3' or 'single(3)'."""
        if isinstance(text, AggregationRule):
            return text
        text = str(text).strip()
        if text.startswith("single"):
            digits = text[len("single"):].strip(":() ")
            if not digits.isdigit():
                raise InputError(f"bad single-network rule {text!r}")
            return cls("single", int(digits))
        return cls(text)

    def __str__(self):
        return f"single:{self.network}" if self.kind == "single" else self.kind


def _vote_counts(log, checkpoint):
    """[T x C] number of networks predicting each class at one checkpoint."""
    t = log.num_examples
    counts = np.zeros((t, log.num_classes), dtype=np.int64)
    rows = np.arange(t)
    for network in range(log.num_networks):
        counts[rows, log.hard_preds[network, checkpoint]] += 1
    return counts


def agreement_counts(log, subset):
    """Integer numerators of Agr: votes per (example, class) summed over the subset."""
    subset.validate_for(log)
    counts = np.zeros((log.num_examples, log.num_classes), dtype=np.int64)
    for checkpoint in subset.indices:
        counts += _vote_counts(log, checkpoint)
    return counts


def epoch_vote(log, checkpoint):
    """Majority vote of the ensemble at one checkpoint."""
    index = log.resolve_checkpoint(checkpoint)
    return np.argmax(_vote_counts(log, index), axis=1)


def prob_average_vote(log, checkpoint):
    """Argmax of the networks' mean probability vector at one checkpoint."""
    if not log.has_soft:
        raise CapabilityError("class-probability averaging needs soft predictions, the log has none")
    index = log.resolve_checkpoint(checkpoint)
    total = np.zeros((log.num_examples, log.num_classes), dtype=np.float64)
    for network in range(log.num_networks):
        total += log.soft_preds[network, index]
    return np.argmax(total / log.num_networks, axis=1)


def agreement(log, subset):
    counts = agreement_counts(log, subset)
    scores = counts / float(log.num_networks * len(subset))
    return AgreementTable(scores, subset, counts)


def map_predict(log, subset):
    """Max Agreement Prediction: the class most agreed upon over the subset."""
    return np.argmax(agreement_counts(log, subset), axis=1)


def agr_margin(log, subset, labels=None):
    """Agr of the final-checkpoint vote minus the best competing class's Agr."""
    if log.num_classes < 2:
        raise InputError("agreement margin needs at least two classes")
    table = agreement(log, subset)
    final_votes = epoch_vote(log, log.final_index)
    rows = np.arange(log.num_examples)
    chosen = table.counts[rows, final_votes]
    rivals = table.counts.copy()
    rivals[rows, final_votes] = -1
    denominator = float(log.num_networks * len(subset))
    margins = (chosen - rivals.max(axis=1)) / denominator
    correct = None
    if labels is not None:
        check_labels(log, labels)
        correct = final_votes == labels.labels
    return MarginReport(margins, final_votes, correct)


def margin_histogram(report, bins):
    """Bin edges plus per-bin counts of correct and incorrect examples over [-1, 1]."""
    correct, incorrect = report.split()
    edges = np.linspace(-1.0, 1.0, int(bins) + 1)
    return edges, np.histogram(correct, edges)[0], np.histogram(incorrect, edges)[0]


def ecs_histogram(log, labels, checkpoint):
    """Error Consensus Score histogram at one checkpoint.

    For each example the checkpoint's ensemble vote gets wrong, every wrong
    class predicted by k >= 1 networks adds one to counts[k - 1].
    """
    check_labels(log, labels)
    index = log.resolve_checkpoint(checkpoint)
    votes = _vote_counts(log, index)
    wrong = np.argmax(votes, axis=1) != labels.labels
    groups = votes[wrong].copy()
    groups[np.arange(groups.shape[0]), labels.labels[wrong]] = 0
    sizes = groups[groups > 0]
    counts = np.bincount(sizes, minlength=log.num_networks + 1)[1:]
    return EcsHistogram(counts, int(sizes.size), index)


def subsample_epochs(total, k):
    """k equally spaced checkpoint positions out of total, always ending at the final one."""
    total, k = int(total), int(k)
    if total < 1 or not 1 <= k <= total:
        raise InputError(f"need 1 <= k <= total, got k={k}, total={total}")
    if k == 1:
        return EpochSubset.last(total)
    # round-half-up of i * (total - 1) / (k - 1), in integers
    return EpochSubset(tuple((2 * i * (total - 1) + (k - 1)) // (2 * (k - 1)) for i in range(k)))


def accuracy_curve(log, labels, rule):
    """Accuracy at every checkpoint under one aggregation rule."""
    rule = AggregationRule.parse(rule)
    check_labels(log, labels)
    truth = labels.labels
    curve = np.empty(log.num_checkpoints, dtype=np.float64)
    if rule.kind == "map_full":
        value = accuracy(map_predict(log, EpochSubset.all(log.num_checkpoints)), truth)
        curve[:] = value
        return curve
    running = np.zeros((log.num_examples, log.num_classes), dtype=np.int64)
    for e in range(log.num_checkpoints):
        if rule.kind == "single":
            if not 0 <= rule.network < log.num_networks:
                raise InputError(f"network {rule.network} out of range")
            preds = log.hard_preds[rule.network, e]
        elif rule.kind == "majority":
            preds = epoch_vote(log, e)
        elif rule.kind == "prob_average":
            preds = prob_average_vote(log, e)
        else:
            running += _vote_counts(log, e)
            preds = np.argmax(running, axis=1)
        curve[e] = accuracy(preds, truth)
    return curve


def best_epoch(log, labels):
    """Early-stopping oracle: (checkpoint position, accuracy) where majority vote peaks."""
    curve = accuracy_curve(log, labels, "majority")
    index = int(np.argmax(curve))
    return index, float(curve[index])


def ensemble_size_sweep(log, labels, subset, rule):
    """Entry n - 1 is the accuracy of the first n networks under 'majority' or 'map'."""
    if rule not in ("majority", "map"):
        raise InputError(f"sweep rule must be 'majority' or 'map', got {rule!r}")
    check_labels(log, labels)
    subset.validate_for(log)
    results = np.empty(log.num_networks, dtype=np.float64)
    for n in range(1, log.num_networks + 1):
        partial = log.first_networks(n)
        if rule == "majority":
            preds = epoch_vote(partial, partial.final_index)
        else:
            preds = map_predict(partial, subset)
        results[n - 1] = accuracy(preds, labels)
    return results


def checkpoint_count_sweep(log, labels, counts=None):
    """MAP accuracy using k equally spaced checkpoints, for each k in counts (default 1..E)."""
    check_labels(log, labels)
    total = log.num_checkpoints
    counts = range(1, total + 1) if counts is None else counts
    rows = []
    for k in counts:
        subset = subsample_epochs(total, k)
        rows.append((int(k), accuracy(map_predict(log, subset), labels)))
    return rows


def check_labels(log, labels):
    if len(labels) != log.num_examples:
        raise InputError(f"{len(labels)} labels for {log.num_examples} logged examples")
    if labels.num_classes != log.num_classes:
        raise InputError(f"labels declare {labels.num_classes} classes, log declares {log.num_classes}")
