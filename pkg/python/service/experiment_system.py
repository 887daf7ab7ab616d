"""
Experiment coordinator: binds the data, training, aggregation and theory
services into the reproducible pipelines behind the command line.

Every pipeline returns Tables or JSON-ready dicts stamped with the digest of
the manifest it came from; writing them out is left to the caller.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from library.config import HISTOGRAM_BINS, DEFAULT_ENSEMBLE_SIZE
from library.core import EpochSubset, accuracy
from library.errors import CapabilityError, InputError
from library.logfile import load_any_log, read_labels, write_log, write_labels
from library.manifest import (RunManifest, MANIFEST_NAME, read_json, write_manifest,
                              sha256_file, source_digest)
from library.tables import table, write_csv, write_json
from service import aggregate, theory
from service.toytrain import GaussianMixtureSpec, ToyRunConfig, make_dataset, train_ensemble

logger = logging.getLogger(__name__)

LOG_NAME = "predictions.eplg"
TEST_LABELS_NAME = "labels.json"
TRAIN_LABELS_NAME = "train_labels.json"
CLEAN_TRAIN_LABELS_NAME = "clean_train_labels.json"
TRAIN_ACCURACY_NAME = "train_accuracy.csv"


def parse_epochs(text, total):
    """`all`, `last`, or an integer k meaning k equally spaced checkpoints ending at the last."""
    text = str(text).strip().lower()
    if text == "all":
        return EpochSubset.all(total)
    if text == "last":
        return EpochSubset.last(total)
    if not text.isdigit():
        raise InputError(f"--epochs must be 'all', 'last' or a checkpoint count, got {text!r}")
    return aggregate.subsample_epochs(total, int(text))


# ---------------------------------------------------------------------------
# Toy runs
# ---------------------------------------------------------------------------

def toy_manifest(document):
    """Normalise a toy run document: derived seeds filled in, noise copied to the top level."""
    manifest = document if isinstance(document, RunManifest) else RunManifest.from_dict(document)
    if manifest.kind != "toy":
        raise InputError(f"synth gen needs a 'toy' manifest, got {manifest.kind!r}")
    config = dict(manifest.config)
    if "noise" not in config and manifest.noise is not None:
        config["noise"] = manifest.noise
    cfg = ToyRunConfig.from_dict(config)
    spec = GaussianMixtureSpec.from_dict(manifest.dataset or {})
    permutation = cfg.noise.permutation
    if permutation is not None and len(permutation) != spec.num_classes:
        raise InputError(f"noise permutation has {len(permutation)} entries for {spec.num_classes} classes")
    seeds = {"dataset": spec.seed, "run": cfg.seed, "noise": cfg.noise.seed,
             "init_seeds": list(cfg.init_seeds), "shuffle_seeds": list(cfg.shuffle_seeds)}
    return RunManifest("toy", cfg.to_dict(), spec.to_dict(), cfg.noise.to_dict(), seeds), cfg, spec


def synth_gen(config_path, out_dir, workers=1):
    """Dataset generation and ensemble training; writes the log, labels and the run manifest."""
    manifest, cfg, spec = toy_manifest(read_json(config_path))
    out_dir = Path(out_dir)
    digest = manifest.digest
    logger.info("Synth run %s: %d %s networks, %d epochs", digest[:12], cfg.num_networks, cfg.model,
                cfg.epochs)

    data = make_dataset(spec, noise=cfg.noise)
    result = train_ensemble(data, cfg, workers)

    write_log(out_dir / LOG_NAME, result.log)
    write_labels(out_dir / TEST_LABELS_NAME, data.test_labels)
    write_labels(out_dir / TRAIN_LABELS_NAME, data.train_labels)
    write_labels(out_dir / CLEAN_TRAIN_LABELS_NAME, data.clean_train_labels)

    columns = ["checkpoint_index", "checkpoint", "epoch", "train_accuracy", "clean_train_accuracy"]
    columns += [f"train_accuracy_{i}" for i in range(cfg.num_networks)]
    rows = []
    for e, checkpoint in enumerate(result.log.checkpoints):
        per_network = result.train_accuracy[:, e]
        rows.append((e, str(checkpoint), float(checkpoint), float(per_network.mean()),
                     float(result.clean_train_accuracy[:, e].mean()), *map(float, per_network)))
    write_csv(out_dir / TRAIN_ACCURACY_NAME,
              table(columns, rows, chart="line", x="epoch", series="train_accuracy,clean_train_accuracy",
                    manifest_digest=digest, title="train accuracy (noisy vs clean labels)"))

    outputs = {name: sha256_file(out_dir / name) for name in
               (LOG_NAME, TEST_LABELS_NAME, TRAIN_LABELS_NAME, CLEAN_TRAIN_LABELS_NAME, TRAIN_ACCURACY_NAME)}
    write_manifest(out_dir / MANIFEST_NAME, manifest.with_outputs(outputs))
    return manifest.with_outputs(outputs), result


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------

@dataclass
class AnalysisInputs:
    log: object
    labels: object
    digest: str
    log_digest: str

    @property
    def stamp(self):
        return {"manifest_digest": self.digest, "log_digest": self.log_digest}


def load_inputs(log_path, labels_path, networks=None):
    log = load_any_log(log_path)
    labels = read_labels(labels_path)
    if networks is not None:
        log = log.first_networks(networks)
    return AnalysisInputs(log, labels, source_digest(log_path), sha256_file(log_path))


def analyze_map(inputs, epochs="all"):
    log, labels = inputs.log, inputs.labels
    subset = parse_epochs(epochs, log.num_checkpoints)
    aggregate.check_labels(log, labels)
    preds = aggregate.map_predict(log, subset)
    return {
        "command": "analyze map",
        "num_networks": log.num_networks,
        "epochs": list(subset.indices),
        "accuracy": accuracy(preds, labels),
        "predictions": preds.astype(int).tolist(),
        **inputs.stamp,
    }


def map_predictions_table(inputs, epochs="all"):
    log, labels = inputs.log, inputs.labels
    subset = parse_epochs(epochs, log.num_checkpoints)
    aggregate.check_labels(log, labels)
    preds = aggregate.map_predict(log, subset)
    rows = [(t, int(p), int(y), bool(p == y)) for t, (p, y) in enumerate(zip(preds, labels.labels))]
    return table(["example", "prediction", "label", "correct"], rows,
                 accuracy=accuracy(preds, labels), epochs=len(subset), **inputs.stamp)


BASELINE_RULES = aggregate.AggregationRule.KINDS[1:]
AUTO_RULES = ("majority", "prob_average", "map_prefix")


def parse_rules(rules, log):
    """'auto' is every baseline the log supports; otherwise a comma list, all of which must be computable."""
    text = str(rules).strip().lower()
    if text == "auto":
        if not log.has_soft:
            logger.warning("Log has no soft predictions; skipping the prob_average baseline")
        return [r for r in AUTO_RULES if r != "prob_average" or log.has_soft]
    names = [name.strip() for name in text.split(",") if name.strip()]
    unknown = [name for name in names if name not in BASELINE_RULES]
    if not names or unknown:
        raise InputError(f"--rules must be 'auto' or a comma list of {', '.join(BASELINE_RULES)}, got {rules!r}")
    if "prob_average" in names and not log.has_soft:
        raise CapabilityError("prob_average needs soft predictions and the log has none")
    return list(dict.fromkeys(names))


def analyze_baselines(inputs, rules="auto"):
    """Per-checkpoint accuracy of every network plus the requested ensemble rules."""
    log, labels = inputs.log, inputs.labels
    selected = parse_rules(rules, log)
    curves = {f"single_{i}": aggregate.accuracy_curve(log, labels, f"single:{i}")
              for i in range(log.num_networks)}
    for rule in selected:
        curves[rule] = aggregate.accuracy_curve(log, labels, rule)
    best_index, best_accuracy = aggregate.best_epoch(log, labels)

    single = np.mean([curves[f"single_{i}"] for i in range(log.num_networks)], axis=0)
    columns = ["checkpoint_index", "checkpoint", "epoch", "single_mean", *curves]
    rows = [(e, str(c), float(c), float(single[e]), *(float(v[e]) for v in curves.values()))
            for e, c in enumerate(log.checkpoints)]
    return table(columns, rows, chart="line", x="epoch", series=",".join(["single_mean", *selected]),
                 best_epoch_index=best_index, best_epoch=str(log.checkpoints[best_index]),
                 best_epoch_accuracy=repr(best_accuracy), title="test accuracy per checkpoint",
                 **inputs.stamp)


def analyze_ecs(inputs, checkpoint="last"):
    log = inputs.log
    text = str(checkpoint).strip().lower()
    if text == "last":
        index = log.final_index
    elif text.lstrip("-").isdigit():
        index = int(text)
    else:
        raise InputError(f"--checkpoint must be 'last' or a checkpoint position, got {checkpoint!r}")
    histogram = aggregate.ecs_histogram(log, inputs.labels, index)
    rows = [(k + 1, int(count)) for k, count in enumerate(histogram.counts)]
    return table(["consensus_size", "groups"], rows, chart="histogram",
                 checkpoint_index=histogram.checkpoint, total_errors=histogram.total_errors,
                 counting=histogram.counting, title="error consensus", **inputs.stamp)


def analyze_margin(inputs, epochs="all", bins=HISTOGRAM_BINS, raw=False):
    """Agreement margins of the final-checkpoint vote, per example or binned by correctness."""
    log = inputs.log
    subset = parse_epochs(epochs, log.num_checkpoints)
    report = aggregate.agr_margin(log, subset, inputs.labels)
    if raw:
        rows = [(t, float(m), int(v), int(y), bool(ok)) for t, (m, v, y, ok) in
                enumerate(zip(report.margins, report.final_votes, inputs.labels.labels, report.correct_mask))]
        return table(["example", "margin", "final_vote", "label", "correct"], rows,
                     epochs=len(subset), **inputs.stamp)
    edges, correct, incorrect = aggregate.margin_histogram(report, bins)
    rows = [(float(lo), float(hi), int(c), int(w))
            for lo, hi, c, w in zip(edges[:-1], edges[1:], correct, incorrect)]
    return table(["bin_low", "bin_high", "correct", "incorrect"], rows, chart="histogram",
                 x="bin_low", series="correct,incorrect", epochs=len(subset),
                 title="agreement margin by correctness", **inputs.stamp)


def analyze_sweep(inputs, axis, epochs="all"):
    log, labels = inputs.log, inputs.labels
    if axis == "networks":
        subset = parse_epochs(epochs, log.num_checkpoints)
        majority = aggregate.ensemble_size_sweep(log, labels, subset, "majority")
        mapped = aggregate.ensemble_size_sweep(log, labels, subset, "map")
        rows = [(n + 1, float(a), float(b)) for n, (a, b) in enumerate(zip(majority, mapped))]
        return table(["networks", "majority", "map"], rows, chart="line", epochs=len(subset),
                     title="accuracy vs ensemble size", **inputs.stamp)
    if axis == "epochs":
        rows = aggregate.checkpoint_count_sweep(log, labels)
        return table(["checkpoints", "map"], rows, chart="line",
                     title="MAP accuracy vs number of checkpoints", **inputs.stamp)
    raise InputError(f"sweep axis must be 'networks' or 'epochs', got {axis!r}")


# ---------------------------------------------------------------------------
# Theory
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TheoryConfig:
    instance: dict = None
    problem: dict = None
    ensemble_size: int = DEFAULT_ENSEMBLE_SIZE
    steps: int = 1000
    mu: float = None
    seed: int = 0
    init_scale: float = None
    lemma1: dict = field(default_factory=dict)
    lemma2: dict = field(default_factory=dict)
    c_prime_grid: tuple = ()

    INSTANCE_KEYS = ("d", "M", "Nt", "label_noise", "seed", "mu", "horizon")

    def __post_init__(self):
        if (self.instance is None) == (self.problem is None):
            raise InputError("theory config needs exactly one of 'instance' or 'problem'")
        if self.instance is not None:
            unknown = set(self.instance) - set(self.INSTANCE_KEYS)
            if unknown:
                raise InputError(f"unknown instance keys: {sorted(unknown)}")
        if self.ensemble_size < 2 or self.steps < 1:
            raise InputError("ensemble_size must be >= 2 and steps >= 1")
        object.__setattr__(self, "c_prime_grid", tuple((int(q), int(s)) for q, s in self.c_prime_grid))

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown theory keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return {
            "instance": self.instance, "problem": self.problem,
            "ensemble_size": self.ensemble_size, "steps": self.steps, "mu": self.mu,
            "seed": self.seed, "init_scale": self.init_scale, "lemma1": self.lemma1,
            "lemma2": self.lemma2, "c_prime_grid": [list(g) for g in self.c_prime_grid],
        }

    def build_problem(self):
        if self.instance is not None:
            problem = theory.make_overfit_instance(**self.instance)
        else:
            p = self.problem
            missing = {"X", "y", "Xt", "yt"} - set(p)
            if missing:
                raise InputError(f"theory problem is missing {sorted(missing)}")
            if p.get("mu", self.mu) is None:
                raise InputError("theory problem needs a learning rate 'mu'")
            problem = theory.RegressionProblem(p["X"], p["y"], p["Xt"], p["yt"], p.get("mu", self.mu))
        if self.mu is not None:
            problem = problem.with_mu(self.mu)
        return problem


def load_theory_config(path):
    data = read_json(path)
    if "kind" in data:
        manifest = RunManifest.from_dict(data)
        if manifest.kind != "theory":
            raise InputError(f"theory commands need a 'theory' manifest, got {manifest.kind!r}")
        data = manifest.config
    return TheoryConfig.from_dict(data)


def theory_manifest(cfg, problem):
    seeds = {"ensemble": cfg.seed, "instance": problem.seed}
    return RunManifest("theory", cfg.to_dict(), seeds=seeds)


def theory_run(config_path, out_dir):
    cfg = load_theory_config(config_path)
    problem = cfg.build_problem()
    manifest = theory_manifest(cfg, problem)
    digest = manifest.digest
    out_dir = Path(out_dir)

    report = theory.theorem_check(problem, cfg.ensemble_size, None, cfg.steps, cfg.seed, cfg.init_scale)
    document = {"command": "theory run", "instance_seed": problem.seed,
                "contraction_norm": problem.contraction_norm(), "report": report.to_dict()}
    write_json(out_dir / "theorem_report.json", document, manifest_digest=digest)

    rows = zip(report.steps, report.disagreement, report.expected_disagreement, report.delta_disagreement,
               report.c_prime, report.c_double_prime, report.remainder, report.approximation_error,
               report.overfit_fraction, report.lemma1_consistent, report.tail)
    columns = ["step", "disagreement", "expected_disagreement", "delta_disagreement", "c_prime",
               "c_double_prime", "remainder", "approximation_error", "overfit_fraction", "lemma1_consistent", "tail"]
    write_csv(out_dir / "theorem_steps.csv",
              table(columns, [tuple(r) for r in rows], chart="line",
                    series="disagreement,expected_disagreement",
                    manifest_digest=digest, title="ensemble disagreement per step"))
    names = ["theorem_report.json", "theorem_steps.csv"]

    if cfg.c_prime_grid:
        sweep = theory.c_prime_sweep(problem, cfg.c_prime_grid, cfg.seed, cfg.init_scale)
        write_csv(out_dir / "c_prime_sweep.csv",
                  table(["ensemble_size", "steps", "abs_c_prime"], sweep, manifest_digest=digest))
        names.append("c_prime_sweep.csv")

    outputs = {name: sha256_file(out_dir / name) for name in names}
    write_manifest(out_dir / MANIFEST_NAME, manifest.with_outputs(outputs))
    return report


def theory_lemma1(config_path):
    cfg = load_theory_config(config_path)
    problem = cfg.build_problem()
    options = dict(cfg.lemma1)
    state = theory.init_state(problem, cfg.ensemble_size, cfg.init_scale, cfg.seed)
    state = theory.run_steps(state, problem, options.get("step", 0))
    models = options.get("models", [0])
    reports = [theory.lemma1_check(state, problem, i, options.get("mus")).to_dict() for i in models]
    return {"command": "theory lemma1", "step": state.step, "reports": reports,
            "manifest_digest": theory_manifest(cfg, problem).digest}


def theory_lemma2(config_path):
    cfg = load_theory_config(config_path)
    problem = cfg.build_problem()
    options = dict(cfg.lemma2)
    sizes = options.get("sizes", [16, 64, 256])
    steps = options.get("steps", [cfg.steps])
    reports = [theory.lemma2_check(problem, q, s, cfg.init_scale, cfg.seed).to_dict()
               for q in sizes for s in steps]
    return {"command": "theory lemma2", "passed": all(r["passed"] for r in reports),
            "reports": reports, "manifest_digest": theory_manifest(cfg, problem).digest}
