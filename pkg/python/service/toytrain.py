"""
Desk-scale ensemble training on synthetic Gaussian-mixture data.

Models are softmax regression or small MLPs with hand-written reverse-mode
gradients; training is mini-batch SGD with momentum and weight decay on the
cross-entropy loss. Every network draws from its own two PCG64 streams
(init, shuffle), so a network's log never depends on its siblings.
"""

import math
import logging
import threading
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from library.config import (DEFAULT_BATCH_SIZE, DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM,
                            DEFAULT_WEIGHT_DECAY, make_generator)
from library.core import PredictionLog, LabelSet, to_checkpoint
from library.errors import InputError, DivergenceError
from service.noise import NoiseSpec, inject_noise

logger = logging.getLogger(__name__)

MODELS = ("softmax_regression", "mlp")
ACTIVATIONS = ("relu", "tanh")
SCHEDULES = ("constant", "cosine")

# SeedSequence child streams of a dataset seed
_MEANS_STREAM, _TRAIN_STREAM, _TEST_STREAM = 0, 1, 2


def derive_seed(base, index):
    """A 32-bit seed for stream `index` of `base`, independent of how many streams exist."""
    return int(np.random.SeedSequence(int(base), spawn_key=(int(index),)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianMixtureSpec:
    num_classes: int = 4
    dim: int = 2
    train_size: int = 400
    test_size: int = 1000
    separation: float = 3.0
    spread: float = 1.0
    means: tuple = None
    covariances: tuple = None
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.dim < 2:
            raise InputError("a mixture needs at least two classes and two dimensions")
        if self.train_size < 1 or self.test_size < 1:
            raise InputError("train_size and test_size must be positive")
        if self.spread <= 0:
            raise InputError("spread must be positive")

    def to_dict(self):
        def listify(value):
            return None if value is None else np.asarray(value, dtype=float).tolist()
        return {
            "num_classes": self.num_classes, "dim": self.dim,
            "train_size": self.train_size, "test_size": self.test_size,
            "separation": self.separation, "spread": self.spread,
            "means": listify(self.means), "covariances": listify(self.covariances),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown dataset keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("means", "covariances"):
            if data.get(key) is not None:
                data[key] = tuple(map(tuple, np.asarray(data[key], dtype=float).reshape(
                    len(data[key]), -1).tolist()))
        return cls(**data)


@dataclass(frozen=True)
class SyntheticDataset:
    train_inputs: np.ndarray
    train_labels: LabelSet
    clean_train_labels: LabelSet
    test_inputs: np.ndarray
    test_labels: LabelSet
    generator_spec: GaussianMixtureSpec
    corrupted_mask: np.ndarray = None
    noise: NoiseSpec = None


def _mixture_parameters(spec, rng):
    c, d = spec.num_classes, spec.dim
    if spec.means is None:
        directions = rng.standard_normal((c, d))
        means = spec.separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    else:
        means = np.asarray(spec.means, dtype=np.float64)
        if means.shape != (c, d):
            raise InputError(f"means must be {(c, d)}, got {means.shape}")
    if len({tuple(m) for m in means}) < c:
        logger.warning("Cluster means are not pairwise distinct; classes overlap completely")

    if spec.covariances is None:
        factors = np.repeat((spec.spread * np.eye(d))[None], c, axis=0)
    else:
        covariances = np.asarray(spec.covariances, dtype=np.float64).reshape(c, d, d)
        factors = np.empty_like(covariances)
        for k, cov in enumerate(covariances):
            if not np.allclose(cov, cov.T):
                raise InputError(f"covariance {k} is not symmetric")
            eigenvalues = np.linalg.eigvalsh(cov)
            if eigenvalues[0] <= 1e-12 * max(eigenvalues[-1], 1.0):
                raise InputError(f"covariance {k} is degenerate (smallest eigenvalue {eigenvalues[0]:.3g})")
            factors[k] = np.linalg.cholesky(cov)
    return means, factors


def _sample(means, factors, size, rng):
    c, d = means.shape
    labels = rng.integers(0, c, size=size)
    noise = rng.standard_normal((size, d))
    inputs = np.empty((size, d), dtype=np.float64)
    for k in range(c):
        rows = labels == k
        inputs[rows] = means[k] + noise[rows] @ factors[k].T
    return inputs, labels


def make_dataset(spec, seed=None, noise=None):
    """Gaussian mixture, one component per class, uniform priors; test labels always clean."""
    seed = spec.seed if seed is None else int(seed)
    means, factors = _mixture_parameters(spec, make_generator(seed, _MEANS_STREAM))
    train_x, train_y = _sample(means, factors, spec.train_size, make_generator(seed, _TRAIN_STREAM))
    test_x, test_y = _sample(means, factors, spec.test_size, make_generator(seed, _TEST_STREAM))

    clean = LabelSet(train_y, spec.num_classes)
    if noise is None:
        noisy, mask = clean, np.zeros(spec.train_size, dtype=bool)
    else:
        noisy, mask = inject_noise(clean, noise)
    logger.info("Dataset ready: %d train (%d corrupted), %d test, %d classes in %d dims",
                spec.train_size, int(mask.sum()), spec.test_size, spec.num_classes, spec.dim)
    return SyntheticDataset(train_x, noisy, clean, test_x, LabelSet(test_y, spec.num_classes),
                            spec, mask, noise)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def cross_entropy(logits, targets):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_norm - shifted[np.arange(len(targets)), targets]))


class MultilayerPerceptron:
    """Fully connected net; with no hidden layers it is softmax regression."""
    def __init__(self, layer_sizes, activation="relu", rng=None):
        if activation not in ACTIVATIONS:
            raise InputError(f"activation must be one of {ACTIVATIONS}")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.activation = activation
        self.params = []
        rng = rng if rng is not None else make_generator(0)
        for fan_in, fan_out in zip(self.layer_sizes, self.layer_sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, size=fan_out))

    def _act(self, z):
        return np.maximum(z, 0.0) if self.activation == "relu" else np.tanh(z)

    def _act_grad(self, z, a):
        return (z > 0).astype(z.dtype) if self.activation == "relu" else 1.0 - a * a

    def forward(self, x):
        """Logits plus the cache the backward pass needs."""
        cache = []
        a = x
        layers = len(self.params) // 2
        for layer in range(layers):
            w, b = self.params[2 * layer], self.params[2 * layer + 1]
            z = a @ w + b
            cache.append((a, z))
            a = z if layer == layers - 1 else self._act(z)
        return a, cache

    def backward(self, cache, dlogits):
        grads = [None] * len(self.params)
        delta = dlogits
        for layer in reversed(range(len(cache))):
            a_in, _ = cache[layer]
            grads[2 * layer] = a_in.T @ delta
            grads[2 * layer + 1] = delta.sum(axis=0)
            if layer:
                _, prev_z = cache[layer - 1]
                delta = (delta @ self.params[2 * layer].T) * self._act_grad(prev_z, a_in)
        return grads

    def loss_and_grads(self, x, targets):
        """Mean cross-entropy over the batch and its gradient (no weight decay)."""
        logits, cache = self.forward(x)
        probs = softmax(logits)
        dlogits = probs.copy()
        dlogits[np.arange(len(targets)), targets] -= 1.0
        dlogits /= len(targets)
        return cross_entropy(logits, targets), self.backward(cache, dlogits)

    def predict_proba(self, x):
        return softmax(self.forward(x)[0])


def build_model(cfg, input_dim, num_classes, rng):
    hidden = () if cfg.model == "softmax_regression" else cfg.hidden_sizes
    return MultilayerPerceptron((input_dim, *hidden, num_classes), cfg.activation, rng)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyRunConfig:
    model: str = "mlp"
    hidden_sizes: tuple = (64,)
    activation: str = "relu"
    num_networks: int = 5
    epochs: int = 100
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    schedule: str = "constant"
    checkpoint_every: Fraction = Fraction(1)
    init_seeds: tuple = None
    shuffle_seeds: tuple = None
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODELS:
            raise InputError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.schedule not in SCHEDULES:
            raise InputError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.num_networks < 1 or self.epochs < 1 or self.batch_size < 1:
            raise InputError("num_networks, epochs and batch_size must be positive")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise InputError("need learning_rate > 0, 0 <= momentum < 1, weight_decay >= 0")
        every = to_checkpoint(self.checkpoint_every)
        if every <= 0:
            raise InputError("checkpoint_every must be positive")
        if math.floor(self.epochs / every) < 2:
            raise InputError("checkpoint_every must leave at least two checkpoints")
        object.__setattr__(self, "checkpoint_every", every)
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        for name in ("init_seeds", "shuffle_seeds"):
            seeds = getattr(self, name)
            if seeds is None:
                offset = 0 if name == "init_seeds" else 1
                seeds = tuple(derive_seed(self.seed, 2 * i + offset) for i in range(self.num_networks))
            seeds = tuple(int(s) for s in seeds)
            if len(seeds) != self.num_networks:
                raise InputError(f"{name} must list one seed per network")
            object.__setattr__(self, name, seeds)

    def checkpoint_times(self):
        count = math.floor(self.epochs / self.checkpoint_every)
        return tuple(self.checkpoint_every * k for k in range(1, count + 1))

    def to_dict(self):
        return {
            "model": self.model, "hidden_sizes": list(self.hidden_sizes),
            "activation": self.activation, "num_networks": self.num_networks,
            "epochs": self.epochs, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "momentum": self.momentum,
            "weight_decay": self.weight_decay, "schedule": self.schedule,
            "checkpoint_every": str(self.checkpoint_every),
            "init_seeds": list(self.init_seeds), "shuffle_seeds": list(self.shuffle_seeds),
            "noise": self.noise.to_dict(), "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown training keys: {sorted(unknown)}")
        data = dict(data)
        if "noise" in data:
            data["noise"] = NoiseSpec.from_dict(data["noise"])
        if "hidden_sizes" in data:
            data["hidden_sizes"] = tuple(data["hidden_sizes"])
        return cls(**data)


@dataclass(frozen=True)
class NetworkRun:
    hard: np.ndarray
    soft: np.ndarray
    train_accuracy: np.ndarray
    clean_train_accuracy: np.ndarray
    final_loss: float


@dataclass(frozen=True)
class TrainingResult:
    log: PredictionLog
    train_accuracy: np.ndarray
    clean_train_accuracy: np.ndarray
    final_losses: tuple


def _checkpoint_steps(cfg, batches_per_epoch):
    steps = [int(math.floor(t * batches_per_epoch)) for t in cfg.checkpoint_times()]
    if steps[0] < 1 or any(b <= a for a, b in zip(steps, steps[1:])):
        raise InputError("checkpoint cadence is finer than one mini-batch")
    return steps


def train_network(data, cfg, index, should_stop=None):
    """Train ensemble member `index` and record its test predictions at every checkpoint."""
    x, y = data.train_inputs, data.train_labels.labels
    clean_y = data.clean_train_labels.labels
    num_classes = data.test_labels.num_classes
    model = build_model(cfg, x.shape[1], num_classes, make_generator(cfg.init_seeds[index]))
    shuffle_rng = make_generator(cfg.shuffle_seeds[index])
    velocity = [np.zeros_like(p) for p in model.params]

    batches = math.ceil(len(y) / cfg.batch_size)
    steps = _checkpoint_steps(cfg, batches)
    hard, soft, train_acc, clean_acc = [], [], [], []
    step, loss = 0, float("nan")

    for epoch in range(cfg.epochs):
        if should_stop is not None and should_stop():
            raise InterruptedError(f"network {index} stopped at epoch {epoch}")
        lr = cfg.learning_rate
        if cfg.schedule == "cosine":
            lr *= 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        order = shuffle_rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, grads = model.loss_and_grads(x[batch], y[batch])
            if not math.isfinite(loss):
                raise DivergenceError(f"network {index} diverged at epoch {epoch + 1} "
                                      f"(non-finite loss; learning rate {cfg.learning_rate} too high?)")
            for p, g, v in zip(model.params, grads, velocity):
                v *= cfg.momentum
                v += g + cfg.weight_decay * p
                p -= lr * v
            step += 1
            while steps and len(hard) < len(steps) and steps[len(hard)] == step:
                probs = model.predict_proba(data.test_inputs).astype(np.float32)
                soft.append(probs)
                hard.append(np.argmax(probs, axis=1))
                train_pred = np.argmax(model.predict_proba(x), axis=1)
                train_acc.append(np.mean(train_pred == y))
                clean_acc.append(np.mean(train_pred == clean_y))
        logger.debug("network %d epoch %d loss %.4f", index, epoch + 1, loss)

    return NetworkRun(np.stack(hard), np.stack(soft), np.asarray(train_acc),
                      np.asarray(clean_acc), loss)


class TrainingService:
    """Trains the ensemble members on background threads and merges them by index"""
    def __init__(self, data, cfg, workers=1):
        self.data = data
        self.cfg = cfg
        self.workers = max(1, min(int(workers), cfg.num_networks))
        self.running = False
        self.runs = {}
        self.errors = {}
        self.threads = []
        self.data_lock = threading.Lock()

    def start(self):
        """Start one worker thread per slice of networks"""
        self.running = True
        for worker in range(self.workers):
            indices = list(range(worker, self.cfg.num_networks, self.workers))
            thread = threading.Thread(target=self._training_worker, args=(indices,), daemon=True)
            thread.start()
            self.threads.append(thread)
        logger.info("Training service started: %d networks on %d threads",
                    self.cfg.num_networks, self.workers)

    def _training_worker(self, indices):
        for index in indices:
            try:
                run = train_network(self.data, self.cfg, index, should_stop=lambda: not self.running)
                with self.data_lock:
                    self.runs[index] = run
                logger.info("Network %d trained (final loss %.4f)", index, run.final_loss)
            except InterruptedError as e:
                with self.data_lock:
                    self.errors[index] = e
                return
            except Exception as e:
                logger.error("Network %d failed: %s; stopping the other workers", index, e)
                with self.data_lock:
                    self.errors[index] = e
                self.stop()
                return

    def wait(self):
        for thread in self.threads:
            thread.join()
        self.running = False

    def get_result(self):
        """Merged result; re-raises the failure of the lowest-indexed network, interruptions last"""
        with self.data_lock:
            if self.errors:
                failures = [i for i in self.errors if not isinstance(self.errors[i], InterruptedError)]
                raise self.errors[min(failures or self.errors)]
            runs = [self.runs[i] for i in range(self.cfg.num_networks)]
        log = PredictionLog(np.stack([r.hard for r in runs]), self.cfg.checkpoint_times(),
                            self.data.test_labels.num_classes, np.stack([r.soft for r in runs]))
        return TrainingResult(log, np.stack([r.train_accuracy for r in runs]),
                              np.stack([r.clean_train_accuracy for r in runs]),
                              tuple(r.final_loss for r in runs))

    def stop(self):
        """Ask the workers to stop at the next epoch boundary"""
        self.running = False


def train_ensemble(data, cfg, workers=1):
    service = TrainingService(data, cfg, workers)
    service.start()
    service.wait()
    return service.get_result()
