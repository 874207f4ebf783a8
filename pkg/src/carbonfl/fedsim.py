"""Synthetic federated learning task with exactly computable gradients.

The learner is multinomial logistic regression on Gaussian class clusters,
partitioned across centers by a Dirichlet draw over class proportions. A
convex, closed-form-gradient learner keeps every probing and training step
deterministic and testable; the gradient functions are the interface a richer
learner would plug into.

Reproducibility contract: every random stream is keyed by (seed, slot,
center) plus a purpose tag, so any two runs sharing those keys see identical
subsamples and shuffles regardless of which policy is driving.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .fleet import Selection
from .utility import GradientSnapshot

# Purpose tags appended to RNG stream keys.
_STREAM_TASK = 11
_STREAM_TEST = 12
_STREAM_PROBE = 13
_STREAM_TRAIN = 14


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(tuple(int(k) for k in key)))


@dataclass(frozen=True)
class SyntheticTask:
    """Generative description of the synthetic classification task."""

    n_classes: int = 5
    dim: int = 8
    noise_scale: float = 1.0
    samples_per_center: int = 200
    dirichlet_alpha: float = 0.8
    seed: int = 0
    n_centers: int = 10
    test_samples: int = 1000
    class_means: np.ndarray | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"need at least two classes, got {self.n_classes}")
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if not self.noise_scale > 0:
            raise ValueError(f"noise_scale must be positive, got {self.noise_scale}")
        if self.samples_per_center < 1:
            raise ValueError("each center needs at least one sample")
        if not self.dirichlet_alpha > 0:
            raise ValueError(
                f"dirichlet_alpha must be positive, got {self.dirichlet_alpha}"
            )
        if self.n_centers < 1:
            raise ValueError(f"n_centers must be >= 1, got {self.n_centers}")
        if self.test_samples < 1:
            raise ValueError("test set needs at least one sample")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.class_means is not None:
            means = np.asarray(self.class_means, dtype=float)
            if means.shape != (self.n_classes, self.dim):
                raise ValueError(
                    f"class_means must be {self.n_classes} x {self.dim}, got {means.shape}"
                )
            object.__setattr__(self, "class_means", means)


@dataclass(frozen=True)
class CenterDataset:
    """One center's local samples."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError("features must be n x d with matching labels")
        if X.shape[0] < 1:
            raise ValueError("dataset must be non-empty")
        X = X.copy()
        y = y.copy()
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class TaskData:
    """Generated datasets: per-center training shards plus an IID test set."""

    centers: tuple[CenterDataset, ...]
    test: CenterDataset
    n_classes: int
    class_means: np.ndarray | None = None

    @property
    def n_centers(self) -> int:
        return len(self.centers)

    @property
    def dim(self) -> int:
        return self.centers[0].features.shape[1]


@dataclass(frozen=True)
class ModelState:
    """Multinomial logistic-regression weights, one row per class, bias last."""

    weights: np.ndarray
    step_count: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2:
            raise ValueError(f"weights must be C x (d+1), got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls, n_classes: int, dim: int) -> "ModelState":
        return cls(np.zeros((n_classes, dim + 1)), step_count=0)


@dataclass(frozen=True)
class TrainConfig:
    """Local training knobs: epochs per slot, SGD step, batch, probe fraction."""

    local_epochs: int = 2
    learning_rate: float = 0.1
    batch_size: int = 32
    probe_fraction: float = 0.05

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.probe_fraction <= 1.0:
            raise ValueError("probe_fraction must lie in (0, 1]")


def generate_task(cfg: SyntheticTask) -> TaskData:
    """Draw class means, per-center Dirichlet label mixes, and Gaussian features."""
    rng = _rng(cfg.seed, _STREAM_TASK)
    if cfg.class_means is not None:
        means = cfg.class_means
    else:
        means = rng.normal(size=(cfg.n_classes, cfg.dim))
    centers = []
    for _ in range(cfg.n_centers):
        proportions = rng.dirichlet(np.full(cfg.n_classes, cfg.dirichlet_alpha))
        labels = rng.choice(cfg.n_classes, size=cfg.samples_per_center, p=proportions)
        features = means[labels] + cfg.noise_scale * rng.normal(
            size=(cfg.samples_per_center, cfg.dim)
        )
        centers.append(CenterDataset(features=features, labels=labels))
    test_rng = _rng(cfg.seed, _STREAM_TEST)
    test_labels = test_rng.integers(0, cfg.n_classes, size=cfg.test_samples)
    test_features = means[test_labels] + cfg.noise_scale * test_rng.normal(
        size=(cfg.test_samples, cfg.dim)
    )
    return TaskData(
        centers=tuple(centers),
        test=CenterDataset(features=test_features, labels=test_labels),
        n_classes=cfg.n_classes,
        class_means=means,
    )


def _augment(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(model: ModelState, dataset: CenterDataset) -> float:
    """Mean cross-entropy of the model on one dataset."""
    probs = _softmax(_augment(dataset.features) @ model.weights.T)
    picked = probs[np.arange(len(dataset)), dataset.labels]
    return float(-np.log(picked).mean())


def _ce_gradient_matrix(weights: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    X1 = _augment(X)
    probs = _softmax(X1 @ weights.T)
    probs[np.arange(len(y)), y] -= 1.0
    return probs.T @ X1 / len(y)


def exact_gradient(model: ModelState, dataset: CenterDataset) -> np.ndarray:
    """Flattened mean cross-entropy gradient over the center's full dataset."""
    return _ce_gradient_matrix(model.weights, dataset.features, dataset.labels).ravel()


def probe_gradient(
    model: ModelState, dataset: CenterDataset, epsilon: float, rng_seed
) -> np.ndarray:
    """Gradient estimate from a uniform subsample of ceil(epsilon * n) points.

    Sampled indices are sorted before evaluation, so a full-fraction probe
    reproduces exact_gradient bit for bit.
    """
    if not 0.0 < epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")
    n = len(dataset)
    k = min(n, math.ceil(epsilon * n))
    if k == n:
        idx = np.arange(n)
    else:
        rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
        idx = np.sort(rng.choice(n, size=k, replace=False))
    return _ce_gradient_matrix(
        model.weights, dataset.features[idx], dataset.labels[idx]
    ).ravel()


def probe_snapshot(
    model: ModelState,
    task: TaskData,
    epsilon: float,
    seed: int,
    slot: int,
    model_tag: str = "",
) -> GradientSnapshot:
    """Probe every center; each (seed, slot, center) keys its own subsample."""
    grads = [
        probe_gradient(model, task.centers[i], epsilon, (seed, slot, i, _STREAM_PROBE))
        for i in range(task.n_centers)
    ]
    return GradientSnapshot(
        gradients=np.stack(grads), model_tag=model_tag or f"slot{slot}"
    )


def _sgd_epoch(
    weights: np.ndarray,
    dataset: CenterDataset,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    # Batch membership is random; within a batch indices are sorted so the
    # single-batch case reduces exactly to a full-gradient step.
    perm = rng.permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        batch = np.sort(perm[start : start + batch_size])
        grad = _ce_gradient_matrix(weights, dataset.features[batch], dataset.labels[batch])
        weights = weights - lr * grad
    return weights


def run_local_round(
    model: ModelState,
    selected: Selection,
    task: TaskData,
    cfg: TrainConfig,
    rng_seed,
) -> ModelState:
    """One slot of training: M epochs, aggregating after every epoch.

    Each selected center runs one epoch of mini-batch SGD from the broadcast
    model; the server averages the resulting weights uniformly and
    re-broadcasts. An empty selection leaves the model untouched.
    """
    members = selected.members
    if selected.n_centers != task.n_centers:
        raise ValueError(
            f"selection covers {selected.n_centers} centers, task has {task.n_centers}"
        )
    if not members:
        return model
    base = (int(rng_seed),) if isinstance(rng_seed, (int, np.integer)) else tuple(rng_seed)
    rngs = {i: _rng(*base, i, _STREAM_TRAIN) for i in members}
    weights = model.weights
    for _ in range(cfg.local_epochs):
        locals_ = [
            _sgd_epoch(weights, task.centers[i], cfg.learning_rate, cfg.batch_size, rngs[i])
            for i in members
        ]
        weights = np.mean(locals_, axis=0)
    return ModelState(weights=weights, step_count=model.step_count + cfg.local_epochs)


def full_participation_trajectory(
    task: TaskData, cfg: TrainConfig, horizon: int, seed: int
) -> list[ModelState]:
    """Reference model sequence with every center training every slot.

    Element t is the model after t + 1 all-select rounds; it is independent of
    any controller's decisions but shares the per-(seed, slot, center)
    training streams, so an all-select policy run reproduces it exactly.
    """
    model = ModelState.zeros(task.n_classes, task.dim)
    everyone = Selection.full(task.n_centers)
    out = []
    for t in range(horizon):
        model = run_local_round(model, everyone, task, cfg, (seed, t))
        out.append(model)
    return out


def global_loss(model: ModelState, task: TaskData) -> float:
    """Training objective: unweighted mean of the per-center losses."""
    return float(
        np.mean([cross_entropy_loss(model, center) for center in task.centers])
    )


def test_accuracy(model: ModelState, task: TaskData) -> float:
    logits = _augment(task.test.features) @ model.weights.T
    return float((logits.argmax(axis=1) == task.test.labels).mean())


def write_task_csv(task: TaskData, path: str) -> None:
    """Dump all shards to one CSV (center -1 holds the test set)."""
    dim = task.dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["center", "label"] + [f"f{j}" for j in range(dim)])
        for i, center in enumerate(task.centers):
            for x, y in zip(center.features, center.labels):
                writer.writerow([i, int(y)] + [repr(float(v)) for v in x])
        for x, y in zip(task.test.features, task.test.labels):
            writer.writerow([-1, int(y)] + [repr(float(v)) for v in x])


def read_task_csv(path: str) -> TaskData:
    """Rebuild a TaskData from the dump format of write_task_csv."""
    shards: dict[int, list[tuple[list[float], int]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 2
        for row in reader:
            center, label = int(row[0]), int(row[1])
            shards.setdefault(center, []).append(
                ([float(v) for v in row[2 : 2 + dim]], label)
            )
    if -1 not in shards:
        raise ValueError(f"{path} holds no test rows (center -1)")
    test_rows = shards.pop(-1)
    center_ids = sorted(shards)
    if center_ids != list(range(len(center_ids))):
        raise ValueError(f"center ids must be contiguous from 0, got {center_ids}")
    centers = tuple(
        CenterDataset(
            features=np.array([x for x, _ in shards[i]]),
            labels=np.array([y for _, y in shards[i]]),
        )
        for i in center_ids
    )
    test = CenterDataset(
        features=np.array([x for x, _ in test_rows]),
        labels=np.array([y for _, y in test_rows]),
    )
    labels = np.concatenate([c.labels for c in centers] + [test.labels])
    return TaskData(centers=centers, test=test, n_classes=int(labels.max()) + 1)
