"""Heterogeneous client tasks: feature-shifted regression and label-skew classification.

Both task families expose the same evaluation surface: per-client mean loss,
per-client gradients on index-selected mini-batches (vectorized across
clients), and a weighted global objective.  Losses are convex in the
parameters (squared error, multinomial cross-entropy on linear scores).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .transport import ValidationError

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

LINEAR_REGRESSION = "linear_regression"
MULTICLASS_LOGISTIC = "multiclass_logistic"


@dataclass(frozen=True, eq=False)
class TaskSpec:
    """Per-client datasets plus loss/gradient evaluation for one task family.

    ``features`` has shape (clients, samples, dimension); ``labels`` is float
    targets for regression and integer class ids for classification.  The
    parameter vector is flat: length d for regression, d*L for classification
    (reshaped to a d-by-L score matrix).
    """

    kind: str
    dimension: int
    n_classes: Optional[int]
    features: np.ndarray
    labels: np.ndarray
    importance: np.ndarray
    true_coefficients: Optional[np.ndarray] = None

    @property
    def n_clients(self) -> int:
        return self.features.shape[0]

    @property
    def n_per_client(self) -> int:
        return self.features.shape[1]

    @property
    def param_dim(self) -> int:
        if self.kind == LINEAR_REGRESSION:
            return self.dimension
        return self.dimension * self.n_classes

    # -- evaluation ---------------------------------------------------------

    def all_local_losses(self, theta: np.ndarray) -> np.ndarray:
        """Mean loss of every client's full dataset at a shared parameter vector."""
        if self.kind == LINEAR_REGRESSION:
            residual = self.features @ theta - self.labels
            return (residual * residual).mean(axis=1)
        log_probs = _log_softmax(self.features @ theta.reshape(self.dimension, self.n_classes))
        picked = np.take_along_axis(log_probs, self.labels[:, :, None], axis=2)[:, :, 0]
        return -picked.mean(axis=1)

    def local_loss(self, theta: np.ndarray, client: int, sample_indices=None) -> float:
        x, y = self._select(client, sample_indices)
        if self.kind == LINEAR_REGRESSION:
            residual = x @ theta - y
            return float((residual * residual).mean())
        log_probs = _log_softmax(x @ theta.reshape(self.dimension, self.n_classes))
        return float(-log_probs[np.arange(y.size), y].mean())

    def local_gradient(self, theta: np.ndarray, client: int, sample_indices=None) -> np.ndarray:
        x, y = self._select(client, sample_indices)
        if self.kind == LINEAR_REGRESSION:
            residual = x @ theta - y
            return 2.0 * (x.T @ residual) / y.size
        probs = _softmax(x @ theta.reshape(self.dimension, self.n_classes))
        probs[np.arange(y.size), y] -= 1.0
        return (x.T @ probs).ravel() / y.size

    def minibatch_gradients(self, thetas: np.ndarray, batch_indices: np.ndarray) -> np.ndarray:
        """Per-client gradients at per-client parameters on per-client batches.

        ``thetas`` is (clients, param_dim); ``batch_indices`` is (clients, b).
        """
        x = np.take_along_axis(self.features, batch_indices[:, :, None], axis=1)
        b = batch_indices.shape[1]
        if self.kind == LINEAR_REGRESSION:
            y = np.take_along_axis(self.labels, batch_indices, axis=1)
            residual = np.einsum("cbd,cd->cb", x, thetas) - y
            return 2.0 * np.einsum("cb,cbd->cd", residual, x) / b
        y = np.take_along_axis(self.labels, batch_indices, axis=1)
        weights = thetas.reshape(self.n_clients, self.dimension, self.n_classes)
        probs = _softmax(np.einsum("cbd,cdl->cbl", x, weights))
        np.put_along_axis(
            probs, y[:, :, None], np.take_along_axis(probs, y[:, :, None], axis=2) - 1.0, axis=2
        )
        grad = np.einsum("cbd,cbl->cdl", x, probs) / b
        return grad.reshape(self.n_clients, self.param_dim)

    def _select(self, client: int, sample_indices):
        x = self.features[client]
        y = self.labels[client]
        if sample_indices is not None:
            x = x[sample_indices]
            y = y[sample_indices]
        return x, y


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def global_objective(theta: np.ndarray, p, task: TaskSpec) -> float:
    """Importance-weighted average of the per-client full-dataset losses."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (task.n_clients,):
        raise ValidationError(f"p has shape {p.shape}, expected ({task.n_clients},)")
    return float(p @ task.all_local_losses(theta))


def gen_linear_regression(
    n_clients: int,
    n_per_client: int,
    dimension: int,
    rng,
    importance=None,
    noise_std: float = 0.1,
) -> TaskSpec:
    """Regression with client-specific Gaussian feature distributions.

    Client i draws features from Normal(mu_i, sigma_i^2 I) with mu_i spread
    over [-1, 1) and sigma_i over [0.5, 1.5); labels come from one shared
    coefficient vector plus client-local noise.
    """
    if min(n_clients, n_per_client, dimension) < 1:
        raise ValidationError("n_clients, n_per_client and dimension must be >= 1")
    rng = np.random.default_rng(rng)
    mus = 2.0 * np.arange(n_clients) / n_clients - 1.0
    sigmas = 0.5 + np.arange(n_clients) / n_clients
    coefficients = rng.standard_normal(dimension)
    shape = (n_clients, n_per_client, dimension)
    features = mus[:, None, None] + sigmas[:, None, None] * rng.standard_normal(shape)
    labels = features @ coefficients
    if noise_std > 0:
        labels = labels + noise_std * rng.standard_normal(labels.shape)
    p = _uniform(n_clients) if importance is None else np.asarray(importance, dtype=np.float64)
    return TaskSpec(
        kind=LINEAR_REGRESSION,
        dimension=dimension,
        n_classes=None,
        features=features,
        labels=labels,
        importance=p,
        true_coefficients=coefficients,
    )


def gen_label_skew_classification(
    n_clients: int,
    classes_per_client: int = 2,
    source: Optional[tuple[np.ndarray, np.ndarray]] = None,
    rng=None,
    n_per_client: int = 50,
    n_classes: int = 10,
    dimension: int = 20,
    importance=None,
    class_separation: float = 2.0,
) -> TaskSpec:
    """Classification where each client holds samples from a few classes only.

    Client i is assigned the consecutive class block starting at
    ``classes_per_client * i`` (mod L), so the class pairs cycle over clients.
    With no ``source``, features come from unit-variance Gaussian blobs around
    per-class means; with a ``(features, labels)`` source (e.g. loaded MNIST),
    each client receives a without-replacement slice of its classes' pools.
    """
    if n_clients < 1 or classes_per_client < 1 or n_per_client < 1:
        raise ValidationError("n_clients, classes_per_client, n_per_client must be >= 1")
    rng = np.random.default_rng(rng)

    if source is not None:
        src_x = np.asarray(source[0], dtype=np.float64)
        src_y = np.asarray(source[1])
        n_classes = int(src_y.max()) + 1
        dimension = src_x.shape[1]
    if n_classes < 2:
        raise ValidationError("need at least two classes")
    if classes_per_client > n_classes:
        raise ValidationError("classes_per_client exceeds the number of classes")

    assignments = [
        [(classes_per_client * i + k) % n_classes for k in range(classes_per_client)]
        for i in range(n_clients)
    ]
    per_class = [
        n_per_client // classes_per_client + (1 if k < n_per_client % classes_per_client else 0)
        for k in range(classes_per_client)
    ]

    features = np.empty((n_clients, n_per_client, dimension))
    labels = np.empty((n_clients, n_per_client), dtype=np.int64)

    if source is None:
        means = class_separation * rng.standard_normal((n_classes, dimension))
        for i, classes in enumerate(assignments):
            offset = 0
            for cls, count in zip(classes, per_class):
                features[i, offset : offset + count] = means[cls] + rng.standard_normal(
                    (count, dimension)
                )
                labels[i, offset : offset + count] = cls
                offset += count
    else:
        pools = {}
        cursors = {}
        needed = sorted({cls for classes in assignments for cls in classes})
        for cls in needed:
            idx = np.flatnonzero(src_y == cls)
            if idx.size == 0:
                raise ValidationError(f"source is missing class {cls}")
            pools[cls] = rng.permutation(idx)
            cursors[cls] = 0
        for i, classes in enumerate(assignments):
            offset = 0
            for cls, count in zip(classes, per_class):
                pool = pools[cls]
                take = np.array(
                    [pool[(cursors[cls] + k) % pool.size] for k in range(count)]
                )
                cursors[cls] += count
                features[i, offset : offset + count] = src_x[take]
                labels[i, offset : offset + count] = cls
                offset += count

    p = _uniform(n_clients) if importance is None else np.asarray(importance, dtype=np.float64)
    return TaskSpec(
        kind=MULTICLASS_LOGISTIC,
        dimension=dimension,
        n_classes=n_classes,
        features=features,
        labels=labels,
        importance=p,
    )


def task_cache_path(directory, kind: str, seed: int) -> Path:
    """Canonical cache location for a generated dataset, keyed by seed."""
    return Path(directory) / f"{kind}_seed{seed}.npz"


def save_task(task: TaskSpec, path) -> None:
    """Persist a generated task as a compressed numpy archive."""
    payload = {
        "kind": np.array(task.kind),
        "dimension": np.array(task.dimension),
        "n_classes": np.array(-1 if task.n_classes is None else task.n_classes),
        "features": task.features,
        "labels": task.labels,
        "importance": task.importance,
    }
    if task.true_coefficients is not None:
        payload["true_coefficients"] = task.true_coefficients
    np.savez_compressed(path, **payload)


def load_task(path) -> TaskSpec:
    with np.load(path) as archive:
        try:
            kind = str(archive["kind"])
            n_classes = int(archive["n_classes"])
            coefficients = (
                archive["true_coefficients"] if "true_coefficients" in archive else None
            )
            return TaskSpec(
                kind=kind,
                dimension=int(archive["dimension"]),
                n_classes=None if n_classes < 0 else n_classes,
                features=archive["features"],
                labels=archive["labels"],
                importance=archive["importance"],
                true_coefficients=coefficients,
            )
        except KeyError as exc:
            raise ValidationError(f"{path}: task archive missing field {exc}") from exc


def _read_header(handle, path: str, n_fields: int) -> tuple[int, ...]:
    raw = handle.read(4 * n_fields)
    if len(raw) != 4 * n_fields:
        raise ValidationError(f"{path}: truncated header at offset {len(raw)}")
    return struct.unpack(f">{n_fields}i", raw)


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read big-endian IDX image/label files into ([0,1] floats, int labels)."""
    with open(images_path, "rb") as handle:
        magic, count, rows, cols = _read_header(handle, str(images_path), 4)
        if magic != IDX_IMAGE_MAGIC:
            raise ValidationError(
                f"{images_path}: magic {magic} at offset 0, expected {IDX_IMAGE_MAGIC}"
            )
        payload = handle.read()
    expected = count * rows * cols
    if len(payload) != expected:
        raise ValidationError(
            f"{images_path}: expected {expected} pixel bytes after offset 16, got {len(payload)}"
        )
    features = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)
    features = features.astype(np.float64) / 255.0

    with open(labels_path, "rb") as handle:
        magic, label_count = _read_header(handle, str(labels_path), 2)
        if magic != IDX_LABEL_MAGIC:
            raise ValidationError(
                f"{labels_path}: magic {magic} at offset 0, expected {IDX_LABEL_MAGIC}"
            )
        label_payload = handle.read()
    if len(label_payload) != label_count:
        raise ValidationError(
            f"{labels_path}: expected {label_count} label bytes after offset 8, "
            f"got {len(label_payload)}"
        )
    if label_count != count:
        raise ValidationError(
            f"count mismatch: {images_path} holds {count} images but "
            f"{labels_path} holds {label_count} labels"
        )
    labels = np.frombuffer(label_payload, dtype=np.uint8).astype(np.int64)
    return features, labels
