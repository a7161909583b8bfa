"""One-vs-rest linear SVM over feature vectors.

Each class gets an L2-regularized hinge-loss problem solved by dual
coordinate descent. The bias is learned as the weight of a constant feature
(value 1) appended to the standardized vector, so it is regularized together
with ``w``::

    min_w  0.5 * ||w||^2 + C * sum_i max(0, 1 - y_i * w . [z_i, 1])

Normalized scores are the softmax of the K decision values; detection
thresholds are expressed on that scale.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, TrainingDataError
from .tensor_core import softmax

log = logging.getLogger(__name__)


@dataclass
class FeatureSet:
    vectors: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        self.class_names = tuple(self.class_names)
        if self.vectors.ndim != 2:
            raise DimensionError(f"feature vectors must form a 2-D array, got shape {self.vectors.shape}")
        if len(self.labels) != len(self.vectors):
            raise DimensionError(f"{len(self.labels)} labels for {len(self.vectors)} vectors")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label index out of range of class_names")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("feature vectors contain NaN or Inf")


@dataclass
class SvmModel:
    class_names: tuple[str, ...]
    weights: np.ndarray  # [K, D]
    biases: np.ndarray  # [K]
    C: float
    mean: np.ndarray  # [D]
    scale: np.ndarray  # [D]
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        k = len(self.class_names)
        if self.weights.ndim != 2 or self.weights.shape[0] != k or self.biases.shape != (k,):
            raise DimensionError(f"weights {self.weights.shape} / biases {self.biases.shape} do not fit {k} classes")
        d = self.weights.shape[1]
        if self.mean.shape != (d,) or self.scale.shape != (d,):
            raise DimensionError("standardization vectors must match the feature dimension")
        if np.any(self.scale <= 0):
            raise ValueError("standardization scale factors must be strictly positive")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def standardize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"feature length {x.shape[-1]} does not match model dimension {self.dim}")
        return (x - self.mean) / self.scale


def fit_standardization(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[str]]:
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    warnings = []
    flat = scale <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if np.any(flat):
        msg = f"{int(flat.sum())} zero-variance feature dimension(s); scale forced to 1"
        log.warning(msg)
        warnings.append(msg)
        scale = np.where(flat, 1.0, scale)
    return mean, scale, warnings


def primal_objective(w: np.ndarray, xa: np.ndarray, y: np.ndarray, C: float) -> float:
    """``0.5 ||w||^2 + C * sum hinge`` on bias-augmented inputs."""
    return float(0.5 * w @ w + C * np.maximum(0.0, 1.0 - y * (xa @ w)).sum())


def solve_binary(xa: np.ndarray, y: np.ndarray, C: float, rng: np.random.Generator,
                 tol: float = 1e-6, max_epochs: int = 10_000, history: list | None = None) -> np.ndarray:
    """Dual coordinate descent for one binary problem; returns the augmented weight vector.

    Stops once ``primal - dual <= tol * max(1, primal)`` or after ``max_epochs``.
    Appends ``(primal, dual)`` after each epoch to ``history`` if given.
    """
    n, d = xa.shape
    alpha = np.zeros(n)
    w = np.zeros(d)
    qii = np.einsum("ij,ij->i", xa, xa)
    rows = [xa[i] for i in range(n)]
    for _ in range(max_epochs):
        for i in rng.permutation(n):
            q = qii[i]
            if q == 0.0:
                continue
            yi = y[i]
            xi = rows[i]
            g = yi * (w @ xi) - 1.0
            a = alpha[i]
            if a == 0.0:
                pg = min(g, 0.0)
            elif a == C:
                pg = max(g, 0.0)
            else:
                pg = g
            if pg != 0.0:
                a_new = min(max(a - g / q, 0.0), C)
                w += (a_new - a) * yi * xi
                alpha[i] = a_new
        primal = primal_objective(w, xa, y, C)
        dual = alpha.sum() - 0.5 * w @ w
        if history is not None:
            history.append((primal, dual))
        if primal - dual <= tol * max(1.0, primal):
            break
    return w


def train(features: FeatureSet, C: float = 1.0, seed: int = 0, tol: float = 1e-6,
          max_epochs: int = 10_000) -> SvmModel:
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    k = len(features.class_names)
    counts = np.bincount(features.labels, minlength=k)
    if k < 2 or np.count_nonzero(counts) < 2:
        raise TrainingDataError("SVM training needs at least two classes with examples")
    missing = [features.class_names[i] for i in np.flatnonzero(counts == 0)]
    if missing:
        raise TrainingDataError(f"classes with zero training examples: {missing}")
    mean, scale, warnings = fit_standardization(features.vectors)
    z = (features.vectors - mean) / scale
    xa = np.hstack([z, np.ones((len(z), 1))])
    rng = np.random.default_rng(seed)
    ws = []
    for c in range(k):
        y = np.where(features.labels == c, 1.0, -1.0)
        ws.append(solve_binary(xa, y, C, rng, tol, max_epochs))
    ws = np.array(ws)
    return SvmModel(features.class_names, ws[:, :-1], ws[:, -1], float(C), mean, scale, warnings)


def decision_scores(model: SvmModel, x) -> np.ndarray:
    """``w_k . standardize(x) + b_k`` for a vector ``[D]`` or a batch ``[N, D]``."""
    return model.standardize(x) @ model.weights.T + model.biases


def normalized_scores(model: SvmModel, x) -> np.ndarray:
    return softmax(decision_scores(model, x))


def classify(model: SvmModel, x) -> tuple[str, float]:
    """Argmax class (lowest index on ties) and its normalized score."""
    scores = decision_scores(model, x)
    if scores.ndim != 1:
        raise DimensionError("classify takes a single feature vector")
    k = int(np.argmax(scores))
    return model.class_names[k], float(softmax(scores)[k])


def classify_batch(model: SvmModel, x) -> np.ndarray:
    return np.argmax(decision_scores(model, np.atleast_2d(x)), axis=1)

