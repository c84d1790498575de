"""One-hidden-layer softmax classifier used as the pseudo-task learner.

The network is affine -> ReLU -> affine -> softmax, trained with seeded
minibatch SGD plus momentum on cross-entropy. The hidden activations double
as the embedding that feeds the next clustering round; the output layer is
re-initialized whenever the number of pseudo-classes changes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .cluster import ClusterAssignment
from .data import FeatureMatrix, LoadError, _atomic_write_text, load_feature_matrix, read_fmat, write_fmat


@dataclass
class LearnerConfig:
    hidden_dim: int = 256
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    # applied to the freshly re-initialized output layer on warm starts only
    output_lr_multiplier: float = 10.0

    def __post_init__(self):
        if self.hidden_dim < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("hidden_dim/batch_size must be >= 1, epochs >= 0")
        if self.learning_rate <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("need learning_rate > 0 and momentum in [0, 1)")
        if self.output_lr_multiplier <= 0:
            raise ValueError("output_lr_multiplier must be positive")


@dataclass
class LearnerModel:
    hidden_weights: np.ndarray  # (D, H)
    hidden_biases: np.ndarray  # (H,)
    output_weights: np.ndarray  # (H, K)
    output_biases: np.ndarray  # (K,)
    config: LearnerConfig = field(default_factory=LearnerConfig)
    seed: int = 0
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.hidden_weights = np.asarray(self.hidden_weights, dtype=np.float64)
        self.hidden_biases = np.asarray(self.hidden_biases, dtype=np.float64).reshape(-1)
        self.output_weights = np.asarray(self.output_weights, dtype=np.float64)
        self.output_biases = np.asarray(self.output_biases, dtype=np.float64).reshape(-1)
        if self.hidden_weights.ndim != 2 or self.output_weights.ndim != 2:
            raise ValueError("weight matrices must be 2-D")
        if self.hidden_weights.shape[1] != self.hidden_biases.size:
            raise ValueError("hidden bias size must match hidden width")
        if self.output_weights.shape[0] != self.hidden_weights.shape[1]:
            raise ValueError("output layer input must match hidden width")
        if self.output_weights.shape[1] != self.output_biases.size:
            raise ValueError("output bias size must match class count")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        for arr in (self.hidden_weights, self.hidden_biases, self.output_weights, self.output_biases):
            if not np.isfinite(arr).all():
                raise ValueError("non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.hidden_weights.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.hidden_weights.shape[1]

    @property
    def n_classes(self) -> int:
        return self.output_biases.size


@dataclass
class ExternalFeatureSource:
    """Per-iteration feature files, with '{t}' in the pattern standing for the iteration."""

    pattern: str
    expected_dim: int | None = None
    format: str | None = None  # None: infer from extension (.csv -> csv, else fmat)

    def path_for(self, iteration: int) -> str:
        if "{t}" not in self.pattern:
            raise ValueError("pattern must contain '{t}'")
        return self.pattern.replace("{t}", str(iteration))

    def features_for(self, iteration: int) -> FeatureMatrix:
        path = self.path_for(iteration)
        if not os.path.exists(path):
            raise LoadError(f"external feature file not found: {path}")
        fmt = self.format or ("csv" if path.endswith(".csv") else "fmat")
        loaded = load_feature_matrix(path, format=fmt)
        if self.expected_dim is not None and loaded.dim != self.expected_dim:
            raise LoadError(
                f"external features have dim {loaded.dim}, expected {self.expected_dim}"
            )
        return loaded


def _as_values(X) -> np.ndarray:
    values = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("expected a FeatureMatrix or 2-D array")
    return values


def _forward(model: LearnerModel, values: np.ndarray):
    if values.shape[1] != model.input_dim:
        raise ValueError(f"input dim {values.shape[1]} does not match model dim {model.input_dim}")
    z1 = values @ model.hidden_weights + model.hidden_biases
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ model.output_weights + model.output_biases
    z2 = z2 - z2.max(axis=1, keepdims=True)
    expz = np.exp(z2)
    probs = expz / expz.sum(axis=1, keepdims=True)
    return z1, a1, probs


def embed(model: LearnerModel, X):
    """Hidden-layer post-ReLU activations; FeatureMatrix in, FeatureMatrix out."""
    values = _as_values(X)
    _, a1, _ = _forward(model, values)
    if isinstance(X, FeatureMatrix):
        return FeatureMatrix(ids=X.ids, values=a1)
    return a1


def predict_proba(model: LearnerModel, X) -> np.ndarray:
    """Softmax class scores, one row per item, each summing to 1."""
    return _forward(model, _as_values(X))[2]


def _loss(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = probs[np.arange(labels.size), labels]
    return float(-np.log(np.maximum(picked, 1e-300)).mean())


def loss_and_gradients(model: LearnerModel, X, labels: np.ndarray):
    """Mean cross-entropy and its gradients w.r.t. all four parameter arrays.

    Returns (loss, dict with keys hidden_weights/hidden_biases/output_weights/
    output_biases). Kept separate from the training loop so the gradients can
    be checked against finite differences.
    """
    values = _as_values(X)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != values.shape[0]:
        raise ValueError("one label per row required")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ValueError("label outside class range")
    n = values.shape[0]
    z1, a1, probs = _forward(model, values)
    loss = _loss(probs, labels)

    dz2 = probs.copy()
    dz2[np.arange(n), labels] -= 1.0
    dz2 /= n
    grads = {
        "output_weights": a1.T @ dz2,
        "output_biases": dz2.sum(axis=0),
    }
    da1 = dz2 @ model.output_weights.T
    dz1 = da1 * (z1 > 0)
    grads["hidden_weights"] = values.T @ dz1
    grads["hidden_biases"] = dz1.sum(axis=0)
    return loss, grads


def train(
    X,
    labels: ClusterAssignment,
    config: LearnerConfig | None = None,
    warm_start: LearnerModel | None = None,
    seed: int = 0,
) -> LearnerModel:
    """Fit the classifier to pseudo-labels with seeded minibatch SGD + momentum.

    Every class in [0, K) must appear in the training labels. With a warm
    start the hidden layer is copied and only the output layer is drawn
    fresh (zero-initialized) at the new K, with its learning rate scaled by
    config.output_lr_multiplier. loss_history[0] is the pre-training loss;
    one entry per epoch follows.
    """
    values = _as_values(X)
    if config is None:
        config = LearnerConfig()
    y = labels.labels if isinstance(labels, ClusterAssignment) else np.asarray(labels, dtype=np.int64)
    y = y.reshape(-1)
    if y.size != values.shape[0]:
        raise ValueError("one label per feature row required")
    n_classes = int(labels.n_clusters) if isinstance(labels, ClusterAssignment) else int(y.max()) + 1
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    present = np.unique(y)
    missing = np.setdiff1d(np.arange(n_classes), present)
    if missing.size:
        raise ValueError(f"classes absent from training labels: {missing.tolist()}")

    n, d = values.shape
    rng = np.random.default_rng(seed)
    if warm_start is not None:
        if warm_start.input_dim != d:
            raise ValueError(
                f"warm-start input dim {warm_start.input_dim} does not match data dim {d}"
            )
        if warm_start.hidden_dim != config.hidden_dim:
            raise ValueError("warm-start hidden width does not match config")
        w1 = warm_start.hidden_weights.copy()
        b1 = warm_start.hidden_biases.copy()
        output_lr = config.learning_rate * config.output_lr_multiplier
    else:
        w1 = rng.standard_normal((d, config.hidden_dim)) * np.sqrt(2.0 / d)
        b1 = np.zeros(config.hidden_dim)
        output_lr = config.learning_rate
    # zero output layer: uniform softmax, so the starting loss is ln K
    w2 = np.zeros((config.hidden_dim, n_classes))
    b2 = np.zeros(n_classes)

    model = LearnerModel(
        hidden_weights=w1,
        hidden_biases=b1,
        output_weights=w2,
        output_biases=b2,
        config=replace(config),
        seed=seed,
    )
    model.loss_history.append(loss_and_gradients(model, values, y)[0])

    velocity = {
        "hidden_weights": np.zeros_like(w1),
        "hidden_biases": np.zeros_like(b1),
        "output_weights": np.zeros_like(w2),
        "output_biases": np.zeros_like(b2),
    }
    lr = {
        "hidden_weights": config.learning_rate,
        "hidden_biases": config.learning_rate,
        "output_weights": output_lr,
        "output_biases": output_lr,
    }
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            _, grads = loss_and_gradients(model, values[batch], y[batch])
            for name, g in grads.items():
                velocity[name] = config.momentum * velocity[name] - lr[name] * g
                getattr(model, name)[...] += velocity[name]
        model.loss_history.append(_loss(_forward(model, values)[2], y))
    return model


def next_features(source, iteration: int, corpus: FeatureMatrix) -> FeatureMatrix:
    """Features for the next round: learner embedding of the corpus, or an external file.

    External files are re-ordered to the corpus id order; a corpus id missing
    from the file is an error naming that id.
    """
    if isinstance(source, LearnerModel):
        return embed(source, corpus)
    if isinstance(source, ExternalFeatureSource):
        loaded = source.features_for(iteration)
        if loaded.ids is None:
            if loaded.n != corpus.n:
                raise LoadError(
                    f"external features have {loaded.n} rows, corpus has {corpus.n}"
                )
            return FeatureMatrix(ids=corpus.ids, values=loaded.values)
        index = {item_id: i for i, item_id in enumerate(loaded.ids)}
        rows = np.empty(corpus.n, dtype=np.int64)
        for i, item_id in enumerate(corpus.ids):
            if item_id not in index:
                raise LoadError(f"external features missing id {item_id!r}")
            rows[i] = index[item_id]
        return FeatureMatrix(ids=corpus.ids, values=loaded.values[rows])
    raise TypeError("source must be a LearnerModel or ExternalFeatureSource")


def save_learner(model: LearnerModel, path: str) -> None:
    """JSON header (dims, config, seed) next to four fmat parameter files."""
    write_fmat(path + ".w1.fmat", model.hidden_weights)
    write_fmat(path + ".b1.fmat", model.hidden_biases.reshape(1, -1))
    write_fmat(path + ".w2.fmat", model.output_weights)
    write_fmat(path + ".b2.fmat", model.output_biases.reshape(1, -1))
    header = {
        "kind": "learner",
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "n_classes": model.n_classes,
        "seed": model.seed,
        "loss_history": model.loss_history,
        "config": {
            "hidden_dim": model.config.hidden_dim,
            "learning_rate": model.config.learning_rate,
            "momentum": model.config.momentum,
            "batch_size": model.config.batch_size,
            "epochs": model.config.epochs,
            "output_lr_multiplier": model.config.output_lr_multiplier,
        },
    }
    _atomic_write_text(path, json.dumps(header, indent=2) + "\n")


def load_learner(path: str) -> LearnerModel:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.load(fh)
    model = LearnerModel(
        hidden_weights=read_fmat(path + ".w1.fmat"),
        hidden_biases=read_fmat(path + ".b1.fmat").ravel(),
        output_weights=read_fmat(path + ".w2.fmat"),
        output_biases=read_fmat(path + ".b2.fmat").ravel(),
        config=LearnerConfig(**header["config"]),
        seed=int(header["seed"]),
        loss_history=[float(v) for v in header["loss_history"]],
    )
    if model.input_dim != header["input_dim"] or model.n_classes != header["n_classes"]:
        raise LoadError("parameter files disagree with the model header")
    return model
