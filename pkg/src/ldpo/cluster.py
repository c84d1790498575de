"""K-means clustering and regularized information-maximization (RIM) with
automatic cluster-count selection.

RIM maximizes an empirical estimate of the mutual information between inputs
and predicted labels under a multilogit conditional model, minus an L2
complexity penalty on the class weights. Starting from an over-segmented
k-means labeling, the penalty collapses redundant clusters: classes that lose
all hard assignments are dropped, so the returned cluster count adapts to the
data.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import FeatureMatrix, _atomic_write_text, read_fmat, write_fmat


@dataclass
class ClusterAssignment:
    """Per-item cluster labels in {0..K-1} with an explicit cluster count."""

    labels: np.ndarray
    n_clusters: int
    ids: list[str] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.size < 1:
            raise ValueError("assignment must cover at least one item")
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        lo, hi = int(self.labels.min()), int(self.labels.max())
        if lo < 0 or hi >= self.n_clusters:
            raise ValueError(f"labels must lie in [0, {self.n_clusters}), got [{lo}, {hi}]")
        if self.ids is not None:
            self.ids = list(self.ids)
            if len(self.ids) != self.labels.size:
                raise ValueError(f"{len(self.ids)} ids for {self.labels.size} labels")

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_clusters)

    def subset(self, indices) -> "ClusterAssignment":
        indices = np.asarray(indices, dtype=np.intp)
        return ClusterAssignment(
            labels=self.labels[indices],
            n_clusters=self.n_clusters,
            ids=[self.ids[i] for i in indices] if self.ids is not None else None,
        )


@dataclass
class KMeansModel:
    """Cluster centers plus the final within-cluster sum of squared distances."""

    centers: np.ndarray  # (K, D)
    cost: float
    cost_history: list[float] = field(default_factory=list)
    n_iter: int = 0


@dataclass
class RimModel:
    """Multilogit parameters: per-class weight vectors and biases, plus the
    penalty weight used during fitting."""

    weights: np.ndarray  # (K, D)
    biases: np.ndarray  # (K,)
    penalty_weight: float
    objective_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 2 or self.weights.shape[0] != self.biases.size:
            raise ValueError("weights must be (K, D) with one bias per class")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.biases).all()):
            raise ValueError("non-finite model parameters")
        if self.penalty_weight <= 0:
            raise ValueError("penalty weight must be positive")

    @property
    def n_clusters(self) -> int:
        return self.weights.shape[0]


def _matrix_values(X) -> tuple[np.ndarray, list[str] | None]:
    if isinstance(X, FeatureMatrix):
        return X.values, X.ids
    values = np.asarray(X, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("expected a FeatureMatrix or a 2-D array")
    return values, None


def _squared_distances(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (
        (X * X).sum(axis=1)[:, None]
        - 2.0 * X @ centers.T
        + (centers * centers).sum(axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    centers[0] = X[int(rng.integers(n))]
    d2 = _squared_distances(X, centers[:1]).ravel()
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with chosen centers
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[i] = X[idx]
        d2 = np.minimum(d2, _squared_distances(X, centers[i : i + 1]).ravel())
    return centers


def kmeans(X, k: int, seed: int = 0, max_iter: int = 300) -> tuple[KMeansModel, ClusterAssignment]:
    """Lloyd's algorithm from k-means++ seeding.

    Ties to the nearest center break toward the lowest center index. A cluster
    emptied by an update step is reseeded at the point farthest from its
    assigned center. Stops at an assignment fixpoint or after max_iter rounds;
    the recorded per-round cost is nonincreasing.
    """
    values, ids = _matrix_values(X)
    n = values.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds item count {n}")

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(values, k, rng)
    prev_labels = None
    labels = np.zeros(n, dtype=np.int64)
    cost_history: list[float] = []
    cost = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _squared_distances(values, centers)
        labels = d2.argmin(axis=1)
        min_d2 = d2[np.arange(n), labels]
        cost = float(min_d2.sum())
        cost_history.append(cost)
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        prev_labels = labels.copy()

        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j] > 0:
                centers[j] = values[labels == j].mean(axis=0)
        empties = np.flatnonzero(counts == 0)
        if empties.size:
            far_order = np.argsort(-min_d2, kind="stable")
            used = 0
            for j in empties:
                centers[j] = values[far_order[used]]
                used += 1

    model = KMeansModel(centers=centers, cost=cost, cost_history=cost_history, n_iter=it)
    assignment = ClusterAssignment(labels=labels, n_clusters=k, ids=ids)
    return model, assignment


# ---------------------------------------------------------------------------
# RIM
# ---------------------------------------------------------------------------


def _log_softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


def rim_posteriors(model: RimModel, X) -> np.ndarray:
    """Conditional class probabilities p(c=k | f) = softmax(w_k . f + b_k)."""
    values, _ = _matrix_values(X)
    if values.shape[1] != model.weights.shape[1]:
        raise ValueError(
            f"feature dim {values.shape[1]} does not match model dim {model.weights.shape[1]}"
        )
    return np.exp(_log_softmax(values @ model.weights.T + model.biases))


def _objective_parts(W: np.ndarray, b: np.ndarray, F: np.ndarray, lam: float):
    """Objective pieces at (W, b): log posteriors, posteriors, MI estimate, objective."""
    logP = _log_softmax(F @ W.T + b)
    P = np.exp(logP)
    pbar = P.mean(axis=0)
    marginal_entropy = float(-(pbar * np.log(pbar)).sum())
    mean_conditional_entropy = float(-(P * logP).sum(axis=1).mean())
    mi = marginal_entropy - mean_conditional_entropy
    obj = mi - lam * float((W * W).sum())
    return logP, P, pbar, mi, obj


def _objective_grad(P: np.ndarray, logP: np.ndarray, pbar: np.ndarray, W, F, lam):
    n = F.shape[0]
    G = P * (logP - np.log(pbar)[None, :])
    dZ = (G - P * G.sum(axis=1, keepdims=True)) / n
    dW = dZ.T @ F - 2.0 * lam * W
    db = dZ.sum(axis=0)
    return dW, db


def rim_objective(model: RimModel, X) -> float:
    """Empirical mutual information of the induced labeling minus the L2 penalty.

    The information term is H(mean posterior) minus the mean per-item posterior
    entropy; it lies in [0, ln K]. The penalty sums w_k . w_k over classes
    (biases unpenalized), scaled by the penalty weight.
    """
    values, _ = _matrix_values(X)
    if values.shape[1] != model.weights.shape[1]:
        raise ValueError(
            f"feature dim {values.shape[1]} does not match model dim {model.weights.shape[1]}"
        )
    *_, obj = _objective_parts(model.weights, model.biases, values, model.penalty_weight)
    return obj


def rim_objective_grad(model: RimModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of :func:`rim_objective` w.r.t. weights and biases."""
    values, _ = _matrix_values(X)
    if values.shape[1] != model.weights.shape[1]:
        raise ValueError(
            f"feature dim {values.shape[1]} does not match model dim {model.weights.shape[1]}"
        )
    logP, P, pbar, _, _ = _objective_parts(
        model.weights, model.biases, values, model.penalty_weight
    )
    return _objective_grad(P, logP, pbar, model.weights, values, model.penalty_weight)


def _center(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Center features; no rescaling.

    The penalty competes with an information term bounded by ln K, so how
    many clusters survive depends on the feature scale. Any variance
    normalization caps between-cluster distances near sqrt(D) and makes the
    unit penalty weight prune everything at low dimension; leaving the
    caller's scale intact keeps that trade-off where the caller put it.
    Centering itself is free because biases are unpenalized.
    """
    mean = values.mean(axis=0)
    return values - mean, mean


def rim_fit(
    X,
    init: ClusterAssignment,
    penalty_weight: float = 1.0,
    max_iter: int = 500,
    tol: float = 1e-7,
) -> tuple[RimModel, ClusterAssignment]:
    """Maximize the RIM objective by monotone gradient ascent and prune dead clusters.

    Features are centered (not rescaled) before fitting, and the centering is
    folded back into the returned biases, so the model evaluates on raw
    features. Class weights initialize from a one-vs-rest least-squares fit
    to +-1 targets on the initial assignment.
    Ascent uses backtracking line search (halving, Armijo c=1e-4), so the
    recorded objective history never decreases. On return, clusters with zero
    hard assignments are dropped and labels renumbered densely.
    """
    values, ids = _matrix_values(X)
    if not np.isfinite(values).all():
        raise ValueError("non-finite features")
    n = values.shape[0]
    if init.n != n:
        raise ValueError(f"init assignment covers {init.n} items, features have {n}")
    k0 = init.n_clusters
    if k0 < 2:
        raise ValueError("initial assignment must have at least 2 clusters")
    if penalty_weight <= 0:
        raise ValueError("penalty weight must be positive")

    F, mean = _center(values)

    targets = np.full((n, k0), -1.0)
    targets[np.arange(n), init.labels] = 1.0
    design = np.hstack([F, np.ones((n, 1))])
    solution, *_ = np.linalg.lstsq(design, targets, rcond=None)
    W = solution[:-1].T.copy()
    b = solution[-1].copy()

    logP, P, pbar, _, obj = _objective_parts(W, b, F, penalty_weight)
    dW, db = _objective_grad(P, logP, pbar, W, F, penalty_weight)
    history = [obj]
    step = 1.0
    for _ in range(max_iter):
        gnorm2 = float((dW * dW).sum() + (db * db).sum())
        if gnorm2 == 0.0:
            break
        t = step * 2.0
        accepted = False
        while t >= 1e-14:
            W_new = W + t * dW
            b_new = b + t * db
            logP_n, P_n, pbar_n, _, obj_new = _objective_parts(W_new, b_new, F, penalty_weight)
            if obj_new >= obj + 1e-4 * t * gnorm2:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        gain = obj_new - obj
        W, b, obj, step = W_new, b_new, obj_new, t
        history.append(obj)
        dW, db = _objective_grad(P_n, logP_n, pbar_n, W, F, penalty_weight)
        if gain < tol * max(1.0, abs(obj)):
            break

    hard = np.exp(_log_softmax(F @ W.T + b)).argmax(axis=1)
    kept = np.unique(hard)
    labels = np.searchsorted(kept, hard)
    W_kept = W[kept]
    b_kept = b[kept]
    # fold centering into the biases: w.(x - mean) + b = w.x + (b - w.mean)
    weights_raw = W_kept
    biases_raw = b_kept - W_kept @ mean

    model = RimModel(
        weights=weights_raw,
        biases=biases_raw,
        penalty_weight=penalty_weight,
        objective_history=history,
    )
    assignment = ClusterAssignment(labels=labels, n_clusters=kept.size, ids=ids)
    return model, assignment


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def save_assignment(assignment: ClusterAssignment, path: str, ids: list[str] | None = None) -> None:
    """Write an assignment file: csv with header id,cluster (0-based labels)."""
    ids = ids if ids is not None else assignment.ids
    if ids is None:
        ids = [str(i) for i in range(assignment.n)]
    if len(ids) != assignment.n:
        raise ValueError(f"{len(ids)} ids for {assignment.n} labels")
    lines = ["id,cluster"]
    lines.extend(f"{item_id},{int(label)}" for item_id, label in zip(ids, assignment.labels))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def load_assignment(path: str) -> ClusterAssignment:
    """Read an assignment file written by :func:`save_assignment`."""
    from .data import LoadError

    ids, labels = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "cluster"]:
            raise LoadError(f"{path}: malformed header, expected 'id,cluster'")
        for rownum, rec in enumerate(reader):
            if not rec:
                continue
            if len(rec) != 2:
                raise LoadError(f"{path}: row {rownum} has {len(rec)} fields, expected 2")
            try:
                label = int(rec[1])
            except ValueError:
                raise LoadError(f"{path}: row {rownum}: cluster {rec[1]!r} is not an integer") from None
            if label < 0:
                raise LoadError(f"{path}: row {rownum}: negative cluster label {label}")
            ids.append(rec[0])
            labels.append(label)
    if not ids:
        raise LoadError(f"{path}: no data rows")
    labels = np.array(labels, dtype=np.int64)
    return ClusterAssignment(labels=labels, n_clusters=int(labels.max()) + 1, ids=ids)


def save_kmeans_model(model: KMeansModel, path: str) -> None:
    """JSON header (K, cost) next to an fmat centers matrix at '<path>.centers.fmat'."""
    write_fmat(path + ".centers.fmat", model.centers)
    header = {"kind": "kmeans", "n_clusters": model.centers.shape[0], "cost": model.cost}
    _atomic_write_text(path, json.dumps(header, indent=2) + "\n")


def load_kmeans_model(path: str) -> KMeansModel:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.load(fh)
    centers = read_fmat(path + ".centers.fmat")
    return KMeansModel(centers=centers, cost=float(header["cost"]))


def save_rim_model(model: RimModel, path: str) -> None:
    """JSON header (K, penalty weight) next to fmat weight/bias matrices."""
    write_fmat(path + ".weights.fmat", model.weights)
    write_fmat(path + ".biases.fmat", model.biases.reshape(1, -1))
    header = {
        "kind": "rim",
        "n_clusters": model.n_clusters,
        "penalty_weight": model.penalty_weight,
    }
    _atomic_write_text(path, json.dumps(header, indent=2) + "\n")


def load_rim_model(path: str) -> RimModel:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.load(fh)
    weights = read_fmat(path + ".weights.fmat")
    biases = read_fmat(path + ".biases.fmat").ravel()
    return RimModel(weights=weights, biases=biases, penalty_weight=float(header["penalty_weight"]))
