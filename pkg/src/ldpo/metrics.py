"""Cluster-agreement and classification metrics.

Purity and NMI compare two labelings of the same item set; in the outer
optimization loop they measure agreement between clusterings from adjacent
iterations, and the loop stops once both clear their thresholds.
"""

from __future__ import annotations

import numpy as np

from .cluster import ClusterAssignment


def _aligned_labels(a: ClusterAssignment, b: ClusterAssignment) -> tuple[np.ndarray, np.ndarray]:
    """Labels of b reordered onto a's item order; both must cover the same items."""
    if a.ids is not None and b.ids is not None:
        if set(a.ids) != set(b.ids):
            raise ValueError("assignments cover different item sets")
        if a.ids == b.ids:
            return a.labels, b.labels
        pos = {item_id: i for i, item_id in enumerate(b.ids)}
        return a.labels, b.labels[np.array([pos[i] for i in a.ids], dtype=np.intp)]
    if a.n != b.n:
        raise ValueError(f"assignments cover {a.n} vs {b.n} items")
    return a.labels, b.labels


def contingency_table(a: ClusterAssignment, b: ClusterAssignment) -> np.ndarray:
    """Counts n[i, j] of items labeled i by a and j by b."""
    la, lb = _aligned_labels(a, b)
    table = np.zeros((a.n_clusters, b.n_clusters), dtype=np.int64)
    np.add.at(table, (la, lb), 1)
    return table


def purity(candidate: ClusterAssignment, reference: ClusterAssignment) -> float:
    """Fraction of items in the majority reference class of their candidate cluster.

    Asymmetric: a refinement of the reference scores 1.0, the reverse does not.
    """
    table = contingency_table(candidate, reference)
    return float(table.max(axis=1).sum()) / candidate.n


def nmi(a: ClusterAssignment, b: ClusterAssignment) -> float:
    """Mutual information normalized by the geometric mean of the label entropies.

    Natural logs. Defined as 1.0 when both labelings are constant (zero
    entropy on both sides), 0.0 when exactly one is.
    """
    table = contingency_table(a, b).astype(np.float64)
    n = table.sum()
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    ha = float(-(pa[pa > 0] * np.log(pa[pa > 0])).sum())
    hb = float(-(pb[pb > 0] * np.log(pb[pb > 0])).sum())
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    pij = table / n
    outer = np.outer(pa, pb)
    mask = pij > 0
    mi = float((pij[mask] * np.log(pij[mask] / outer[mask])).sum())
    return min(1.0, max(0.0, mi / np.sqrt(ha * hb)))


def topk_accuracy(scores: np.ndarray, labels, k: int) -> float:
    """Fraction of rows whose true label is among the k highest scores.

    Ties break toward the lowest class index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if scores.ndim != 2:
        raise ValueError("scores must be an N x K matrix")
    n, n_classes = scores.shape
    if labels.size != n:
        raise ValueError(f"{labels.size} labels for {n} score rows")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n_classes:
        raise ValueError(f"top-{k} undefined for {n_classes} classes")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    # stable argsort of -scores puts equal scores in ascending index order
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    hits = (top == labels[:, None]).any(axis=1)
    return float(hits.mean())


def check_convergence(
    prev: ClusterAssignment,
    curr: ClusterAssignment,
    thresholds: tuple[float, float] = (0.7, 0.7),
    purity_candidate: str = "current",
) -> bool:
    """True iff purity and NMI between adjacent clusterings clear both thresholds.

    Purity is directional; by default the current clustering is the candidate
    and the previous one the reference (purity_candidate="previous" swaps).
    """
    purity_min, nmi_min = thresholds
    if purity_candidate == "current":
        p = purity(curr, prev)
    elif purity_candidate == "previous":
        p = purity(prev, curr)
    else:
        raise ValueError(f"unknown purity_candidate {purity_candidate!r}")
    return p >= purity_min and nmi(prev, curr) >= nmi_min
