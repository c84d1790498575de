"""Category hierarchies from classifier confusion.

Pairwise class affinities are averaged conditional confusion probabilities;
affinity propagation over those affinities merges classes level by level
until a single root remains. Higher-level affinities are computed by summing
base score columns over merged groups, so the per-item scores are evaluated
once and reused at every level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .cluster import ClusterAssignment
from .data import _atomic_write_text


@dataclass
class AffinityMatrix:
    """Symmetric pairwise class affinities with entries in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] < 1:
            raise ValueError("affinity matrix must be square and nonempty")
        if not np.isfinite(v).all():
            raise ValueError("non-finite affinity entries")
        if np.abs(v - v.T).max() > 1e-12:
            raise ValueError("affinity matrix must be symmetric within 1e-12")
        if v.min() < -1e-12 or v.max() > 1.0 + 1e-9:
            raise ValueError("affinity entries must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class ApConfig:
    damping: float = 0.9
    max_iter: int = 1000
    convergence_window: int = 50
    preference: float | None = None  # None: median of off-diagonal similarities

    def __post_init__(self):
        if not 0.5 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0.5, 1)")
        if self.max_iter < 1 or self.convergence_window < 1:
            raise ValueError("max_iter and convergence_window must be >= 1")


@dataclass
class ExemplarAssignment:
    """Dense cluster labels plus the exemplar item index for each cluster."""

    labels: np.ndarray  # (n,) values in [0, n_clusters)
    exemplars: np.ndarray  # (n_clusters,) item indices, ascending
    n_iter: int = 0
    converged: bool = False

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.exemplars = np.asarray(self.exemplars, dtype=np.int64).reshape(-1)

    @property
    def n_clusters(self) -> int:
        return self.exemplars.size


@dataclass
class TreeNode:
    level: int
    members: tuple[int, ...]  # base class ids, ascending
    children: list["TreeNode"] = field(default_factory=list)

    def __post_init__(self):
        self.members = tuple(int(m) for m in self.members)
        if not self.members or list(self.members) != sorted(set(self.members)):
            raise ValueError("members must be nonempty, unique, ascending")


@dataclass
class CategoryTree:
    """Nodes grouped by level, bottom (singletons) to top (single root)."""

    levels: list[list[TreeNode]]
    affinities: list[AffinityMatrix] | None = None  # one per level when built from scores

    def __post_init__(self):
        if not self.levels or any(not lv for lv in self.levels):
            raise ValueError("tree must have at least one nonempty level")
        base = self.levels[0]
        all_members = sorted(m for node in base for m in node.members)
        if any(len(node.members) != 1 for node in base):
            raise ValueError("level 0 nodes must be singletons")
        if all_members != list(range(len(base))):
            raise ValueError("level 0 must cover classes 0..K-1 exactly once")
        if len(self.levels[-1]) != 1:
            raise ValueError("top level must have exactly one node")
        for lower, upper in zip(self.levels, self.levels[1:]):
            if len(upper) >= len(lower):
                raise ValueError("level widths must strictly decrease")
        for depth, nodes in enumerate(self.levels):
            for node in nodes:
                if node.level != depth:
                    raise ValueError("node level disagrees with its position")
                if depth == 0:
                    continue
                merged: list[int] = []
                for child in node.children:
                    if child.level != depth - 1:
                        raise ValueError("children must come from the previous level")
                    merged.extend(child.members)
                if sorted(merged) != list(node.members) or len(merged) != len(set(merged)):
                    raise ValueError("node members must be the disjoint union of its children")
        if self.affinities is not None:
            if len(self.affinities) != len(self.levels):
                raise ValueError("one affinity matrix per level required")
            for mat, nodes in zip(self.affinities, self.levels):
                if mat.n != len(nodes):
                    raise ValueError("affinity size must match level width")

    @property
    def root(self) -> TreeNode:
        return self.levels[-1][0]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(len(nodes) for nodes in self.levels)

    @property
    def n_classes(self) -> int:
        return len(self.levels[0])


def _check_scores(scores: np.ndarray, n_classes: int) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != n_classes:
        raise ValueError(f"scores must be (N, {n_classes})")
    if not np.isfinite(scores).all():
        raise ValueError("non-finite scores")
    if np.abs(scores.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("score rows must sum to 1 within 1e-6")
    return scores


def level_affinity(scores, assignment: ClusterAssignment, groups) -> AffinityMatrix:
    """Affinity between merged class groups, from base scores alone.

    groups must partition {0..K-1}. Columns of the base score matrix are
    summed over each group and items of merged classes are pooled (union),
    then the usual conditional means are averaged into a symmetric matrix.
    """
    k = assignment.n_clusters
    scores = _check_scores(scores, k)
    labels = assignment.labels
    if labels.size != scores.shape[0]:
        raise ValueError("one score row per assigned item required")

    flat: list[int] = []
    for g in groups:
        flat.extend(int(c) for c in g)
    if sorted(flat) != list(range(k)):
        raise ValueError("groups must partition the base classes exactly")

    m = len(groups)
    merged_scores = np.empty((scores.shape[0], m))
    for j, g in enumerate(groups):
        merged_scores[:, j] = scores[:, list(g)].sum(axis=1)

    cond = np.empty((m, m))  # cond[i, j] = Prob(group i | group j)
    for i, g in enumerate(groups):
        mask = np.isin(labels, list(g))
        if not mask.any():
            raise ValueError(f"group {i} has no items")
        cond[i] = merged_scores[mask].mean(axis=0)
    return AffinityMatrix(values=0.5 * (cond + cond.T))


def confusion_prob_matrix(scores, assignment: ClusterAssignment) -> np.ndarray:
    """Conditional confusion matrix P[i, j] = mean score for class j over items of class i."""
    k = assignment.n_clusters
    scores = _check_scores(scores, k)
    labels = assignment.labels
    if labels.size != scores.shape[0]:
        raise ValueError("one score row per assigned item required")
    p = np.empty((k, k))
    for i in range(k):
        mask = labels == i
        if not mask.any():
            raise ValueError(f"class {i} has no items")
        p[i] = scores[mask].mean(axis=0)
    return p


def affinity_from_scores(scores, assignment: ClusterAssignment) -> AffinityMatrix:
    """Symmetrized confusion affinity between the base classes."""
    groups = [[i] for i in range(assignment.n_clusters)]
    return level_affinity(scores, assignment, groups)


def affinity_propagation(similarity, config: ApConfig | None = None) -> ExemplarAssignment:
    """Affinity propagation clustering by responsibility/availability messages.

    The diagonal of the similarity matrix is replaced by the preference
    (median off-diagonal similarity by default). Messages are damped;
    convergence means the exemplar set held still for a full window of
    iterations. No noise is injected, so results are deterministic.
    """
    if config is None:
        config = ApConfig()
    s_in = similarity.values if isinstance(similarity, AffinityMatrix) else similarity
    s = np.array(s_in, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 1:
        raise ValueError("similarity matrix must be square and nonempty")
    if not np.isfinite(s).all():
        raise ValueError("non-finite similarities")
    n = s.shape[0]
    if n == 1:
        return ExemplarAssignment(
            labels=np.zeros(1, dtype=np.int64),
            exemplars=np.zeros(1, dtype=np.int64),
            n_iter=0,
            converged=True,
        )

    idx = np.arange(n)
    off_diag = s[~np.eye(n, dtype=bool)]
    preference = float(np.median(off_diag)) if config.preference is None else config.preference
    s[idx, idx] = preference

    r = np.zeros((n, n))
    a = np.zeros((n, n))
    prev_exemplar_mask = np.zeros(n, dtype=bool)
    stable = 0
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        # responsibilities: r(i,k) = s(i,k) - max_{k' != k} (a(i,k') + s(i,k'))
        combined = a + s
        best = combined.argmax(axis=1)
        best_val = combined[idx, best]
        combined[idx, best] = -np.inf
        second_val = combined.max(axis=1)
        r_new = s - best_val[:, None]
        r_new[idx, best] = s[idx, best] - second_val
        r = config.damping * r + (1.0 - config.damping) * r_new

        # availabilities: a(i,k) = min(0, r(k,k) + sum_{i' not in {i,k}} max(0, r(i',k)))
        rp = np.maximum(r, 0.0)
        rp[idx, idx] = r[idx, idx]
        col = rp.sum(axis=0)
        a_new = col[None, :] - rp
        diag = a_new[idx, idx].copy()
        a_new = np.minimum(a_new, 0.0)
        a_new[idx, idx] = diag
        a = config.damping * a + (1.0 - config.damping) * a_new

        exemplar_mask = (r[idx, idx] + a[idx, idx]) > 0
        if exemplar_mask.any() and np.array_equal(exemplar_mask, prev_exemplar_mask):
            stable += 1
            if stable >= config.convergence_window:
                converged = True
                break
        else:
            stable = 0
        prev_exemplar_mask = exemplar_mask

    exemplars = np.flatnonzero((r[idx, idx] + a[idx, idx]) > 0)
    if exemplars.size == 0:
        exemplars = np.array([int((r[idx, idx] + a[idx, idx]).argmax())], dtype=np.int64)
    nearest = exemplars[s[:, exemplars].argmax(axis=1)]
    nearest[exemplars] = exemplars
    labels = np.searchsorted(exemplars, nearest)
    return ExemplarAssignment(
        labels=labels, exemplars=exemplars, n_iter=it, converged=converged
    )


def build_tree(scores, assignment: ClusterAssignment, ap_config: ApConfig | None = None) -> CategoryTree:
    """Merge classes bottom-up into a category tree.

    Each round clusters the current level's affinity matrix with affinity
    propagation and merges accordingly. A round that fails to reduce the node
    count merges everything into a single root instead, so widths strictly
    decrease and the tree always terminates at one node.
    """
    base_affinity = affinity_from_scores(scores, assignment)
    k = assignment.n_clusters
    nodes = [TreeNode(level=0, members=(i,)) for i in range(k)]
    levels = [nodes]
    affinities = [base_affinity]

    current = base_affinity
    while len(nodes) > 1:
        result = affinity_propagation(current, ap_config)
        if result.n_clusters >= len(nodes):
            group_ids = [list(range(len(nodes)))]  # forced root merge
        else:
            group_ids = [
                np.flatnonzero(result.labels == c).tolist() for c in range(result.n_clusters)
            ]
        depth = len(levels)
        merged_nodes = []
        merged_groups = []
        for members_idx in group_ids:
            children = [nodes[i] for i in members_idx]
            members = tuple(sorted(m for child in children for m in child.members))
            merged_nodes.append(TreeNode(level=depth, members=members, children=children))
            merged_groups.append(list(members))
        current = level_affinity(scores, assignment, merged_groups)
        nodes = merged_nodes
        levels.append(nodes)
        affinities.append(current)
    return CategoryTree(levels=levels, affinities=affinities)


def _node_to_dict(node: TreeNode) -> dict:
    return {
        "level": node.level,
        "members": list(node.members),
        "children": [_node_to_dict(child) for child in node.children],
    }


def _node_from_dict(payload: dict) -> TreeNode:
    return TreeNode(
        level=int(payload["level"]),
        members=tuple(int(m) for m in payload["members"]),
        children=[_node_from_dict(c) for c in payload.get("children", [])],
    )


def tree_to_json(tree: CategoryTree) -> dict:
    return _node_to_dict(tree.root)


def tree_from_json(payload: dict) -> CategoryTree:
    root = _node_from_dict(payload)
    by_level: dict[int, list[TreeNode]] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        by_level.setdefault(node.level, []).append(node)
        stack.extend(node.children)
    levels = [
        sorted(by_level[depth], key=lambda nd: nd.members)
        for depth in range(root.level + 1)
    ]
    return CategoryTree(levels=levels)


def save_tree(tree: CategoryTree, path: str) -> None:
    _atomic_write_text(path, json.dumps(tree_to_json(tree), indent=2) + "\n")


def load_tree(path: str) -> CategoryTree:
    with open(path, "r", encoding="utf-8") as fh:
        return tree_from_json(json.load(fh))
