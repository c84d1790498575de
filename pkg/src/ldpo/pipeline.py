"""Loop orchestration: cluster features, train on the pseudo-labels, repeat.

Each iteration clusters the whole corpus, checks agreement with the previous
clustering, reshuffles the train/val/test split, trains the learner on the
train split, and scores the splits. The loop stops when adjacent clusterings
agree above the purity/NMI thresholds or when the iteration cap is hit;
either way the last report says which.

The learner always trains on the base corpus representation; what changes
between iterations is the feature matrix being clustered, which after
iteration 0 is the learner's embedding of that base representation (or an
externally supplied file per iteration).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .cluster import ClusterAssignment, kmeans, rim_fit
from .data import (
    DescriptorGrid,
    FeatureMatrix,
    SplitAssignment,
    _atomic_write_text,
    load_feature_matrix,
    read_fmat,
    split_dataset,
)
from .encode import (
    encode_fisher,
    encode_vlad,
    fit_gmm,
    fit_pca,
    fit_vlad_codebook,
    transform_pca,
)
from .hierarchy import ApConfig, CategoryTree, build_tree
from .learner import (
    ExternalFeatureSource,
    LearnerConfig,
    LearnerModel,
    next_features,
    predict_proba,
    train,
)
from .metrics import check_convergence, nmi, purity, topk_accuracy

REPORT_STATUSES = ("running", "converged", "max_iterations_reached")
REPORT_FIELDS = (
    "iteration",
    "k",
    "purity",
    "nmi",
    "train_top1",
    "val_top1",
    "test_top1",
    "train_top5",
    "val_top5",
    "test_top5",
    "wall_clock_seconds",
    "seed",
    "status",
)


@dataclass
class IterationReport:
    """One loop iteration: cluster count, agreement with the previous
    iteration, split accuracies, timing, and the seed that drove it."""

    iteration: int
    k: int
    purity: float | None
    nmi: float | None
    train_top1: float
    val_top1: float
    test_top1: float
    train_top5: float | None
    val_top5: float | None
    test_top5: float | None
    wall_clock_seconds: float
    seed: int
    status: str

    def __post_init__(self):
        if self.iteration < 0 or self.k < 1:
            raise ValueError("iteration must be >= 0 and k >= 1")
        if self.status not in REPORT_STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.wall_clock_seconds < 0:
            raise ValueError("negative wall clock")
        for name in ("purity", "nmi", "train_top1", "val_top1", "test_top1",
                     "train_top5", "val_top5", "test_top5"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")


@dataclass
class LoopConfig:
    # feature source: a flat matrix file, a grids directory, or values passed
    # directly to run_loop; external_pattern supplies t >= 1 features by file
    features_path: str | None = None
    features_format: str | None = None  # None: infer from extension
    grids_dir: str | None = None
    external_pattern: str | None = None
    # clustering
    cluster_mode: str = "kmeans"  # "kmeans" | "kmeans_rim"
    k: int = 8
    k_init: int = 50
    penalty_weight: float = 1.0
    # encoding, applied only when the input is descriptor grids
    encoding: str = "none"  # "none" | "fv" | "vlad"
    n_components: int = 64
    pca_dim: int = 0  # 0: no projection
    # loop control
    purity_threshold: float = 0.7
    nmi_threshold: float = 0.7
    max_iterations: int = 10
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    base_seed: int = 0
    learner: LearnerConfig = field(default_factory=LearnerConfig)

    def __post_init__(self):
        if self.cluster_mode not in ("kmeans", "kmeans_rim"):
            raise ValueError(f"unknown cluster_mode {self.cluster_mode!r}")
        if self.encoding not in ("none", "fv", "vlad"):
            raise ValueError(f"unknown encoding {self.encoding!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("purity_threshold", "nmi_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.k < 1 or self.k_init < 2 or self.n_components < 1 or self.pca_dim < 0:
            raise ValueError("k >= 1, k_init >= 2, n_components >= 1, pca_dim >= 0 required")
        if self.penalty_weight <= 0:
            raise ValueError("penalty_weight must be positive")
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        if len(self.split_ratios) != 3:
            raise ValueError("split_ratios must have three entries")
        if min(self.split_ratios) < 0 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("split_ratios must be nonnegative and sum to 1")


@dataclass
class LoopResult:
    reports: list[IterationReport]
    assignments: list[ClusterAssignment]  # whole-corpus assignment per iteration
    learner: LearnerModel
    features: FeatureMatrix  # the matrix the final clustering ran on
    base_features: FeatureMatrix  # the representation the learner trains on
    split: SplitAssignment  # split of the final iteration

    @property
    def assignment(self) -> ClusterAssignment:
        return self.assignments[-1]


def load_grids_dir(path: str) -> list[DescriptorGrid]:
    """All '<id>.fmat' descriptor files in a directory, sorted by id."""
    names = sorted(n for n in os.listdir(path) if n.endswith(".fmat"))
    if not names:
        raise ValueError(f"no .fmat descriptor files in {path}")
    return [
        DescriptorGrid(item_id=name[: -len(".fmat")], descriptors=read_fmat(os.path.join(path, name)))
        for name in names
    ]


def encode_grids(grids: list[DescriptorGrid], config: LoopConfig) -> FeatureMatrix:
    """Turn descriptor grids into one fixed-length row per item, then optional PCA."""
    if config.encoding == "none":
        raise ValueError("descriptor grids need encoding mode 'fv' or 'vlad'")
    if config.encoding == "fv":
        codebook = fit_gmm(grids, config.n_components, seed=config.base_seed)
        rows = [encode_fisher(g, codebook) for g in grids]
    else:
        codebook = fit_vlad_codebook(grids, config.n_components, seed=config.base_seed)
        rows = [encode_vlad(g, codebook) for g in grids]
    features = FeatureMatrix(ids=[g.item_id for g in grids], values=np.vstack(rows))
    if config.pca_dim > 0:
        features = transform_pca(fit_pca(features, config.pca_dim), features)
    return features


def cluster_features(features, config: LoopConfig, seed: int) -> ClusterAssignment:
    """Whole-corpus clustering per the configured mode.

    kmeans: plain k-means at k. kmeans_rim: over-segmented k-means at k_init,
    then the information-maximization refit prunes clusters it cannot support.
    """
    if config.cluster_mode == "kmeans":
        _, assignment = kmeans(features, config.k, seed=seed)
        return assignment
    _, init = kmeans(features, config.k_init, seed=seed)
    _, assignment = rim_fit(features, init, penalty_weight=config.penalty_weight)
    return assignment


def _ensure_train_support(
    assignment: ClusterAssignment, split: SplitAssignment, features: FeatureMatrix
) -> ClusterAssignment:
    """Merge clusters with no train-split member into their nearest neighbor.

    The learner needs every class present in its training data; a tiny
    cluster whose few members all landed in val/test would otherwise abort
    the loop. Each such cluster is folded whole into the surviving cluster
    with the nearest centroid (in the clustering features), and labels are
    renumbered densely.
    """
    train_idx = split.indices("train")
    present = np.unique(assignment.labels[train_idx])
    if present.size == assignment.n_clusters:
        return assignment
    values = features.values
    centroids = np.vstack(
        [values[assignment.labels == c].mean(axis=0) for c in range(assignment.n_clusters)]
    )
    labels = assignment.labels.copy()
    for c in range(assignment.n_clusters):
        if c in present:
            continue
        gaps = ((centroids[present] - centroids[c]) ** 2).sum(axis=1)
        labels[labels == c] = present[gaps.argmin()]
    dense = np.searchsorted(present, labels)
    return ClusterAssignment(labels=dense, n_clusters=present.size, ids=assignment.ids)


def _resolve_base_features(config, features, grids) -> FeatureMatrix:
    if features is not None and grids is not None:
        raise ValueError("pass features or grids, not both")
    if features is None and grids is None:
        if config.grids_dir:
            grids = load_grids_dir(config.grids_dir)
        elif config.features_path:
            fmt = config.features_format or (
                "csv" if config.features_path.endswith(".csv") else "fmat"
            )
            features = load_feature_matrix(config.features_path, format=fmt)
        else:
            raise ValueError("config names no feature source")
    if grids is not None:
        features = encode_grids(grids, config)
    return features


def run_loop(config: LoopConfig, features=None, grids=None) -> LoopResult:
    """Run the full loop; see the module docstring for the per-iteration steps.

    features/grids override the config's file source, for callers that already
    hold the corpus in memory. Everything downstream of the base
    representation is deterministic given the config and base seed; iteration
    t uses seed base_seed + t for its clustering, split, and training.
    """
    base = _resolve_base_features(config, features, grids)
    source = (
        ExternalFeatureSource(pattern=config.external_pattern)
        if config.external_pattern
        else None
    )
    thresholds = (config.purity_threshold, config.nmi_threshold)

    reports: list[IterationReport] = []
    assignments: list[ClusterAssignment] = []
    model: LearnerModel | None = None
    split: SplitAssignment | None = None
    current = base
    previous: ClusterAssignment | None = None

    for t in range(config.max_iterations):
        started = time.perf_counter()
        seed_t = config.base_seed + t
        if t > 0:
            provider = source if source is not None else model
            current = next_features(provider, t, base)
        split = split_dataset(base.n, config.split_ratios, seed_t)
        assignment = cluster_features(current, config, seed_t)
        assignment = _ensure_train_support(assignment, split, current)

        purity_prev = nmi_prev = None
        converged = False
        if previous is not None:
            purity_prev = purity(assignment, previous)
            nmi_prev = nmi(previous, assignment)
            converged = check_convergence(previous, assignment, thresholds)

        train_idx = split.indices("train")
        model = train(
            base.subset(train_idx),
            assignment.subset(train_idx),
            config=config.learner,
            warm_start=model,
            seed=seed_t,
        )

        accuracies: dict[str, float | None] = {}
        for tag in ("train", "val", "test"):
            idx = split.indices(tag)
            probs = predict_proba(model, base.values[idx])
            labels = assignment.labels[idx]
            accuracies[f"{tag}_top1"] = topk_accuracy(probs, labels, 1)
            accuracies[f"{tag}_top5"] = (
                topk_accuracy(probs, labels, 5) if assignment.n_clusters >= 5 else None
            )

        if converged:
            status = "converged"
        elif t == config.max_iterations - 1:
            status = "max_iterations_reached"
        else:
            status = "running"
        reports.append(
            IterationReport(
                iteration=t,
                k=assignment.n_clusters,
                purity=purity_prev,
                nmi=nmi_prev,
                wall_clock_seconds=time.perf_counter() - started,
                seed=seed_t,
                status=status,
                **accuracies,
            )
        )
        assignments.append(assignment)
        previous = assignment
        if converged:
            break

    return LoopResult(
        reports=reports,
        assignments=assignments,
        learner=model,
        features=current,
        base_features=base,
        split=split,
    )


def run_tree(
    assignment: ClusterAssignment,
    learner: LearnerModel,
    features,
    ap_config: ApConfig | None = None,
    split: SplitAssignment | None = None,
) -> CategoryTree:
    """Category tree from the converged model's confusion.

    Scores come from predict_proba on the test split when a split is given
    (every cluster must appear there), otherwise on all items. features must
    be the representation the learner was trained on.
    """
    if assignment is None or learner is None:
        raise ValueError("no converged model")
    if learner.n_classes != assignment.n_clusters:
        raise ValueError(
            f"learner has {learner.n_classes} classes, assignment {assignment.n_clusters}"
        )
    values = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    if values.shape[0] != assignment.n:
        raise ValueError("features and assignment cover different item counts")
    if split is not None:
        idx = split.indices("test")
        values = values[idx]
        assignment = assignment.subset(idx)
    scores = predict_proba(learner, values)
    return build_tree(scores, assignment, ap_config)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def report_to_dict(report: IterationReport) -> dict:
    return {name: getattr(report, name) for name in REPORT_FIELDS}


def save_reports(reports: list[IterationReport], path: str) -> None:
    """JSON array of report objects, one per iteration, in loop order."""
    _atomic_write_text(path, json.dumps([report_to_dict(r) for r in reports], indent=2) + "\n")


def load_reports(path: str) -> list[IterationReport]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return [IterationReport(**{name: entry.get(name) for name in REPORT_FIELDS}) for entry in payload]


def save_reports_csv(reports: list[IterationReport], path: str) -> None:
    """Flat per-iteration table for external plotting; empty cells for nulls."""
    lines = [",".join(REPORT_FIELDS)]
    for report in reports:
        cells = []
        for name in REPORT_FIELDS:
            value = getattr(report, name)
            if value is None:
                cells.append("")
            elif isinstance(value, float):
                cells.append(repr(value))
            else:
                cells.append(str(value))
        lines.append(",".join(cells))
    _atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# config files (TOML)
# ---------------------------------------------------------------------------

_CONFIG_SECTIONS = {
    "features": ("path", "format", "external_pattern", "grids_dir"),
    "clustering": ("mode", "k", "k_init", "penalty_weight"),
    "encoding": ("mode", "n_components", "pca_dim"),
    "loop": (
        "max_iterations",
        "purity_threshold",
        "nmi_threshold",
        "split_ratios",
        "base_seed",
    ),
    "learner": (
        "hidden_dim",
        "learning_rate",
        "momentum",
        "batch_size",
        "epochs",
        "output_lr_multiplier",
    ),
    "tree": ("damping", "max_iter", "convergence_window", "preference"),
    "keywords": ("corpus", "top_n", "stoplist", "df_ratio"),
}


def parse_config_file(path: str) -> dict:
    """Raw TOML table with unknown sections/keys rejected."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    for section, table in raw.items():
        if section not in _CONFIG_SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        if not isinstance(table, dict):
            raise ValueError(f"config section [{section}] must be a table")
        for key in table:
            if key not in _CONFIG_SECTIONS[section]:
                raise ValueError(f"unknown key {key!r} in config section [{section}]")
    return raw


def loop_config_from_dict(raw: dict) -> LoopConfig:
    features = raw.get("features", {})
    clustering = raw.get("clustering", {})
    encoding = raw.get("encoding", {})
    loop = raw.get("loop", {})
    learner = raw.get("learner", {})
    kwargs = {}
    if "path" in features:
        kwargs["features_path"] = str(features["path"])
    if "format" in features:
        kwargs["features_format"] = str(features["format"])
    if "external_pattern" in features:
        kwargs["external_pattern"] = str(features["external_pattern"])
    if "grids_dir" in features:
        kwargs["grids_dir"] = str(features["grids_dir"])
    if "mode" in clustering:
        kwargs["cluster_mode"] = str(clustering["mode"])
    if "k" in clustering:
        kwargs["k"] = int(clustering["k"])
    if "k_init" in clustering:
        kwargs["k_init"] = int(clustering["k_init"])
    if "penalty_weight" in clustering:
        kwargs["penalty_weight"] = float(clustering["penalty_weight"])
    if "mode" in encoding:
        kwargs["encoding"] = str(encoding["mode"])
    if "n_components" in encoding:
        kwargs["n_components"] = int(encoding["n_components"])
    if "pca_dim" in encoding:
        kwargs["pca_dim"] = int(encoding["pca_dim"])
    if "max_iterations" in loop:
        kwargs["max_iterations"] = int(loop["max_iterations"])
    if "purity_threshold" in loop:
        kwargs["purity_threshold"] = float(loop["purity_threshold"])
    if "nmi_threshold" in loop:
        kwargs["nmi_threshold"] = float(loop["nmi_threshold"])
    if "split_ratios" in loop:
        kwargs["split_ratios"] = tuple(float(r) for r in loop["split_ratios"])
    if "base_seed" in loop:
        kwargs["base_seed"] = int(loop["base_seed"])
    if learner:
        kwargs["learner"] = LearnerConfig(**learner)
    return LoopConfig(**kwargs)


def ap_config_from_dict(raw: dict) -> ApConfig:
    tree = dict(raw.get("tree", {}))
    if "preference" in tree:
        tree["preference"] = float(tree["preference"])
    return ApConfig(**tree)


def load_config(path: str) -> LoopConfig:
    return loop_config_from_dict(parse_config_file(path))
