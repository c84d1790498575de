"""Looped pseudo-task optimization.

Cluster a corpus's features, train a classifier on the cluster labels, then
recluster the classifier's embedding, repeating until adjacent clusterings
agree. Afterwards the classifier's confusion yields a category hierarchy and
associated documents yield keyword labels per cluster.
"""

from .cluster import ClusterAssignment, KMeansModel, RimModel, kmeans, rim_fit
from .data import (
    DescriptorGrid,
    FeatureMatrix,
    LoadError,
    SplitAssignment,
    TextCorpus,
    load_feature_matrix,
    save_feature_matrix,
    split_dataset,
)
from .encode import (
    GmmCodebook,
    PcaModel,
    VladCodebook,
    apply_pca,
    encode_fisher,
    encode_vlad,
    fit_gmm,
    fit_pca,
    fit_vlad_codebook,
)
from .hierarchy import (
    ApConfig,
    CategoryTree,
    TreeNode,
    affinity_from_scores,
    affinity_propagation,
    build_tree,
    level_affinity,
)
from .labeling import ClusterKeywords, extract_keywords, tokenize
from .learner import (
    ExternalFeatureSource,
    LearnerConfig,
    LearnerModel,
    embed,
    next_features,
    predict_proba,
    train,
)
from .metrics import check_convergence, nmi, purity, topk_accuracy
from .pipeline import (
    IterationReport,
    LoopConfig,
    LoopResult,
    load_config,
    run_loop,
    run_tree,
)

__version__ = "0.1.0"
