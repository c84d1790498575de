"""Fixed-length encodings of local descriptor sets, plus PCA reduction.

Fisher vectors aggregate the gradients of a diagonal-covariance GMM
log-likelihood with respect to component means and variances (output length
2*K*d); VLAD aggregates residuals to the nearest of K codewords (length K*d).
Both get the usual post-processing: signed square root (FV only) and L2
normalization, with per-codeword intra-normalization for VLAD.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cluster import kmeans
from .data import DescriptorGrid, FeatureMatrix, read_fmat, write_fmat

VARIANCE_FLOOR = 1e-6


@dataclass
class GmmCodebook:
    """Diagonal-covariance Gaussian mixture over descriptor space."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d)
    log_likelihood_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.means.shape != self.variances.shape or self.means.shape[0] != self.weights.size:
            raise ValueError("inconsistent GMM shapes")
        if (self.weights < 0).any() or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")
        if (self.variances < VARIANCE_FLOOR - 1e-12).any():
            raise ValueError(f"variances must be >= {VARIANCE_FLOOR}")

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class VladCodebook:
    """K-means centers over descriptor space used as VLAD codewords."""

    codewords: np.ndarray  # (K, d)

    def __post_init__(self):
        self.codewords = np.asarray(self.codewords, dtype=np.float64)
        if self.codewords.ndim != 2 or self.codewords.shape[0] < 1:
            raise ValueError("codewords must be a nonempty (K, d) matrix")
        if not np.isfinite(self.codewords).all():
            raise ValueError("non-finite codewords")

    @property
    def n_codewords(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]


@dataclass
class PcaModel:
    """Centering vector plus leading covariance eigenvectors as columns."""

    mean: np.ndarray  # (d_in,)
    projection: np.ndarray  # (d_in, d_out), orthonormal columns
    eigenvalues: np.ndarray  # (d_out,), nonincreasing

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.projection = np.asarray(self.projection, dtype=np.float64)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        if self.projection.ndim != 2 or self.projection.shape[0] != self.mean.size:
            raise ValueError("projection must be (d_in, d_out)")
        if self.eigenvalues.size != self.projection.shape[1]:
            raise ValueError("one eigenvalue per projection column")
        if self.eigenvalues.size:
            gram = self.projection.T @ self.projection
            if not np.allclose(gram, np.eye(self.eigenvalues.size), atol=1e-8):
                raise ValueError("projection columns must be orthonormal")
            if (self.eigenvalues < -1e-12).any() or (np.diff(self.eigenvalues) > 1e-12).any():
                raise ValueError("eigenvalues must be nonnegative and nonincreasing")

    @property
    def input_dim(self) -> int:
        return self.mean.size

    @property
    def output_dim(self) -> int:
        return self.projection.shape[1]


def _descriptor_rows(descriptors) -> np.ndarray:
    """Pool descriptors into one (n, d) matrix; accepts arrays, grids, or lists of grids."""
    if isinstance(descriptors, DescriptorGrid):
        return descriptors.descriptors
    if isinstance(descriptors, (list, tuple)) and descriptors and isinstance(
        descriptors[0], DescriptorGrid
    ):
        return np.vstack([g.descriptors for g in descriptors])
    rows = np.asarray(descriptors, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError("descriptors must be a 2-D row matrix or DescriptorGrid(s)")
    return rows


def _log_gaussian_resp(X: np.ndarray, gmm_weights, gmm_means, gmm_vars):
    """Per-descriptor log joint densities log(w_k N(x | mu_k, var_k)), shape (n, K)."""
    log_det = np.log(2.0 * np.pi * gmm_vars).sum(axis=1)  # (K,)
    # squared Mahalanobis distance under diagonal covariance
    sq = (
        ((X * X) @ (1.0 / gmm_vars).T)
        - 2.0 * (X @ (gmm_means / gmm_vars).T)
        + (gmm_means * gmm_means / gmm_vars).sum(axis=1)[None, :]
    )
    return np.log(gmm_weights)[None, :] - 0.5 * (log_det[None, :] + sq)


def fit_gmm(
    descriptors,
    components: int,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-6,
) -> GmmCodebook:
    """EM for a diagonal-covariance GMM, initialized from k-means.

    Variances are floored at 1e-6; EM stops when the relative total
    log-likelihood change drops below tol or after max_iter rounds. The
    recorded log-likelihood history is nondecreasing.
    """
    X = _descriptor_rows(descriptors)
    n, d = X.shape
    if components < 1:
        raise ValueError("components must be >= 1")
    distinct = np.unique(X, axis=0).shape[0]
    if distinct == 1:
        raise ValueError("degenerate descriptor set: all rows identical")
    if distinct < components:
        raise ValueError(
            f"need at least {components} distinct descriptors, got {distinct}"
        )

    _, init_assign = kmeans(X, components, seed=seed)
    weights = np.bincount(init_assign.labels, minlength=components).astype(np.float64) / n
    means = np.empty((components, d))
    variances = np.empty((components, d))
    for k in range(components):
        members = X[init_assign.labels == k]
        means[k] = members.mean(axis=0)
        variances[k] = np.maximum(members.var(axis=0), VARIANCE_FLOOR)
    weights = np.maximum(weights, 1e-12)
    weights /= weights.sum()

    ll_history: list[float] = []
    for _ in range(max_iter):
        log_joint = _log_gaussian_resp(X, weights, means, variances)
        row_max = log_joint.max(axis=1, keepdims=True)
        log_norm = row_max + np.log(np.exp(log_joint - row_max).sum(axis=1, keepdims=True))
        ll = float(log_norm.sum())
        resp = np.exp(log_joint - log_norm)

        mass = resp.sum(axis=0)  # (K,)
        safe_mass = np.maximum(mass, 1e-300)
        weights = mass / n
        weights = np.maximum(weights, 0.0)
        weights /= weights.sum()
        means = (resp.T @ X) / safe_mass[:, None]
        second = (resp.T @ (X * X)) / safe_mass[:, None]
        variances = np.maximum(second - means * means, VARIANCE_FLOOR)

        if ll_history and abs(ll - ll_history[-1]) < tol * max(1.0, abs(ll)):
            ll_history.append(ll)
            break
        ll_history.append(ll)

    return GmmCodebook(
        weights=weights, means=means, variances=variances, log_likelihood_history=ll_history
    )


def encode_fisher(grid, gmm: GmmCodebook) -> np.ndarray:
    """Fisher vector of a descriptor set under a GMM codebook.

    Layout: mean-gradient blocks for components 0..K-1, then variance-gradient
    blocks, each of length d (total 2*K*d). Post-processing applies the signed
    square root and global L2 normalization; normalization is skipped when the
    vector norm falls below 1e-12.
    """
    X = _descriptor_rows(grid)
    n, d = X.shape
    if d != gmm.dim:
        raise ValueError(f"descriptor dim {d} does not match codebook dim {gmm.dim}")

    log_joint = _log_gaussian_resp(X, gmm.weights, gmm.means, gmm.variances)
    row_max = log_joint.max(axis=1, keepdims=True)
    resp = np.exp(log_joint - row_max)
    resp /= resp.sum(axis=1, keepdims=True)  # (n, K)

    sigma = np.sqrt(gmm.variances)  # (K, d)
    mean_blocks = np.empty((gmm.n_components, d))
    var_blocks = np.empty((gmm.n_components, d))
    for k in range(gmm.n_components):
        z = (X - gmm.means[k]) / sigma[k]
        gamma = resp[:, k][:, None]
        mean_blocks[k] = (gamma * z).sum(axis=0) / (n * np.sqrt(gmm.weights[k]))
        var_blocks[k] = (gamma * (z * z - 1.0)).sum(axis=0) / (n * np.sqrt(2.0 * gmm.weights[k]))

    v = np.concatenate([mean_blocks.ravel(), var_blocks.ravel()])
    v = np.sign(v) * np.sqrt(np.abs(v))
    norm = np.linalg.norm(v)
    if norm >= 1e-12:
        v = v / norm
    return v


def fit_vlad_codebook(descriptors, n_codewords: int, seed: int = 0) -> VladCodebook:
    """K-means over pooled descriptors; the centers become codewords."""
    X = _descriptor_rows(descriptors)
    model, _ = kmeans(X, n_codewords, seed=seed)
    return VladCodebook(codewords=model.centers)


def encode_vlad(grid, codebook: VladCodebook) -> np.ndarray:
    """VLAD encoding: per-codeword sums of residuals to the nearest codeword.

    Each nonzero residual block is L2-normalized (intra-normalization), then
    the concatenated vector is L2-normalized globally; a zero vector is
    returned unnormalized.
    """
    X = _descriptor_rows(grid)
    n, d = X.shape
    if d != codebook.dim:
        raise ValueError(f"descriptor dim {d} does not match codebook dim {codebook.dim}")

    c = codebook.codewords
    d2 = (
        (X * X).sum(axis=1)[:, None] - 2.0 * X @ c.T + (c * c).sum(axis=1)[None, :]
    )
    nearest = d2.argmin(axis=1)

    blocks = np.zeros((codebook.n_codewords, d))
    for k in range(codebook.n_codewords):
        members = X[nearest == k]
        if members.size:
            blocks[k] = (members - c[k]).sum(axis=0)
        block_norm = np.linalg.norm(blocks[k])
        if block_norm >= 1e-12:
            blocks[k] /= block_norm
    v = blocks.ravel()
    norm = np.linalg.norm(v)
    if norm >= 1e-12:
        v = v / norm
    return v


def fit_pca(X, target_dim: int) -> PcaModel:
    """PCA of a feature matrix via SVD of the centered data.

    The effective output dimension is min(target_dim, D, rank of the centered
    data); eigenvalues are the variances along the retained components.
    Column signs are fixed so the largest-magnitude entry of each eigenvector
    is positive.
    """
    values = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("expected a FeatureMatrix or 2-D array")
    n, d = values.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 rows")
    if target_dim < 1:
        raise ValueError("target_dim must be >= 1")

    mean = values.mean(axis=0)
    centered = values - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s.size and s[0] > 0:
        rank = int((s > s[0] * max(n, d) * np.finfo(np.float64).eps).sum())
    else:
        rank = 0
    p = min(target_dim, d, rank)
    projection = vt[:p].T.copy()
    eigenvalues = (s[:p] ** 2) / (n - 1)
    for j in range(p):
        pivot = np.argmax(np.abs(projection[:, j]))
        if projection[pivot, j] < 0:
            projection[:, j] = -projection[:, j]
    return PcaModel(mean=mean, projection=projection, eigenvalues=eigenvalues)


def apply_pca(model: PcaModel, x) -> np.ndarray:
    """Project vectors onto the retained components: (x - mean) @ projection."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} does not match model dim {model.input_dim}")
    return (x - model.mean) @ model.projection


def transform_pca(model: PcaModel, X: FeatureMatrix) -> FeatureMatrix:
    """PCA-project a whole FeatureMatrix, preserving item ids."""
    return FeatureMatrix(ids=X.ids, values=apply_pca(model, X.values))


def save_pca(model: PcaModel, path: str) -> None:
    """Three fmat matrices: '<path>.mean.fmat', '.projection.fmat', '.eigenvalues.fmat'."""
    write_fmat(path + ".mean.fmat", model.mean.reshape(1, -1))
    write_fmat(path + ".projection.fmat", model.projection)
    write_fmat(path + ".eigenvalues.fmat", model.eigenvalues.reshape(1, -1))


def load_pca(path: str) -> PcaModel:
    mean = read_fmat(path + ".mean.fmat").ravel()
    projection = read_fmat(path + ".projection.fmat")
    eigenvalues = read_fmat(path + ".eigenvalues.fmat").ravel()
    return PcaModel(mean=mean, projection=projection, eigenvalues=eigenvalues)
