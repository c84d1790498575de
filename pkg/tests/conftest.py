"""Shared synthetic-data factories for the test suite."""

import numpy as np
import pytest

from ldpo.data import FeatureMatrix


def make_blobs(seed, n_per=60, n_blobs=3, dim=50, center_scale=3.0, noise=1.0):
    """Gaussian blobs with class labels; points grouped by class in row order."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=center_scale, size=(n_blobs, dim))
    labels = np.repeat(np.arange(n_blobs), n_per)
    points = centers[labels] + rng.normal(scale=noise, size=(n_per * n_blobs, dim))
    return points, labels


def make_score_matrix(rng, n_items, n_classes, labels=None, sharpness=4.0):
    """Random rows summing to 1; when labels are given the true column dominates."""
    raw = rng.random((n_items, n_classes))
    if labels is not None:
        raw[np.arange(n_items), labels] += sharpness
    return raw / raw.sum(axis=1, keepdims=True)


def feature_matrix_from(values, prefix="item"):
    values = np.asarray(values, dtype=np.float64)
    ids = [f"{prefix}{i:05d}" for i in range(values.shape[0])]
    return FeatureMatrix(ids=ids, values=values)


@pytest.fixture
def blobs():
    return make_blobs


@pytest.fixture
def score_matrix():
    return make_score_matrix


@pytest.fixture
def as_features():
    return feature_matrix_from
