import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldpo.data import (
    DescriptorGrid,
    FeatureMatrix,
    LoadError,
    SplitAssignment,
    load_feature_matrix,
    load_split,
    read_fmat,
    save_feature_matrix,
    save_split,
    split_dataset,
    write_fmat,
)


def test_feature_matrix_validation():
    with pytest.raises(ValueError, match="2-D"):
        FeatureMatrix(ids=["a"], values=np.zeros(3))
    with pytest.raises(ValueError, match="ids for"):
        FeatureMatrix(ids=["a", "b"], values=np.zeros((3, 2)))
    with pytest.raises(ValueError, match="duplicate id"):
        FeatureMatrix(ids=["a", "a"], values=np.zeros((2, 2)))
    with pytest.raises(ValueError, match="non-finite"):
        FeatureMatrix(ids=["a", "b"], values=np.array([[0.0, 1.0], [np.nan, 2.0]]))


def test_feature_matrix_subset_keeps_ids():
    m = FeatureMatrix(ids=["a", "b", "c"], values=np.arange(6.0).reshape(3, 2))
    sub = m.subset([2, 0])
    assert sub.ids == ["c", "a"]
    assert np.array_equal(sub.values, m.values[[2, 0]])


def test_descriptor_grid_from_grid_flattens():
    grid = np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3)
    g = DescriptorGrid.from_grid("x", grid)
    assert g.descriptors.shape == (4, 3)
    assert np.array_equal(g.descriptors[1], grid[0, 1])


def test_fmat_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    values = rng.normal(size=(7, 5))
    path = str(tmp_path / "m.fmat")
    write_fmat(path, values)
    back = read_fmat(path)
    assert back.dtype == np.float64
    assert np.array_equal(back, values)


def test_fmat_rejects_bad_magic_and_truncation(tmp_path):
    path = str(tmp_path / "m.fmat")
    write_fmat(path, np.ones((2, 2)))
    raw = open(path, "rb").read()
    bad = str(tmp_path / "bad.fmat")
    with open(bad, "wb") as fh:
        fh.write(b"XMAT" + raw[4:])
    with pytest.raises(LoadError, match="bad magic"):
        read_fmat(bad)
    short = str(tmp_path / "short.fmat")
    with open(short, "wb") as fh:
        fh.write(raw[:-8])
    with pytest.raises(LoadError, match="expected"):
        read_fmat(short)


def test_feature_matrix_fmat_requires_id_sidecar(tmp_path):
    m = FeatureMatrix(ids=["a", "b"], values=np.ones((2, 3)))
    path = str(tmp_path / "m.fmat")
    save_feature_matrix(m, path)
    back = load_feature_matrix(path)
    assert back.ids == m.ids
    assert np.array_equal(back.values, m.values)
    os.unlink(path + ".ids")
    with pytest.raises(LoadError, match="missing id sidecar"):
        load_feature_matrix(path)


def test_feature_matrix_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    m = FeatureMatrix(ids=["x1", "x2", "x3"], values=rng.normal(size=(3, 4)))
    path = str(tmp_path / "m.csv")
    save_feature_matrix(m, path, format="csv")
    back = load_feature_matrix(path, format="csv")
    assert back.ids == m.ids
    # 17 significant digits round-trips float64 exactly
    assert np.array_equal(back.values, m.values)


def test_feature_matrix_csv_header_checks(tmp_path):
    path = str(tmp_path / "m.csv")
    with open(path, "w") as fh:
        fh.write("id,f0,f2\na,1.0,2.0\n")
    with pytest.raises(LoadError, match="expected 'f1'"):
        load_feature_matrix(path, format="csv")
    with open(path, "w") as fh:
        fh.write("name,f0\na,1.0\n")
    with pytest.raises(LoadError, match="first column must be 'id'"):
        load_feature_matrix(path, format="csv")


def test_no_temp_files_left_behind(tmp_path):
    m = FeatureMatrix(ids=["a", "b"], values=np.ones((2, 3)))
    save_feature_matrix(m, str(tmp_path / "m.fmat"))
    save_feature_matrix(m, str(tmp_path / "m.csv"), format="csv")
    leftovers = [n for n in os.listdir(tmp_path) if n.startswith(".tmp_")]
    assert leftovers == []


def test_split_sizes_follow_ratios():
    split = split_dataset(20, (0.7, 0.1, 0.2), seed=0)
    counts = split.counts()
    assert counts == {"train": 14, "val": 2, "test": 4}


def test_split_remainder_goes_to_train():
    # 0.1 * 9 = 0.9 floors to 0 for both held-out groups
    split = split_dataset(9, (0.8, 0.1, 0.1), seed=1)
    counts = split.counts()
    assert counts["val"] == 0 and counts["test"] == 0
    assert counts["train"] == 9


def test_split_is_deterministic_and_seed_sensitive():
    a = split_dataset(50, (0.7, 0.1, 0.2), seed=4)
    b = split_dataset(50, (0.7, 0.1, 0.2), seed=4)
    c = split_dataset(50, (0.7, 0.1, 0.2), seed=5)
    assert a.tags == b.tags
    assert a.tags != c.tags


def test_split_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        split_dataset(10, (0.5, 0.2, 0.2), seed=0)
    with pytest.raises(ValueError, match="nonnegative"):
        split_dataset(10, (1.2, -0.1, -0.1), seed=0)
    with pytest.raises(ValueError, match="n must be"):
        split_dataset(0, (0.7, 0.1, 0.2), seed=0)
    with pytest.raises(ValueError, match="unknown split tag"):
        SplitAssignment(tags=["train", "dev"], seed=0)


@settings(deadline=None, max_examples=40)
@given(n=st.integers(1, 400), seed=st.integers(0, 2**31 - 1))
def test_split_partitions_every_item(n, seed):
    split = split_dataset(n, (0.7, 0.1, 0.2), seed=seed)
    assert len(split.tags) == n
    merged = np.concatenate([split.indices(t) for t in ("train", "val", "test")])
    assert sorted(merged.tolist()) == list(range(n))


def test_split_file_round_trip(tmp_path):
    split = split_dataset(12, (0.7, 0.1, 0.2), seed=9)
    ids = [f"i{j}" for j in range(12)]
    path = str(tmp_path / "split.csv")
    save_split(split, ids, path)
    back_ids, back = load_split(path)
    assert back_ids == ids
    assert back.tags == split.tags


def test_split_file_rejects_unknown_tag(tmp_path):
    path = str(tmp_path / "split.csv")
    with open(path, "w") as fh:
        fh.write("id,split\na,train\nb,holdout\n")
    with pytest.raises(LoadError, match="unknown split tag"):
        load_split(path)
