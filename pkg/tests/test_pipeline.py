import json
import os

import numpy as np
import pytest

from conftest import feature_matrix_from, make_blobs
from ldpo.cli import main
from ldpo.cluster import ClusterAssignment, save_assignment
from ldpo.data import FeatureMatrix, SplitAssignment, save_feature_matrix, write_fmat
from ldpo.learner import LearnerConfig
from ldpo.pipeline import (
    REPORT_FIELDS,
    DescriptorGrid,
    IterationReport,
    LoopConfig,
    _ensure_train_support,
    ap_config_from_dict,
    cluster_features,
    encode_grids,
    load_config,
    load_reports,
    loop_config_from_dict,
    parse_config_file,
    run_loop,
    run_tree,
    save_reports,
    save_reports_csv,
)

FAST_LEARNER = LearnerConfig(hidden_dim=16, epochs=5, batch_size=16)


def easy_corpus(seed=0, n_per=20):
    points, truth = make_blobs(seed, n_per=n_per, n_blobs=3, dim=10, center_scale=6.0, noise=0.5)
    return feature_matrix_from(points), truth


def easy_config(**overrides):
    base = dict(cluster_mode="kmeans", k=3, max_iterations=5, learner=FAST_LEARNER)
    base.update(overrides)
    return LoopConfig(**base)


@pytest.fixture(scope="module")
def finished_loop():
    features, truth = easy_corpus()
    result = run_loop(easy_config(), features=features)
    return features, truth, result


def test_loop_config_validation():
    with pytest.raises(ValueError, match="unknown cluster_mode 'bogus'"):
        LoopConfig(cluster_mode="bogus")
    with pytest.raises(ValueError, match="unknown encoding"):
        LoopConfig(encoding="bogus")
    with pytest.raises(ValueError, match="max_iterations"):
        LoopConfig(max_iterations=0)
    with pytest.raises(ValueError, match="sum to 1"):
        LoopConfig(split_ratios=(0.5, 0.2, 0.2))
    with pytest.raises(ValueError, match=r"purity_threshold must lie in \[0, 1\]"):
        LoopConfig(purity_threshold=1.5)


def test_iteration_report_validation():
    fields = dict(
        iteration=0, k=3, purity=None, nmi=None,
        train_top1=0.9, val_top1=0.8, test_top1=0.7,
        train_top5=None, val_top5=None, test_top5=None,
        wall_clock_seconds=0.1, seed=0, status="running",
    )
    IterationReport(**fields)
    with pytest.raises(ValueError, match="unknown status"):
        IterationReport(**dict(fields, status="bogus"))
    with pytest.raises(ValueError, match=r"outside \[0, 1\]"):
        IterationReport(**dict(fields, purity=1.5))
    with pytest.raises(ValueError, match="negative wall clock"):
        IterationReport(**dict(fields, wall_clock_seconds=-1.0))


def test_single_iteration_loop(finished_loop):
    features, _, _ = finished_loop
    result = run_loop(easy_config(max_iterations=1), features=features)
    assert len(result.reports) == 1
    report = result.reports[0]
    assert report.iteration == 0
    assert report.status == "max_iterations_reached"
    assert report.purity is None and report.nmi is None
    assert report.k == 3
    assert report.seed == 0
    assert report.train_top5 is None  # k < 5
    assert 0.0 <= report.train_top1 <= 1.0


def test_easy_corpus_converges_quickly(finished_loop):
    features, truth, result = finished_loop
    assert result.reports[-1].status == "converged"
    assert len(result.reports) < 5
    final = result.reports[-1]
    assert final.purity >= 0.7 and final.nmi >= 0.7
    truth_assignment = ClusterAssignment(labels=truth, n_clusters=3, ids=features.ids)
    from ldpo.metrics import purity

    assert purity(result.assignment, truth_assignment) == 1.0


def test_iteration_seeds_offset_from_base(finished_loop):
    _, _, result = finished_loop
    for t, report in enumerate(result.reports):
        assert report.iteration == t
        assert report.seed == 0 + t
    assert all(r.status == "running" for r in result.reports[:-1])


def test_learner_trains_on_base_but_clusters_embeddings(finished_loop):
    features, _, result = finished_loop
    assert result.base_features is features
    assert len(result.reports) >= 2
    # after iteration 0 the clustered matrix is the learner's hidden embedding
    assert result.features.dim == FAST_LEARNER.hidden_dim
    assert result.features.ids == features.ids


def test_loop_is_deterministic(finished_loop):
    features, _, _ = finished_loop
    a = run_loop(easy_config(base_seed=3), features=features)
    b = run_loop(easy_config(base_seed=3), features=features)
    assert len(a.reports) == len(b.reports)
    for ra, rb in zip(a.reports, b.reports):
        for name in REPORT_FIELDS:
            if name == "wall_clock_seconds":
                continue
            assert getattr(ra, name) == getattr(rb, name)
    assert np.array_equal(a.assignment.labels, b.assignment.labels)


def test_external_features_are_realigned_by_id(tmp_path, finished_loop):
    features, _, _ = finished_loop
    rng = np.random.default_rng(0)
    perm = rng.permutation(features.n)
    shuffled = FeatureMatrix(
        ids=[features.ids[i] for i in perm], values=features.values[perm]
    )
    save_feature_matrix(shuffled, str(tmp_path / "ext_1.fmat"))

    config = easy_config(
        max_iterations=2,
        external_pattern=str(tmp_path / "ext_{t}.fmat"),
        purity_threshold=0.0,
        nmi_threshold=0.0,
    )
    result = run_loop(config, features=features)
    assert len(result.reports) == 2
    assert result.features.ids == features.ids
    assert np.array_equal(result.features.values, features.values)


def test_ensure_train_support_merges_unsupported_clusters():
    values = np.vstack([np.zeros((8, 2)), np.full((2, 2), 10.0)])
    features = feature_matrix_from(values)
    assignment = ClusterAssignment(
        labels=np.array([0] * 8 + [1] * 2), n_clusters=2, ids=features.ids
    )
    split = SplitAssignment(tags=["train"] * 8 + ["test"] * 2, seed=0)
    merged = _ensure_train_support(assignment, split, features)
    assert merged.n_clusters == 1
    assert np.array_equal(merged.labels, np.zeros(10, dtype=int))
    assert merged.ids == features.ids

    fine = SplitAssignment(tags=["train"] * 7 + ["test", "train", "val"], seed=0)
    kept = _ensure_train_support(assignment, fine, features)
    assert np.array_equal(kept.labels, assignment.labels)


def test_cluster_features_modes(finished_loop):
    features, _, _ = finished_loop
    plain = cluster_features(features, easy_config(), seed=0)
    assert plain.n_clusters == 3
    pruned = cluster_features(
        features, easy_config(cluster_mode="kmeans_rim", k_init=10), seed=0
    )
    assert 2 <= pruned.n_clusters <= 10


def test_run_tree_from_finished_loop(finished_loop):
    features, _, result = finished_loop
    tree = run_tree(result.assignment, result.learner, features)
    assert tree.widths[0] == result.assignment.n_clusters
    assert tree.widths[-1] == 1
    scoped = run_tree(result.assignment, result.learner, features, split=result.split)
    assert scoped.widths[0] == result.assignment.n_clusters


def test_run_tree_validation(finished_loop):
    features, _, result = finished_loop
    with pytest.raises(ValueError, match="no converged model"):
        run_tree(None, None, features)
    two = ClusterAssignment(
        labels=np.arange(features.n) % 2, n_clusters=2, ids=features.ids
    )
    with pytest.raises(ValueError, match="learner has 3 classes, assignment 2"):
        run_tree(two, result.learner, features)
    short = ClusterAssignment(labels=[0, 1, 2], n_clusters=3)
    with pytest.raises(ValueError, match="different item counts"):
        run_tree(short, result.learner, features)


def test_report_files_round_trip(tmp_path, finished_loop):
    _, _, result = finished_loop
    path = str(tmp_path / "reports.json")
    save_reports(result.reports, path)
    back = load_reports(path)
    assert len(back) == len(result.reports)
    for orig, loaded in zip(result.reports, back):
        for name in REPORT_FIELDS:
            assert getattr(orig, name) == getattr(loaded, name)

    csv_path = str(tmp_path / "reports.csv")
    save_reports_csv(result.reports, csv_path)
    lines = open(csv_path).read().splitlines()
    assert lines[0] == ",".join(REPORT_FIELDS)
    assert len(lines) == 1 + len(result.reports)
    first = lines[1].split(",")
    assert len(first) == len(REPORT_FIELDS)
    assert first[REPORT_FIELDS.index("purity")] == ""  # no previous iteration yet


def test_config_file_parsing(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        """
[features]
path = "feat.csv"
format = "csv"

[clustering]
mode = "kmeans_rim"
k_init = 12
penalty_weight = 2.5

[encoding]
mode = "fv"
n_components = 4
pca_dim = 2

[loop]
max_iterations = 3
purity_threshold = 0.85
nmi_threshold = 0.8
split_ratios = [0.6, 0.2, 0.2]
base_seed = 7

[learner]
hidden_dim = 32
epochs = 3

[tree]
damping = 0.75
max_iter = 200
""",
        encoding="utf-8",
    )
    config = load_config(str(path))
    assert config.features_path == "feat.csv"
    assert config.features_format == "csv"
    assert config.cluster_mode == "kmeans_rim"
    assert config.k_init == 12
    assert config.penalty_weight == 2.5
    assert config.encoding == "fv"
    assert config.n_components == 4
    assert config.pca_dim == 2
    assert config.max_iterations == 3
    assert config.purity_threshold == 0.85
    assert config.split_ratios == (0.6, 0.2, 0.2)
    assert config.base_seed == 7
    assert config.learner.hidden_dim == 32
    assert config.learner.epochs == 3

    ap = ap_config_from_dict(parse_config_file(str(path)))
    assert ap.damping == 0.75
    assert ap.max_iter == 200


def test_config_rejects_unknown_names(tmp_path):
    bad_section = tmp_path / "a.toml"
    bad_section.write_text("[bogus]\nx = 1\n", encoding="utf-8")
    with pytest.raises(ValueError, match=r"unknown config section \[bogus\]"):
        parse_config_file(str(bad_section))

    bad_key = tmp_path / "b.toml"
    bad_key.write_text("[loop]\niterations = 3\n", encoding="utf-8")
    with pytest.raises(ValueError, match="unknown key 'iterations'"):
        parse_config_file(str(bad_key))


def test_encode_grids_shapes():
    rng = np.random.default_rng(5)
    grids = [
        DescriptorGrid(item_id=f"g{i}", descriptors=rng.normal(size=(12, 3)))
        for i in range(6)
    ]
    fv = encode_grids(grids, LoopConfig(encoding="fv", n_components=2))
    assert fv.values.shape == (6, 2 * 3 * 2)
    assert list(fv.ids) == [f"g{i}" for i in range(6)]
    vlad = encode_grids(grids, LoopConfig(encoding="vlad", n_components=2))
    assert vlad.values.shape == (6, 3 * 2)
    reduced = encode_grids(grids, LoopConfig(encoding="vlad", n_components=2, pca_dim=2))
    assert reduced.values.shape == (6, 2)
    with pytest.raises(ValueError, match="need encoding mode"):
        encode_grids(grids, LoopConfig(encoding="none"))


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def write_loop_inputs(tmp_path, seed=0):
    features, truth = easy_corpus(seed=seed)
    feat_path = str(tmp_path / "features.csv")
    save_feature_matrix(features, feat_path, format="csv")
    config_path = tmp_path / "run.toml"
    config_path.write_text(
        """
[clustering]
mode = "kmeans"
k = 3

[loop]
max_iterations = 4

[learner]
hidden_dim = 16
epochs = 5
batch_size = 16
""",
        encoding="utf-8",
    )
    return feat_path, str(config_path), features, truth


def test_cli_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["loop"]) == 1  # missing --out
    assert main(["bogus"]) == 1
    capsys.readouterr()


def test_cli_help_exits_0(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    assert "loop" in out and "metrics" in out


def test_cli_metrics_identical_files(tmp_path, capsys):
    assignment = ClusterAssignment(
        labels=np.array([0, 1, 1, 2]), n_clusters=3, ids=("a", "b", "c", "d")
    )
    path = str(tmp_path / "assign.csv")
    save_assignment(assignment, path)
    assert main(["metrics", "--a", path, "--b", path]) == 0
    assert capsys.readouterr().out.strip() == "purity=1.0 nmi=1.0"


def test_cli_metrics_missing_file_exits_2(tmp_path, capsys):
    missing = str(tmp_path / "nope.csv")
    assert main(["metrics", "--a", missing, "--b", missing]) == 2
    assert "ldpo: error:" in capsys.readouterr().err


def test_cli_loop_tree_keywords_end_to_end(tmp_path, capsys):
    feat_path, config_path, features, truth = write_loop_inputs(tmp_path)
    out_dir = str(tmp_path / "run")

    assert main(["loop", "--config", config_path, "--in", feat_path, "--out", out_dir]) == 0
    out = capsys.readouterr().out.strip()
    assert out.startswith("iterations=")
    assert "k=3" in out and "status=converged" in out

    for name in ("reports.json", "reports.csv", "learner.json",
                 "features.base.fmat", "features.base.fmat.ids",
                 "split.csv", "state.json", "iter_0.assignments.csv"):
        assert os.path.exists(os.path.join(out_dir, name)), name
    state = json.load(open(os.path.join(out_dir, "state.json")))
    assert state["k"] == 3 and state["status"] == "converged"
    reports = load_reports(os.path.join(out_dir, "reports.json"))
    assert len(reports) == state["iterations"]
    assert os.path.exists(
        os.path.join(out_dir, f"iter_{state['final_iteration']}.assignments.csv")
    )

    tree_dir = str(tmp_path / "tree")
    assert main(["tree", "--in", out_dir, "--out", tree_dir]) == 0
    out = capsys.readouterr().out.strip()
    assert out.startswith("widths=")
    widths = [int(w) for w in out.removeprefix("widths=").split(",")]
    assert widths[0] == 3 and widths[-1] == 1
    assert os.path.exists(os.path.join(tree_dir, "tree.json"))

    # keyword labels for the final assignment, from a toy text corpus
    final_assignment = os.path.join(out_dir, f"iter_{state['final_iteration']}.assignments.csv")
    texts = {item_id: f"sample text number {i} cluster" for i, item_id in enumerate(features.ids)}
    corpus_path = tmp_path / "texts.json"
    corpus_path.write_text(json.dumps(texts), encoding="utf-8")
    kw_config = tmp_path / "kw.toml"
    kw_config.write_text(
        f'[keywords]\ncorpus = "{corpus_path}"\ntop_n = 3\n', encoding="utf-8"
    )
    kw_out = str(tmp_path / "keywords.json")
    assert main(["keywords", "--config", str(kw_config), "--in", final_assignment, "--out", kw_out]) == 0
    out = capsys.readouterr().out.strip()
    assert out.startswith("clusters=3 removed=")
    assert json.load(open(kw_out))


def test_cli_tree_without_loop_dir_exits_2(tmp_path, capsys):
    empty = str(tmp_path / "empty")
    os.makedirs(empty)
    assert main(["tree", "--in", empty, "--out", str(tmp_path / "t")]) == 2
    err = capsys.readouterr().err
    assert "no converged model" in err and "ldpo loop" in err


def test_cli_keywords_requires_corpus_config(tmp_path, capsys):
    assignment = ClusterAssignment(labels=np.array([0, 1]), n_clusters=2, ids=("a", "b"))
    path = str(tmp_path / "assign.csv")
    save_assignment(assignment, path)
    assert main(["keywords", "--in", path, "--out", str(tmp_path / "kw.json")]) == 2
    assert "corpus" in capsys.readouterr().err


def test_cli_cluster_subcommand(tmp_path, capsys):
    feat_path, config_path, features, _ = write_loop_inputs(tmp_path)
    out_path = str(tmp_path / "assign.csv")
    assert main(["cluster", "--config", config_path, "--in", feat_path, "--out", out_path]) == 0
    assert capsys.readouterr().out.strip() == f"items={features.n} k=3"
    assert os.path.exists(out_path)


def test_cli_encode_subcommand(tmp_path, capsys):
    grid_dir = tmp_path / "grids"
    grid_dir.mkdir()
    rng = np.random.default_rng(2)
    for name in ("a", "b", "c"):
        write_fmat(str(grid_dir / f"{name}.fmat"), rng.normal(size=(8, 3)))
    config = tmp_path / "enc.toml"
    config.write_text('[encoding]\nmode = "vlad"\nn_components = 2\n', encoding="utf-8")
    out_path = str(tmp_path / "encoded.fmat")
    assert main(["encode", "--config", str(config), "--in", str(grid_dir), "--out", out_path]) == 0
    assert capsys.readouterr().out.strip() == "items=3 dim=6"
    assert os.path.exists(out_path) and os.path.exists(out_path + ".ids")

    assert main(["encode", "--in", str(grid_dir), "--out", out_path]) == 2


def test_cli_loop_seed_override(tmp_path, capsys):
    feat_path, config_path, _, _ = write_loop_inputs(tmp_path)
    out_dir = str(tmp_path / "seeded")
    assert main(["loop", "--config", config_path, "--seed", "5",
                 "--in", feat_path, "--out", out_dir]) == 0
    capsys.readouterr()
    reports = load_reports(os.path.join(out_dir, "reports.json"))
    assert reports[0].seed == 5
    state = json.load(open(os.path.join(out_dir, "state.json")))
    assert state["base_seed"] == 5
