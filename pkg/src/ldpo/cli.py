"""Command line front end.

Subcommands: loop, cluster, encode, metrics, tree, keywords. Exit codes:
0 success, 1 usage error, 2 runtime error. All files are written atomically
(temp file in the target directory, then rename).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .cluster import load_assignment, save_assignment
from .data import (
    _atomic_write_text,
    load_feature_matrix,
    load_split,
    save_feature_matrix,
    save_split,
)
from .hierarchy import save_tree
from .labeling import corpus_from_texts, extract_keywords, load_stoplist, save_keywords
from .learner import load_learner, save_learner
from .metrics import nmi, purity
from .pipeline import (
    ap_config_from_dict,
    cluster_features,
    encode_grids,
    load_grids_dir,
    loop_config_from_dict,
    parse_config_file,
    run_loop,
    run_tree,
    save_reports,
    save_reports_csv,
)

STATE_FILE = "state.json"


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_raw_config(path: str | None) -> dict:
    return parse_config_file(path) if path else {}


def _load_features(path: str, fmt: str | None = None):
    fmt = fmt or ("csv" if path.endswith(".csv") else "fmat")
    return load_feature_matrix(path, format=fmt)


def _cmd_loop(args) -> int:
    raw = _load_raw_config(args.config)
    config = loop_config_from_dict(raw)
    if args.input:
        config = replace(config, features_path=args.input, features_format=None, grids_dir=None)
    if args.seed is not None:
        config = replace(config, base_seed=args.seed)
    result = run_loop(config)

    os.makedirs(args.out, exist_ok=True)
    save_reports(result.reports, os.path.join(args.out, "reports.json"))
    save_reports_csv(result.reports, os.path.join(args.out, "reports.csv"))
    for t, assignment in enumerate(result.assignments):
        save_assignment(assignment, os.path.join(args.out, f"iter_{t}.assignments.csv"))
    save_learner(result.learner, os.path.join(args.out, "learner.json"))
    save_feature_matrix(result.base_features, os.path.join(args.out, "features.base.fmat"))
    save_split(result.split, result.base_features.ids, os.path.join(args.out, "split.csv"))
    final = result.reports[-1]
    state = {
        "iterations": len(result.reports),
        "final_iteration": final.iteration,
        "k": final.k,
        "status": final.status,
        "base_seed": config.base_seed,
    }
    _atomic_write_text(os.path.join(args.out, STATE_FILE), json.dumps(state, indent=2) + "\n")
    print(f"iterations={len(result.reports)} k={final.k} status={final.status}")
    return 0


def _cmd_cluster(args) -> int:
    raw = _load_raw_config(args.config)
    config = loop_config_from_dict(raw)
    seed = args.seed if args.seed is not None else config.base_seed
    features = _load_features(args.input)
    assignment = cluster_features(features, config, seed)
    save_assignment(assignment, args.out)
    print(f"items={assignment.n} k={assignment.n_clusters}")
    return 0


def _cmd_encode(args) -> int:
    raw = _load_raw_config(args.config)
    config = loop_config_from_dict(raw)
    if config.encoding == "none":
        raise ValueError("config must set [encoding] mode to 'fv' or 'vlad'")
    if args.seed is not None:
        config = replace(config, base_seed=args.seed)
    grids = load_grids_dir(args.input)
    features = encode_grids(grids, config)
    save_feature_matrix(features, args.out, format="fmat")
    print(f"items={features.n} dim={features.dim}")
    return 0


def _cmd_metrics(args) -> int:
    a = load_assignment(args.a)
    b = load_assignment(args.b)
    print(f"purity={purity(a, b)} nmi={nmi(a, b)}")
    return 0


def _cmd_tree(args) -> int:
    raw = _load_raw_config(args.config)
    ap_config = ap_config_from_dict(raw) if "tree" in raw else None

    state_path = os.path.join(args.input, STATE_FILE)
    if not os.path.exists(state_path):
        raise ValueError(f"no converged model: {args.input} has no {STATE_FILE} (run 'ldpo loop' first)")
    with open(state_path, "r", encoding="utf-8") as fh:
        state = json.load(fh)
    final_t = int(state["final_iteration"])

    features = load_feature_matrix(os.path.join(args.input, "features.base.fmat"))
    assignment = load_assignment(os.path.join(args.input, f"iter_{final_t}.assignments.csv"))
    learner = load_learner(os.path.join(args.input, "learner.json"))
    split_ids, split = load_split(os.path.join(args.input, "split.csv"))
    if assignment.ids != features.ids or split_ids != features.ids:
        raise ValueError("loop outputs disagree on item ids; rerun 'ldpo loop'")

    tree = run_tree(assignment, learner, features, ap_config, split=split)
    os.makedirs(args.out, exist_ok=True)
    save_tree(tree, os.path.join(args.out, "tree.json"))
    print("widths=" + ",".join(str(w) for w in tree.widths))
    return 0


def _cmd_keywords(args) -> int:
    raw = _load_raw_config(args.config)
    section = raw.get("keywords", {})
    corpus_path = section.get("corpus")
    if corpus_path is None:
        raise ValueError("config must set [keywords] corpus = <texts json path>")
    with open(corpus_path, "r", encoding="utf-8") as fh:
        texts = json.load(fh)
    if not isinstance(texts, dict) or not all(isinstance(v, str) for v in texts.values()):
        raise ValueError(f"{corpus_path}: expected a JSON object mapping id to text")
    corpus = corpus_from_texts(texts)
    stoplist = load_stoplist(section["stoplist"]) if "stoplist" in section else frozenset()
    assignment = load_assignment(args.input)
    keywords = extract_keywords(
        corpus,
        assignment,
        top_n=int(section.get("top_n", 10)),
        stoplist=stoplist,
        df_ratio=float(section["df_ratio"]) if "df_ratio" in section else None,
    )
    save_keywords(keywords, args.out)
    print(f"clusters={len(keywords.per_cluster)} removed={len(keywords.removed)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ldpo", description="Looped pseudo-task optimization over feature corpora.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    def common(p, with_seed=True):
        p.add_argument("--config", help="TOML config file")
        if with_seed:
            p.add_argument("--seed", type=int, help="override the config base seed")

    p = sub.add_parser("loop", help="run the cluster/train loop and write reports")
    common(p)
    p.add_argument("--in", dest="input", help="initial feature matrix (.fmat or .csv); overrides config")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_loop)

    p = sub.add_parser("cluster", help="cluster one feature matrix")
    common(p)
    p.add_argument("--in", dest="input", required=True, help="feature matrix (.fmat or .csv)")
    p.add_argument("--out", required=True, help="assignment csv to write")
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("encode", help="encode descriptor grids into one feature matrix")
    common(p)
    p.add_argument("--in", dest="input", required=True, help="directory of <id>.fmat descriptor files")
    p.add_argument("--out", required=True, help="feature matrix file to write (.fmat)")
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("metrics", help="purity and NMI between two assignment files")
    p.add_argument("--a", required=True, help="candidate assignment csv")
    p.add_argument("--b", required=True, help="reference assignment csv")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("tree", help="build the category tree from a finished loop directory")
    common(p, with_seed=False)
    p.add_argument("--in", dest="input", required=True, help="directory written by 'ldpo loop'")
    p.add_argument("--out", required=True, help="output directory for tree.json")
    p.set_defaults(func=_cmd_tree)

    p = sub.add_parser("keywords", help="keyword labels per cluster from documents")
    common(p, with_seed=False)
    p.add_argument("--in", dest="input", required=True, help="assignment csv")
    p.add_argument("--out", required=True, help="keywords json to write")
    p.set_defaults(func=_cmd_keywords)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures map to exit 2 by contract
        print(f"ldpo: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
