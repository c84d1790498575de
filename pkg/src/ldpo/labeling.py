"""Keyword labels for clusters from their associated documents.

Documents are pooled per cluster and term frequencies ranked; terms that make
every cluster's provisional top list are treated as corpus-wide boilerplate
and dropped from all lists.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field

from .cluster import ClusterAssignment
from .data import TextCorpus, _atomic_write_text

_TOKEN = re.compile(r"[a-z]+")
MIN_TERM_LENGTH = 3


def tokenize(text: str) -> list[str]:
    """Lowercased alphabetic runs of length >= 3, in order of appearance."""
    return [t for t in _TOKEN.findall(text.lower()) if len(t) >= MIN_TERM_LENGTH]


def corpus_from_texts(texts: dict[str, str]) -> TextCorpus:
    return TextCorpus(docs={item_id: tokenize(text) for item_id, text in texts.items()})


@dataclass
class ClusterKeywords:
    """Ranked (term, count) lists per cluster, plus the globally removed terms."""

    per_cluster: dict[int, list[tuple[str, int]]]
    removed: tuple[str, ...] = ()

    def __post_init__(self):
        removed = set(self.removed)
        for cluster_id, ranked in self.per_cluster.items():
            counts = [c for _, c in ranked]
            if any(c <= 0 for c in counts) or any(
                a < b for a, b in zip(counts, counts[1:])
            ):
                raise ValueError(f"cluster {cluster_id}: counts must be positive, nonincreasing")
            if any(t in removed for t, _ in ranked):
                raise ValueError(f"cluster {cluster_id}: removed term present in list")


def _ranked(counter: Counter) -> list[tuple[str, int]]:
    return sorted(counter.items(), key=lambda item: (-item[1], item[0]))


def extract_keywords(
    corpus: TextCorpus,
    assignment: ClusterAssignment,
    top_n: int = 10,
    stoplist=frozenset(),
    df_ratio: float | None = None,
) -> ClusterKeywords:
    """Top terms per cluster, with terms common to all clusters removed.

    Default removal rule: a term appearing in every cluster's pre-removal
    top_n list is dropped from all lists. With df_ratio set, the rule is
    instead to drop terms present (at any rank) in at least that fraction of
    clusters. Either rule is skipped when there is a single cluster. Corpus
    ids must all be assigned; assigned items without documents are fine.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    if df_ratio is not None and not 0.0 < df_ratio <= 1.0:
        raise ValueError("df_ratio must lie in (0, 1]")
    if assignment.ids is None:
        raise ValueError("assignment must carry item ids to join with the corpus")
    stop = {str(t) for t in stoplist}
    cluster_of = {item_id: int(c) for item_id, c in zip(assignment.ids, assignment.labels)}

    k = assignment.n_clusters
    counters = [Counter() for _ in range(k)]
    for item_id, tokens in corpus.docs.items():
        if item_id not in cluster_of:
            raise ValueError(f"corpus id {item_id!r} not present in the assignment")
        counters[cluster_of[item_id]].update(t for t in tokens if t not in stop)

    rankings = [_ranked(c) for c in counters]
    removal: set[str] = set()
    if k >= 2:
        if df_ratio is None:
            top_sets = [{t for t, _ in ranked[:top_n]} for ranked in rankings]
            removal = set.intersection(*top_sets) if top_sets else set()
        else:
            presence = Counter()
            for counter in counters:
                presence.update(counter.keys())
            removal = {t for t, n_present in presence.items() if n_present / k >= df_ratio}

    per_cluster = {
        cluster_id: [(t, c) for t, c in ranked if t not in removal][:top_n]
        for cluster_id, ranked in enumerate(rankings)
    }
    return ClusterKeywords(per_cluster=per_cluster, removed=tuple(sorted(removal)))


def save_keywords(keywords: ClusterKeywords, path: str) -> None:
    """JSON object mapping cluster id to [{term, count}, ...]."""
    payload = {
        str(cluster_id): [{"term": t, "count": c} for t, c in ranked]
        for cluster_id, ranked in sorted(keywords.per_cluster.items())
    }
    _atomic_write_text(path, json.dumps(payload, indent=2) + "\n")


def load_keywords(path: str) -> ClusterKeywords:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    per_cluster = {
        int(cluster_id): [(str(e["term"]), int(e["count"])) for e in ranked]
        for cluster_id, ranked in payload.items()
    }
    return ClusterKeywords(per_cluster=per_cluster)


def load_stoplist(path: str) -> frozenset[str]:
    """Newline-delimited terms; blank lines ignored, terms lowercased."""
    with open(path, "r", encoding="utf-8") as fh:
        return frozenset(line.strip().lower() for line in fh if line.strip())
