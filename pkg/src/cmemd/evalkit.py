"""Cross-modality retrieval metrics and alignment diagnostics."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .core_math import pairwise_euclidean
from .errors import InvalidArgument, UnsupportedSize
from .losses import THERMAL, V_INTER_FLOOR, VISIBLE, LabeledBatch, variance_terms
from .ot import exact_transport, transport_cost

RANKS = (1, 10, 20)
DIRECTIONS = ("visible_to_thermal", "thermal_to_visible")
REPORT_SCHEMA_VERSION = 1

log = logging.getLogger(__name__)


@dataclass
class RetrievalReport:
    rank_k: dict
    map_score: float
    direction: str
    excluded_queries: int = 0
    cmc: np.ndarray = field(default=None, repr=False)

    @property
    def rank_1(self):
        return self.rank_k[1]

    def to_dict(self):
        return {
            "rank_1": self.rank_k[1],
            "rank_10": self.rank_k[10],
            "rank_20": self.rank_k[20],
            "map": self.map_score,
            "direction": self.direction,
            "excluded_queries": self.excluded_queries,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def average_precision(hits):
    """AP of a ranked 0/1 relevance list: mean precision at each hit."""
    hits = np.asarray(hits, dtype=bool)
    n_rel = hits.sum()
    if n_rel == 0:
        return 0.0
    positions = np.nonzero(hits)[0] + 1
    return float(np.mean(np.arange(1, n_rel + 1) / positions))


def evaluate_retrieval(query, gallery, direction="visible_to_thermal", ranks=RANKS):
    """CMC at ``ranks`` and mAP for ranking ``gallery`` rows against each query.

    Galleries are ordered by ascending Euclidean distance; equal distances
    keep gallery index order. Queries whose identity never appears in the
    gallery are skipped and counted in ``excluded_queries``.
    """
    if direction not in DIRECTIONS:
        raise InvalidArgument(f"unknown direction {direction!r}")
    dist = pairwise_euclidean(query.features, gallery.features)
    order = np.argsort(dist, axis=1, kind="stable")
    matches = gallery.identity[order] == query.identity[:, None]
    valid = matches.any(axis=1)
    excluded = int((~valid).sum())
    if excluded:
        log.warning("%s: %d queries have no match in the gallery and were skipped",
                    direction, excluded)
    matches = matches[valid]
    n_gallery = gallery.features.shape[0]
    if matches.shape[0] == 0:
        return RetrievalReport({k: 0.0 for k in ranks}, 0.0, direction, excluded,
                               np.zeros(n_gallery))
    first = np.argmax(matches, axis=1)
    cmc = np.array([(first < k).mean() for k in range(1, n_gallery + 1)])
    rank_k = {k: float(cmc[min(k, n_gallery) - 1]) for k in ranks}
    aps = [average_precision(row) for row in matches]
    return RetrievalReport(rank_k, float(np.mean(aps)), direction, excluded, cmc)


def evaluate_both(features, identity, modality):
    """Retrieval reports in both directions over one labelled feature set."""
    vis = modality == VISIBLE
    th = modality == THERMAL
    v = LabeledBatch(features[vis], identity[vis], modality[vis])
    t = LabeledBatch(features[th], identity[th], modality[th])
    return {
        "visible_to_thermal": evaluate_retrieval(v, t, "visible_to_thermal"),
        "thermal_to_visible": evaluate_retrieval(t, v, "thermal_to_visible"),
    }


def modality_gap(fv, ft):
    """Distance between the visible and thermal mean vectors."""
    fv = np.asarray(fv, dtype=np.float64)
    ft = np.asarray(ft, dtype=np.float64)
    if fv.shape[0] == 0 or ft.shape[0] == 0:
        raise InvalidArgument("both modalities need at least one sample")
    return float(np.linalg.norm(fv.mean(axis=0) - ft.mean(axis=0)))


def emd_gap(fv, ft):
    """Exact earth mover's distance between the two empirical clouds, or None if too large."""
    cost = pairwise_euclidean(fv, ft)
    try:
        return transport_cost(exact_transport(cost), cost)
    except UnsupportedSize:
        return None


def fisher_ratio(batch):
    """Cross-modality intra/inter scatter ratio; ``inf`` if the inter term collapses."""
    if len(np.unique(batch.identity)) < 2:
        raise InvalidArgument("fisher ratio needs at least two classes")
    intra, inter = variance_terms(batch)
    if inter < V_INTER_FLOOR:
        return float("inf")
    return intra / inter
