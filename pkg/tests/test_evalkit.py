import numpy as np
import pytest

from cmemd.core_math import pairwise_euclidean
from cmemd.errors import InvalidArgument
from cmemd.evalkit import (
    RetrievalReport,
    average_precision,
    emd_gap,
    evaluate_both,
    evaluate_retrieval,
    fisher_ratio,
    modality_gap,
)
from cmemd.losses import THERMAL, VISIBLE, LabeledBatch, cm_dl_loss
from cmemd.ot import exact_transport, transport_cost
from oracles import brute_retrieval


def batch(features, ids, modality):
    return LabeledBatch(np.asarray(features, dtype=float), ids, [modality] * len(ids))


def test_perfect_retrieval():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(6, 3))
    rep = evaluate_retrieval(batch(f, range(6), VISIBLE), batch(f, range(6), THERMAL))
    assert rep.rank_1 == 1.0 and rep.map_score == 1.0


def test_hand_ranked_list():
    q = batch([[0.0]], [7], VISIBLE)
    g = batch([[1.0], [2.0], [3.0], [4.0], [5.0]], [1, 2, 7, 3, 4], THERMAL)
    rep = evaluate_retrieval(q, g)
    assert rep.map_score == pytest.approx(1 / 3)
    assert rep.rank_k[1] == 0.0 and rep.rank_k[10] == 1.0
    assert average_precision([0, 0, 1, 0, 0]) == pytest.approx(1 / 3)
    assert average_precision([1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2)


def test_ties_follow_gallery_order():
    q = batch([[0.0]], [1], VISIBLE)
    g = batch([[1.0], [-1.0]], [2, 1], THERMAL)
    assert evaluate_retrieval(q, g).rank_1 == 0.0
    g = batch([[1.0], [-1.0]], [1, 2], THERMAL)
    assert evaluate_retrieval(q, g).rank_1 == 1.0


def test_missing_identity_is_excluded():
    q = batch([[0.0], [1.0]], [1, 9], VISIBLE)
    g = batch([[0.0], [2.0]], [1, 2], THERMAL)
    rep = evaluate_retrieval(q, g)
    assert rep.excluded_queries == 1
    assert rep.rank_1 == 1.0


def test_single_relevant_among_ten_matches_oracle():
    values = []
    for seed in range(200):
        rng = np.random.default_rng(seed)
        q = batch(rng.normal(size=(1, 4)), [0], VISIBLE)
        g = batch(rng.normal(size=(10, 4)), [0] + list(range(1, 10)), THERMAL)
        rep = evaluate_retrieval(q, g)
        _, ap = brute_retrieval(q.features, q.identity, g.features, g.identity)
        assert rep.map_score == pytest.approx(ap, abs=1e-15)
        values.append(rep.map_score)
    # a uniformly random position of one relevant item has expected AP sum_k (1/10)(1/k)
    expected = sum(0.1 / k for k in range(1, 11))
    assert np.mean(values) == pytest.approx(expected, abs=0.05)


@pytest.mark.parametrize("seed", range(10))
def test_against_brute_force(seed):
    rng = np.random.default_rng(seed)
    nq, ng = rng.integers(1, 30, size=2)
    q = batch(rng.integers(0, 3, size=(nq, 2)), rng.integers(0, 4, size=nq), VISIBLE)
    g = batch(rng.integers(0, 3, size=(ng, 2)), rng.integers(0, 4, size=ng), THERMAL)
    if not np.isin(q.identity, g.identity).any():
        return
    rep = evaluate_retrieval(q, g)
    keep = np.isin(q.identity, g.identity)
    ranks, m = brute_retrieval(q.features[keep], q.identity[keep], g.features, g.identity)
    assert rep.rank_k == ranks
    assert rep.map_score == pytest.approx(m, abs=1e-15)


def test_cmc_monotone_and_bounded():
    rng = np.random.default_rng(1)
    q = batch(rng.normal(size=(20, 3)), rng.integers(0, 5, 20), VISIBLE)
    g = batch(rng.normal(size=(25, 3)), rng.integers(0, 5, 25), THERMAL)
    rep = evaluate_retrieval(q, g)
    assert 0 <= rep.rank_k[1] <= rep.rank_k[10] <= rep.rank_k[20] <= 1
    assert np.all(np.diff(rep.cmc) >= 0)
    assert 0 <= rep.map_score <= 1


def test_map_invariant_to_gallery_permutation():
    rng = np.random.default_rng(2)
    q = batch(rng.normal(size=(8, 3)), rng.integers(0, 3, 8), VISIBLE)
    g = batch(rng.normal(size=(12, 3)), rng.integers(0, 3, 12), THERMAL)
    perm = rng.permutation(12)
    g2 = batch(g.features[perm], g.identity[perm], THERMAL)
    assert evaluate_retrieval(q, g).map_score == pytest.approx(evaluate_retrieval(q, g2).map_score)


def test_report_json_keys():
    rep = RetrievalReport({1: 0.5, 10: 1.0, 20: 1.0}, 0.7, "thermal_to_visible", 2)
    assert set(rep.to_dict()) == {"rank_1", "rank_10", "rank_20", "map", "direction",
                                  "excluded_queries"}
    assert '"rank_1": 0.5' in rep.to_json()


def test_evaluate_both_directions():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(8, 2))
    reports = evaluate_both(f, np.repeat([0, 1], 4), np.tile([0, 0, 1, 1], 2))
    assert set(reports) == {"visible_to_thermal", "thermal_to_visible"}
    with pytest.raises(InvalidArgument):
        evaluate_retrieval(batch(f, range(8), 0), batch(f, range(8), 1), "sideways")


def test_modality_gap_examples():
    rng = np.random.default_rng(4)
    fv = rng.normal(size=(5, 3))
    assert modality_gap(fv, fv) == 0.0
    delta = np.array([1.0, -2.0, 2.0])
    assert modality_gap(fv, fv + delta) == pytest.approx(3.0)


def test_emd_gap_matches_exact_transport():
    rng = np.random.default_rng(5)
    fv, ft = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    cost = pairwise_euclidean(fv, ft)
    assert emd_gap(fv, ft) == transport_cost(exact_transport(cost), cost)
    assert emd_gap(rng.normal(size=(70, 2)), rng.normal(size=(70, 2))) is None


def test_fisher_ratio():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(8, 3))
    b = LabeledBatch(f, [0, 0, 0, 0, 1, 1, 1, 1], [0, 0, 1, 1] * 2)
    assert fisher_ratio(b) == pytest.approx(cm_dl_loss(b).value, abs=1e-12)
    aligned = LabeledBatch([[0.0], [0.0], [3.0], [3.0]], [0, 0, 1, 1], [0, 1, 0, 1])
    assert fisher_ratio(aligned) == 0.0
    collapsed = LabeledBatch(np.zeros((4, 2)), [0, 0, 1, 1], [0, 1, 0, 1])
    assert fisher_ratio(collapsed) == float("inf")


def test_fisher_ratio_falls_as_classes_separate():
    rng = np.random.default_rng(7)
    noise = rng.normal(scale=0.3, size=(8, 2))
    ids = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    mods = np.array([0, 0, 1, 1] * 2)
    ratios = []
    for sep in (0.5, 1, 2, 4, 8):
        centers = np.where(ids[:, None] == 0, -sep / 2, sep / 2) * np.array([1.0, 0.0])
        ratios.append(fisher_ratio(LabeledBatch(centers + noise, ids, mods)))
    assert all(a > b for a, b in zip(ratios, ratios[1:]))
