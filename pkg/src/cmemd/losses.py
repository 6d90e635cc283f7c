"""Alignment and discrimination losses with analytic gradients.

Every loss returns a :class:`LossValue` whose ``gradient`` has the shape of
the features it was evaluated on. Losses over two modalities take the
visible and thermal feature matrices separately and return a pair of
gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_math import log_softmax, pairwise_euclidean, softmax, squared_euclidean
from .errors import DegenerateBatch, InvalidArgument, NumericalError
from .ot import SinkhornConfig, sinkhorn

VISIBLE = 0
THERMAL = 1
WEIGHT_MODES = ("optimal_transport", "cosine_similarity", "uniform")
DIST_SMOOTHING = 1e-12
V_INTER_FLOOR = 1e-12
KL_VAR_FLOOR = 1e-2


@dataclass
class LossValue:
    value: float
    gradient: object
    diagnostics: dict = field(default_factory=dict)


@dataclass
class LabeledBatch:
    features: np.ndarray
    identity: np.ndarray
    modality: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.identity = np.asarray(self.identity, dtype=int)
        self.modality = np.asarray(self.modality, dtype=int)
        n = self.features.shape[0]
        if self.identity.shape != (n,) or self.modality.shape != (n,):
            raise InvalidArgument("identity and modality must have one entry per feature row")

    @property
    def visible(self):
        return self.features[self.modality == VISIBLE]

    @property
    def thermal(self):
        return self.features[self.modality == THERMAL]

    def __len__(self):
        return self.features.shape[0]


def _split_check(fv, ft):
    fv = np.asarray(fv, dtype=np.float64)
    ft = np.asarray(ft, dtype=np.float64)
    if fv.ndim != 2 or ft.ndim != 2 or fv.shape[0] == 0 or ft.shape[0] == 0:
        raise InvalidArgument("both modalities need at least one sample")
    if fv.shape[1] != ft.shape[1]:
        raise InvalidArgument(f"dimension mismatch: {fv.shape[1]} vs {ft.shape[1]}")
    return fv, ft


def pair_weights(fv, ft, dist, mode, cfg=None):
    """Weights over visible/thermal pairs; each mode returns a matrix summing to 1."""
    n, m = dist.shape
    diag = {}
    if not np.all(np.isfinite(dist)):
        raise NumericalError("non-finite cross-modality distances", {"mode": mode})
    if mode == "optimal_transport":
        plan = sinkhorn(dist, cfg=cfg or SinkhornConfig())
        diag = {"converged": plan.converged, "iterations": plan.iterations,
                "marginal_violation": plan.marginal_violation}
        return plan.plan, diag
    if mode == "cosine_similarity":
        nv = np.linalg.norm(fv, axis=1, keepdims=True)
        nt = np.linalg.norm(ft, axis=1, keepdims=True)
        cos = (fv @ ft.T) / np.maximum(nv * nt.T, 1e-12)
        w = (1.0 + np.clip(cos, -1.0, 1.0)) / 2.0
        total = w.sum()
        if total <= 0:
            return np.full((n, m), 1.0 / (n * m)), diag
        return w / total, diag
    if mode == "uniform":
        return np.full((n, m), 1.0 / (n * m)), diag
    raise InvalidArgument(f"unknown weight mode {mode!r}; expected one of {WEIGHT_MODES}")


def weighted_distance(fv, ft, weights):
    """``sum_ij W_ij * ||fv_i - ft_j||`` and its gradient with ``W`` held fixed."""
    value, gv, gt, _ = _weighted_distance(fv, ft, weights)
    return value, gv, gt


def _weighted_distance(fv, ft, weights):
    diff = fv[:, None, :] - ft[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    dist = np.sqrt(np.maximum(sq, 0.0))
    if weights is None:
        return None, None, None, dist
    value = float(np.sum(weights * dist))
    # sum_j c_ij (fv_i - ft_j) without materializing the N x M x D product
    coef = weights / np.sqrt(sq + DIST_SMOOTHING)
    gv = coef.sum(axis=1)[:, None] * fv - coef @ ft
    gt = coef.sum(axis=0)[:, None] * ft - coef.T @ fv
    return value, gv, gt, dist


def l2_normalize(x):
    norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True) + DIST_SMOOTHING)
    return x / norm, norm


def l2_normalize_backward(unit, norm, grad):
    return (grad - unit * np.sum(unit * grad, axis=1, keepdims=True)) / norm


def cm_emd_loss(fv, ft, cfg=None, weight_mode="optimal_transport", weights=None,
                normalize=False):
    """Transport-weighted sum of cross-modality Euclidean distances.

    The weights are treated as constants when differentiating. Passing
    ``weights`` skips the weight computation (used to freeze a solved plan
    for finite-difference checks). With ``normalize`` the rows are projected
    onto the unit sphere before the cost is built.
    """
    fv, ft = _split_check(fv, ft)
    if normalize:
        (uv, nv), (ut, nt) = l2_normalize(fv), l2_normalize(ft)
        res = cm_emd_loss(uv, ut, cfg, weight_mode, weights)
        gv, gt = res.gradient
        grads = (l2_normalize_backward(uv, nv, gv), l2_normalize_backward(ut, nt, gt))
        return LossValue(res.value, grads, res.diagnostics)
    diagnostics = {}
    if weights is None:
        dist = _weighted_distance(fv, ft, None)[3]
        weights, diagnostics = pair_weights(fv, ft, dist, weight_mode, cfg)
    value, gv, gt = weighted_distance(fv, ft, weights)
    diagnostics["weights"] = weights
    return LossValue(value, (gv, gt), diagnostics)


def modality_means(batch):
    fv, ft = batch.visible, batch.thermal
    if fv.shape[0] == 0 or ft.shape[0] == 0:
        raise InvalidArgument("batch must contain both modalities")
    return fv.mean(axis=0), ft.mean(axis=0)


def class_modality_means(batch):
    """Per-class visible and thermal means, keyed by identity label."""
    out = {}
    for c in np.unique(batch.identity):
        sel = batch.identity == c
        v = batch.features[sel & (batch.modality == VISIBLE)]
        t = batch.features[sel & (batch.modality == THERMAL)]
        if v.shape[0] == 0 or t.shape[0] == 0:
            raise InvalidArgument(f"class {c} is missing from one modality")
        out[int(c)] = (v.mean(axis=0), t.mean(axis=0))
    return out


def variance_terms(batch):
    """Cross-modality intra- and inter-class scatter (traces) of a batch."""
    mu_v, mu_t = modality_means(batch)
    means = class_modality_means(batch)
    f = batch.features
    intra = 0.0
    inter = 0.0
    for c, (mu_vc, mu_tc) in means.items():
        sel = batch.identity == c
        vis = f[sel & (batch.modality == VISIBLE)]
        th = f[sel & (batch.modality == THERMAL)]
        intra += np.sum((th - mu_vc) ** 2) + np.sum((vis - mu_tc) ** 2)
        inter += vis.shape[0] * np.sum((mu_vc - mu_t) ** 2) + th.shape[0] * np.sum((mu_tc - mu_v) ** 2)
    return float(intra), float(inter)


def cm_dl_loss(batch):
    """Ratio of cross-modality intra-class to inter-class scatter.

    Each sample is measured against the *other* modality's class mean, and
    each class mean against the other modality's overall mean. The gradient
    includes the dependence of every mean on the features.
    """
    if len(np.unique(batch.identity)) < 2:
        raise InvalidArgument("the discrimination loss needs at least two classes")
    f = batch.features
    is_v = batch.modality == VISIBLE
    is_t = batch.modality == THERMAL
    mu_v, mu_t = modality_means(batch)
    n_v, n_t = int(is_v.sum()), int(is_t.sum())
    means = class_modality_means(batch)

    intra = 0.0
    inter = 0.0
    g_intra = np.zeros_like(f)
    g_inter = np.zeros_like(f)
    g_mu_v = np.zeros(f.shape[1])  # gradient of inter w.r.t. the overall means
    g_mu_t = np.zeros(f.shape[1])
    for c, (mu_vc, mu_tc) in means.items():
        sel = batch.identity == c
        sv = sel & is_v
        st = sel & is_t
        n_vc, n_tc = int(sv.sum()), int(st.sum())
        dt = f[st] - mu_vc
        dv = f[sv] - mu_tc
        intra += np.sum(dt ** 2) + np.sum(dv ** 2)
        # direct terms, plus each class mean collecting the opposite-modality residuals
        g_intra[st] += 2.0 * dt - 2.0 * dv.sum(axis=0) / n_tc
        g_intra[sv] += 2.0 * dv - 2.0 * dt.sum(axis=0) / n_vc

        a = mu_vc - mu_t
        b = mu_tc - mu_v
        inter += n_vc * np.sum(a ** 2) + n_tc * np.sum(b ** 2)
        g_inter[sv] += 2.0 * a  # n_vc * 2a / n_vc
        g_inter[st] += 2.0 * b
        g_mu_t -= 2.0 * n_vc * a
        g_mu_v -= 2.0 * n_tc * b
    g_inter[is_v] += g_mu_v / n_v
    g_inter[is_t] += g_mu_t / n_t

    if inter < V_INTER_FLOOR:
        raise DegenerateBatch(f"inter-class scatter {inter!r} is below the floor")
    value = intra / inter
    grad = (g_intra * inter - intra * g_inter) / inter ** 2
    return LossValue(float(value), grad, {"v_intra": float(intra), "v_inter": float(inter)})


def identity_loss(logits, labels):
    """Mean softmax cross-entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n, k = logits.shape
    if labels.shape != (n,):
        raise InvalidArgument("one label per logit row required")
    if np.any(labels < 0) or np.any(labels >= k):
        raise InvalidArgument(f"labels must lie in [0, {k})")
    logp = log_softmax(logits, axis=1)
    value = -float(np.mean(logp[np.arange(n), labels]))
    grad = softmax(logits, axis=1)
    grad[np.arange(n), labels] -= 1.0
    return LossValue(value, grad / n)


def kl_alignment_baseline(fv, ft):
    """KL(visible || thermal) between per-dimension Gaussian fits, summed over dimensions."""
    fv, ft = _split_check(fv, ft)
    mv, mt = fv.mean(axis=0), ft.mean(axis=0)
    raw_a, raw_b = fv.var(axis=0), ft.var(axis=0)
    a = np.maximum(raw_a, KL_VAR_FLOOR)
    b = np.maximum(raw_b, KL_VAR_FLOOR)
    m = mv - mt
    value = float(np.sum(0.5 * np.log(b / a) + (a + m ** 2) / (2.0 * b) - 0.5))
    da = np.where(raw_a > KL_VAR_FLOOR, -0.5 / a + 0.5 / b, 0.0)
    db = np.where(raw_b > KL_VAR_FLOOR, 0.5 / b - (a + m ** 2) / (2.0 * b ** 2), 0.0)
    dm = m / b
    nv, nt = fv.shape[0], ft.shape[0]
    gv = dm / nv + da * 2.0 * (fv - mv) / nv
    gt = -dm / nt + db * 2.0 * (ft - mt) / nt
    return LossValue(max(value, 0.0), (gv, gt))


class CenterTracker:
    """Running class centers for the center-loss baseline."""

    def __init__(self, num_classes, dim, rate=0.5):
        self.centers = np.zeros((num_classes, dim))
        self.seen = np.zeros(num_classes, dtype=bool)
        self.rate = rate

    def update(self, features, labels):
        for c in np.unique(labels):
            mean = features[labels == c].mean(axis=0)
            if not self.seen[c]:
                self.centers[c] = mean
                self.seen[c] = True
            else:
                self.centers[c] += self.rate * (mean - self.centers[c])


def center_loss(features, labels, centers):
    diff = features - centers[labels]
    n = features.shape[0]
    value = float(np.sum(diff ** 2) / n)
    return LossValue(value, 2.0 * diff / n)


def triplet_loss(features, labels, margin=0.3):
    """Batch-hard triplet loss on Euclidean distances."""
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = f.shape[0]
    sq = squared_euclidean(f, f)
    dist = np.sqrt(np.maximum(sq, 0.0) + DIST_SMOOTHING)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    grad = np.zeros_like(f)
    if not np.any(valid):
        return LossValue(0.0, grad, {"no_valid_triplet": True})
    total = 0.0
    for i in np.nonzero(valid)[0]:
        p = np.argmax(np.where(pos_mask[i], dist[i], -np.inf))
        q = np.argmin(np.where(neg_mask[i], dist[i], np.inf))
        hinge = dist[i, p] - dist[i, q] + margin
        if hinge <= 0:
            continue
        total += hinge
        up = (f[i] - f[p]) / dist[i, p]
        uq = (f[i] - f[q]) / dist[i, q]
        grad[i] += up - uq
        grad[p] -= up
        grad[q] += uq
    count = int(valid.sum())
    return LossValue(total / count, grad / count, {"no_valid_triplet": False})


def metric_baselines(batch, kind, margin=0.3, centers=None):
    if kind == "triplet":
        if len(np.unique(batch.identity)) < 2:
            return LossValue(0.0, np.zeros_like(batch.features), {"no_valid_triplet": True})
        return triplet_loss(batch.features, batch.identity, margin)
    if kind == "center":
        if centers is None:
            # without running state, the batch class means serve as centers
            centers = np.zeros((int(batch.identity.max()) + 1, batch.features.shape[1]))
            for c in np.unique(batch.identity):
                centers[c] = batch.features[batch.identity == c].mean(axis=0)
        return center_loss(batch.features, batch.identity, centers)
    raise InvalidArgument(f"unknown metric baseline {kind!r}")
