"""Multi-granularity features (global, part, accumulated part, holistic) and the weighted objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .core_math import GEM_P, BNNeck, gem_pool, gem_pool_backward, softmax, softmax_backward
from .errors import InvalidArgument
from .ot import SinkhornConfig

SYSU_GAMMA = (1.0, 1.0, 0.1, 2.0, 0.1)
REGDB_GAMMA = (3.0, 2.0, 0.4, 1.0, 0.6)
TERMS = ("cm_dl_holistic", "id_local", "cm_emd_local", "id_global", "cm_emd_global")
BASELINES = ("none", "kl", "center", "triplet")


@dataclass
class MgsConfig:
    K: int = 6
    alpha: float = 1.0
    gamma: tuple = REGDB_GAMMA
    beta: float = 0.5
    gem_p: float = GEM_P

    def __post_init__(self):
        self.gamma = tuple(float(g) for g in self.gamma)
        if self.K < 2:
            raise InvalidArgument(f"K must be >= 2, got {self.K}")
        if self.alpha < 0:
            raise InvalidArgument(f"alpha must be >= 0, got {self.alpha}")
        if len(self.gamma) != 5 or any(g < 0 for g in self.gamma):
            raise InvalidArgument(f"gamma must be five non-negative weights, got {self.gamma}")
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidArgument(f"beta must lie in [0, 1], got {self.beta}")


@dataclass
class LossOptions:
    """Switches that turn the full objective into the ablation variants."""

    enable_cm_emd: bool = True
    enable_cm_dl: bool = True
    weight_mode: str = "optimal_transport"
    baseline_loss: str = "none"
    triplet_margin: float = 0.3
    trainable_part_weights: bool = True
    l2_normalize_alignment: bool = False

    def __post_init__(self):
        if self.weight_mode not in L.WEIGHT_MODES:
            raise InvalidArgument(f"unknown weight_mode {self.weight_mode!r}")
        if self.baseline_loss not in BASELINES:
            raise InvalidArgument(f"unknown baseline_loss {self.baseline_loss!r}")


@dataclass
class MgsFeatureSet:
    global_: np.ndarray
    locals: list
    accumulated: list
    holistic: np.ndarray
    part_weight_logits: np.ndarray
    cache: dict = field(default=None, repr=False)


class MgsState:
    """Trainable pieces that sit on top of the encoder maps.

    One BNNeck per granularity (global plus each part), the part-weight
    logits, and the identity heads: 1 global, K part and K-1 accumulated.
    """

    def __init__(self, channels, num_classes, cfg, rng=None):
        self.cfg = cfg
        self.channels = channels
        self.num_classes = num_classes
        K = cfg.K
        self.bn_global = BNNeck(channels)
        self.bn_locals = [BNNeck(channels) for _ in range(K)]
        self.part_logits = np.zeros(K)
        self.grad_part_logits = np.zeros(K)
        self.heads = {"global": np.zeros((channels, num_classes))}
        for k in range(1, K + 1):
            self.heads[f"local{k}"] = np.zeros((channels, num_classes))
        for k in range(2, K + 1):
            self.heads[f"acc{k}"] = np.zeros((k * channels, num_classes))
        if rng is not None:
            for name, w in self.heads.items():
                s = np.sqrt(6.0 / sum(w.shape))
                self.heads[name] = rng.uniform(-s, s, size=w.shape)
        self.head_grads = {k: np.zeros_like(v) for k, v in self.heads.items()}

    def necks(self):
        yield "bn_global", self.bn_global
        for k, bn in enumerate(self.bn_locals, start=1):
            yield f"bn_local{k}", bn

    def named_parameters(self, include_part_logits=True):
        for name, bn in self.necks():
            yield f"mgs.{name}.scale", bn.scale, bn.grad_scale
        if include_part_logits:
            yield "mgs.part_logits", self.part_logits, self.grad_part_logits
        for name in self.heads:
            yield f"mgs.head.{name}", self.heads[name], self.head_grads[name]

    def zero_grad(self):
        for _, _, g in self.named_parameters():
            g[...] = 0.0

    def state_tensors(self):
        """Everything needed to rebuild the state, including running statistics."""
        out = {name: value for name, value, _ in self.named_parameters()}
        for name, bn in self.necks():
            out[f"mgs.{name}.running_mean"] = bn.running_mean
            out[f"mgs.{name}.running_var"] = bn.running_var
        return out

    def load_state_tensors(self, tensors):
        for name, value in tensors.items():
            if not name.startswith("mgs."):
                continue
            parts = name.split(".")
            if parts[1] == "part_logits":
                target = self.part_logits
            elif parts[1] == "head":
                target = self.heads[parts[2]]
            else:
                bn = dict(self.necks())[parts[1]]
                target = getattr(bn, parts[2])
            if target.shape != value.shape:
                raise InvalidArgument(f"{name}: expected shape {target.shape}, got {value.shape}")
            target[...] = value


def holistic_feature(locals_, part_weight_logits):
    """Concatenation of the part features, each scaled by its softmax weight."""
    logits = np.asarray(part_weight_logits, dtype=np.float64)
    if len(locals_) != logits.size:
        raise InvalidArgument(f"{len(locals_)} part features but {logits.size} weights")
    rows = {np.shape(f)[0] for f in locals_}
    if len(rows) != 1:
        raise InvalidArgument(f"part features disagree on row count: {sorted(rows)}")
    w = softmax(logits)
    return np.concatenate([wk * f for wk, f in zip(w, locals_)], axis=1)


def holistic_backward(locals_, part_weight_logits, grad):
    """Gradients of :func:`holistic_feature` on each part and on the logits."""
    w = softmax(part_weight_logits)
    d = locals_[0].shape[1]
    g_locals = []
    g_w = np.zeros(len(locals_))
    for k, f in enumerate(locals_):
        block = grad[:, k * d:(k + 1) * d]
        g_locals.append(w[k] * block)
        g_w[k] = np.sum(block * f)
    return g_locals, softmax_backward(w, g_w)


def extract_mgs(global_map, local_map, cfg, state, training=True, update_state=True):
    """Pool, normalize and assemble all granularities from the two stream maps."""
    K = cfg.K
    H = local_map.shape[1]
    if H % K:
        raise InvalidArgument(f"map height {H} is not divisible by K={K}")
    band = H // K
    pooled_g = gem_pool(global_map, cfg.gem_p)
    fg, cache_g = state.bn_global.forward(pooled_g, training, update_state)
    pooled_l, locals_, caches_l = [], [], []
    for k in range(K):
        region = local_map[:, k * band:(k + 1) * band]
        p = gem_pool(region, cfg.gem_p)
        f, c = state.bn_locals[k].forward(p, training, update_state)
        pooled_l.append(p)
        locals_.append(f)
        caches_l.append(c)
    accumulated = [np.concatenate(locals_[:k], axis=1) for k in range(2, K + 1)]
    holistic = holistic_feature(locals_, state.part_logits)
    cache = {"global_map": global_map, "local_map": local_map, "pooled_g": pooled_g,
             "pooled_l": pooled_l, "bn_g": cache_g, "bn_l": caches_l, "band": band}
    return MgsFeatureSet(fg, locals_, accumulated, holistic, state.part_logits.copy(), cache)


def mgs_backward(fs, state, grad_global, grad_locals):
    """Back through BNNeck and GeM to gradients on the global and local maps."""
    c = fs.cache
    p = state.cfg.gem_p
    g = state.bn_global.backward(c["bn_g"], grad_global)
    g_gmap = gem_pool_backward(c["global_map"], c["pooled_g"], g, p)
    g_lmap = np.zeros_like(c["local_map"])
    band = c["band"]
    for k, gk in enumerate(grad_locals):
        gk = state.bn_locals[k].backward(c["bn_l"][k], gk)
        region = c["local_map"][:, k * band:(k + 1) * band]
        g_lmap[:, k * band:(k + 1) * band] = gem_pool_backward(region, c["pooled_l"][k], gk, p)
    return g_gmap, g_lmap


def inference_feature(fs, beta):
    """Test-time descriptor: beta-weighted full part concatenation next to the (1-beta)-weighted global feature."""
    parts = np.concatenate(fs.locals, axis=1)
    return np.concatenate([beta * parts, (1.0 - beta) * fs.global_], axis=1)


@dataclass
class Objective:
    value: float
    terms: dict
    grad_global: np.ndarray
    grad_locals: list
    grad_logits: np.ndarray
    frozen: dict
    diagnostics: dict


def _alignment(fv, ft, key, opts, sinkhorn_cfg, frozen, used):
    if opts.baseline_loss == "kl":
        return L.kl_alignment_baseline(fv, ft)
    res = L.cm_emd_loss(fv, ft, sinkhorn_cfg, opts.weight_mode, weights=frozen.get(key),
                        normalize=opts.l2_normalize_alignment)
    used[key] = res.diagnostics["weights"]
    if res.diagnostics.get("converged") is False:
        used.setdefault("_nonconverged", []).append(key)
    return res


def mgs_losses(fs, labels, modality, state, cfg, sinkhorn_cfg=None, opts=None,
               frozen=None, centers=None):
    """Weighted sum of the five loss groups and its gradients.

    Head gradients are accumulated into ``state``; gradients on the global
    feature, the part features and the part logits are returned. Terms whose
    weight is zero (or that an ablation switch disables) are skipped and
    reported as 0. ``frozen`` maps alignment-term keys to pair weights to
    reuse instead of re-solving; the weights actually used come back in
    ``Objective.frozen``.
    """
    opts = opts or LossOptions()
    sinkhorn_cfg = sinkhorn_cfg or SinkhornConfig()
    frozen = frozen or {}
    labels = np.asarray(labels, dtype=int)
    modality = np.asarray(modality, dtype=int)
    g1, g2, g3, g4, g5 = cfg.gamma
    if not opts.enable_cm_emd:
        g3 = g5 = 0.0
    if not opts.enable_cm_dl and opts.baseline_loss not in ("center", "triplet"):
        g1 = 0.0
    K = cfg.K
    C = fs.global_.shape[1]
    vis = modality == L.VISIBLE
    th = modality == L.THERMAL
    grad_g = np.zeros_like(fs.global_)
    grad_l = [np.zeros_like(f) for f in fs.locals]
    grad_acc = [np.zeros_like(f) for f in fs.accumulated]
    grad_logits = np.zeros(K)
    terms = dict.fromkeys(TERMS, 0.0)
    used = {}
    diagnostics = {}

    def id_term(feat, head, weight):
        res = L.identity_loss(feat @ state.heads[head], labels)
        state.head_grads[head] += weight * (feat.T @ res.gradient)
        return res.value, weight * (res.gradient @ state.heads[head].T)

    if g4:
        v, g = id_term(fs.global_, "global", g4)
        terms["id_global"] = v
        grad_g += g
    if g2:
        total = 0.0
        for k in range(K):
            v, g = id_term(fs.locals[k], f"local{k + 1}", g2)
            total += v
            grad_l[k] += g
        if cfg.alpha:
            for k in range(2, K + 1):
                v, g = id_term(fs.accumulated[k - 2], f"acc{k}", g2 * cfg.alpha)
                total += cfg.alpha * v
                grad_acc[k - 2] += g
        terms["id_local"] = total

    def align(feat, key, weight, grad_out):
        res = _alignment(feat[vis], feat[th], key, opts, sinkhorn_cfg, frozen, used)
        gv, gt = res.gradient
        grad_out[vis] += weight * gv
        grad_out[th] += weight * gt
        return res.value

    if g5:
        terms["cm_emd_global"] = align(fs.global_, "global", g5, grad_g)
    if g3:
        total = 0.0
        for k in range(K):
            total += align(fs.locals[k], f"local{k + 1}", g3, grad_l[k])
        if cfg.alpha:
            for k in range(2, K + 1):
                total += cfg.alpha * align(fs.accumulated[k - 2], f"acc{k}", g3 * cfg.alpha,
                                           grad_acc[k - 2])
        terms["cm_emd_local"] = total

    if g1:
        batch = L.LabeledBatch(fs.holistic, labels, modality)
        if opts.baseline_loss in ("center", "triplet"):
            res = L.metric_baselines(batch, opts.baseline_loss, opts.triplet_margin, centers)
        else:
            res = L.cm_dl_loss(batch)
        terms["cm_dl_holistic"] = res.value
        g_locals, g_logits = holistic_backward(fs.locals, state.part_logits, g1 * res.gradient)
        for k in range(K):
            grad_l[k] += g_locals[k]
        if opts.trainable_part_weights:
            grad_logits += g_logits

    for j, g in enumerate(grad_acc):
        for k in range(j + 2):
            grad_l[k] += g[:, k * C:(k + 1) * C]

    gammas = dict(zip(TERMS, (g1, g2, g3, g4, g5)))
    value = sum(gammas[t] * terms[t] for t in TERMS)
    if "_nonconverged" in used:
        diagnostics["sinkhorn_nonconverged"] = used.pop("_nonconverged")
    return Objective(float(value), terms, grad_g, grad_l, grad_logits, used, diagnostics)
