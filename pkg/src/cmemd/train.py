"""Model assembly, the training loop and held-out evaluation."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .checkpoint import load_tensors, save_tensors
from .config import RunConfig, format_config, parse_config_text
from .data import generate_dataset, load_feature_file, sample_batch
from .errors import InvalidArgument, NumericalError
from .evalkit import evaluate_both, fisher_ratio, modality_gap
from .losses import THERMAL, VISIBLE, CenterTracker, LabeledBatch
from .mgs import TERMS, MgsState, extract_mgs, inference_feature, mgs_backward, mgs_losses

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "config_hash", "epoch", "lr", "objective", *TERMS,
    "modality_gap", "fisher_ratio", "rank_1_v2t", "rank_1_t2v", "map_v2t", "map_t2v",
    "sinkhorn_nonconverged",
)
CHECKPOINT_NAME = "checkpoint.ckpt"
METRICS_NAME = "metrics.csv"


class Model:
    """Encoder plus the multi-granularity heads, with one flat parameter list."""

    def __init__(self, cfg, num_classes, rng=None):
        self.cfg = cfg
        self.num_classes = num_classes
        if rng is None:
            self.encoder = enc.EncoderParams(cfg.encoder)
            self.mgs = MgsState(cfg.encoder.channels, num_classes, cfg.mgs)
        else:
            self.encoder = enc.EncoderParams.initialize(cfg.encoder, rng)
            self.mgs = MgsState(cfg.encoder.channels, num_classes, cfg.mgs, rng)

    def parameters(self):
        yield from self.encoder.named_parameters()
        yield from self.mgs.named_parameters(self.cfg.ablation.trainable_part_weights)

    def zero_grad(self):
        self.encoder.zero_grad()
        self.mgs.zero_grad()

    def features(self, inputs, modality, training=True, update_state=True):
        gmap, lmap, tape = enc.forward(self.encoder, inputs, modality)
        fs = extract_mgs(gmap, lmap, self.cfg.mgs, self.mgs, training, update_state)
        return fs, tape

    def loss(self, batch, labels, update_state=True, frozen=None, centers=None, backward=True):
        """Objective on one batch; accumulates gradients unless ``backward`` is False."""
        fs, tape = self.features(batch.features, batch.modality, True, update_state)
        obj = mgs_losses(fs, labels, batch.modality, self.mgs, self.cfg.mgs, self.cfg.sinkhorn,
                         self.cfg.ablation, frozen, centers)
        if backward:
            self.backward(fs, tape, obj)
        return obj, fs

    def backward(self, fs, tape, obj):
        g_gmap, g_lmap = mgs_backward(fs, self.mgs, obj.grad_global, obj.grad_locals)
        enc.backward(self.encoder, tape, g_gmap, g_lmap)
        if self.cfg.ablation.trainable_part_weights:
            self.mgs.grad_part_logits += obj.grad_logits

    def inference(self, inputs, modality, beta=None):
        beta = self.cfg.mgs.beta if beta is None else beta
        fs, _ = self.features(inputs, modality, training=False)
        return inference_feature(fs, beta)

    def tensors(self):
        out = {name: value for name, value, _ in self.encoder.named_parameters()}
        out.update(self.mgs.state_tensors())
        return out

    def load_tensors(self, tensors):
        enc_t = {k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")}
        self.encoder = enc.EncoderParams(self.cfg.encoder, enc_t)
        self.mgs.load_state_tensors(tensors)


@dataclass
class TrainResult:
    model: Model
    rows: list
    aborted: bool = False
    diagnostics: dict = field(default_factory=dict)


def load_data(cfg):
    """Train/test splits from the configured feature files, or from the generator."""
    if cfg.data.train_file:
        train = load_feature_file(cfg.data.train_file)
        if not cfg.data.test_file:
            raise InvalidArgument("files.train_file given without files.test_file")
        test = load_feature_file(cfg.data.test_file)
        return train, test
    ds = generate_dataset(cfg.data.synth)
    return ds.train, ds.test


def label_map(identity):
    ids = np.unique(identity)
    return {int(c): i for i, c in enumerate(ids)}


def held_out_metrics(model, test, beta=None):
    feats = model.inference(test.features, test.modality, beta)
    vis = test.modality == VISIBLE
    th = test.modality == THERMAL
    reports = evaluate_both(feats, test.identity, test.modality)
    return {
        "modality_gap": modality_gap(feats[vis], feats[th]),
        "fisher_ratio": fisher_ratio(LabeledBatch(feats, test.identity, test.modality)),
        "rank_1_v2t": reports["visible_to_thermal"].rank_1,
        "rank_1_t2v": reports["thermal_to_visible"].rank_1,
        "map_v2t": reports["visible_to_thermal"].map_score,
        "map_t2v": reports["thermal_to_visible"].map_score,
    }


def train(cfg: RunConfig, data=None, out_dir=None):
    """Run the full training loop; returns the model and one metrics row per epoch.

    Row 0 holds the metrics of the untrained model. If a loss or gradient
    goes non-finite the loop stops and the last good parameters are kept.
    """
    cfg.validate()
    train_set, test_set = data if data is not None else load_data(cfg)
    if train_set.features.shape[1] != cfg.encoder.input_dim:
        raise InvalidArgument(
            f"data has {train_set.features.shape[1]} columns, encoder expects {cfg.encoder.input_dim}")
    lmap = label_map(train_set.identity)
    labels_all = np.array([lmap[int(c)] for c in train_set.identity])
    model = Model(cfg, len(lmap), np.random.default_rng([cfg.seed, 0]))
    sampler = np.random.default_rng([cfg.seed, 1])
    opt = cfg.optim
    per_epoch = opt.batches_per_epoch or math.ceil(train_set.features.shape[0] / cfg.batch.size)
    centers = None
    if cfg.ablation.baseline_loss == "center":
        centers = CenterTracker(len(lmap), cfg.encoder.channels * cfg.mgs.K)
    chash = cfg.config_hash()
    velocity = {}

    def row(epoch, lr, sums, count, nonconv):
        r = {"config_hash": chash, "epoch": epoch, "lr": lr}
        r["objective"] = sums["objective"] / count if count else 0.0
        for t in TERMS:
            r[t] = sums[t] / count if count else 0.0
        r.update(held_out_metrics(model, test_set))
        r["sinkhorn_nonconverged"] = nonconv
        return r

    rows = [row(0, 0.0, {}, 0, 0)]
    aborted = False
    diagnostics = {}
    for epoch in range(1, opt.epochs + 1):
        lr = enc.step_decay_lr(epoch - 1, opt.lr, opt.epochs, opt.decay_every, opt.decay_factor,
                               opt.reference_epochs)
        sums = dict.fromkeys(("objective", *TERMS), 0.0)
        nonconv = 0
        for _ in range(per_epoch):
            idx, batch = sample_batch(train_set, cfg.batch, sampler)
            labels = labels_all[idx]
            # the forward pass moves running statistics; keep a copy to roll back to
            saved = {k: v.copy() for k, v in model.mgs.state_tensors().items()}
            try:
                obj, fs = model.loss(batch, labels, centers=centers.centers if centers else None)
                if not np.isfinite(obj.value):
                    raise NumericalError("non-finite objective", {"terms": obj.terms})
                enc.sgd_step(model.parameters(), lr, opt.momentum, opt.weight_decay, velocity)
                if centers is not None:
                    centers.update(fs.holistic, labels)
            except NumericalError as exc:
                log.error("epoch %d: %s; stopping with last good parameters", epoch, exc)
                diagnostics = {"epoch": epoch, "error": str(exc), **exc.diagnostics}
                model.zero_grad()
                model.mgs.load_state_tensors(saved)
                aborted = True
                break
            nonconv += len(obj.diagnostics.get("sinkhorn_nonconverged", ()))
            sums["objective"] += obj.value
            for t in TERMS:
                sums[t] += obj.terms[t]
        if aborted:
            break
        if nonconv:
            log.info("epoch %d: %d Sinkhorn solves hit max_iterations", epoch, nonconv)
        if epoch % cfg.eval.eval_every == 0 or epoch == opt.epochs:
            rows.append(row(epoch, lr, sums, per_epoch, nonconv))
    result = TrainResult(model, rows, aborted, diagnostics)
    if out_dir is not None:
        write_outputs(result, cfg, out_dir)
    return result


def format_metrics(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in rows:
        writer.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in METRIC_COLUMNS])
    return buf.getvalue()


def save_model(path, model, cfg):
    meta = {
        "schema_version": 1,
        "config_hash": cfg.config_hash(),
        "config": format_config(cfg),
        "num_classes": model.num_classes,
    }
    save_tensors(path, model.tensors(), meta)


def load_model(path, cfg=None):
    """Rebuild a model from a checkpoint; ``cfg`` defaults to the embedded config."""
    tensors, meta = load_tensors(path)
    stored = parse_config_text(meta["config"])
    if cfg is None:
        cfg = stored
    model = Model(cfg, int(meta["num_classes"]))
    model.load_tensors(tensors)
    return model, meta


def write_outputs(result, cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, METRICS_NAME), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_metrics(result.rows))
    save_model(os.path.join(out_dir, CHECKPOINT_NAME), result.model, cfg)
    with open(os.path.join(out_dir, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash = {cfg.config_hash()}\n")
        fh.write(format_config(cfg))
