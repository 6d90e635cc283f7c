"""Finite-difference checks of every hand-written gradient.

Each component draws ``num_probes`` random coordinates, compares the analytic
derivative against a central difference and keeps the worst relative error.
Alignment terms reuse a solved, frozen transport plan so the objective being
differentiated is the same function the analytic gradient describes.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import losses as L
from .config import RunConfig
from .core_math import GEM_CLAMP_MIN
from .data import sample_batch
from .mgs import holistic_backward, holistic_feature
from .train import Model, label_map, load_data

log = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEP = 1e-5
# the full objective is O(50), so difference quotients carry ~1e-9 of rounding
# noise; gradients below this magnitude are compared on absolute error instead
ERROR_FLOOR = 1e-5
COMPONENTS = ("cm_emd_loss", "cm_dl_loss", "identity_loss", "holistic_weights", "encoder")


@dataclass
class GradcheckReport:
    errors: dict = field(default_factory=dict)
    probes: int = 0
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return all(e <= self.tolerance for e in self.errors.values())

    def lines(self):
        out = []
        for name, err in self.errors.items():
            status = "ok" if err <= self.tolerance else "FAIL"
            out.append(f"{name:40s} max_rel_err={err:.3e} {status}")
        return out


def relative_error(analytic, numeric, floor=ERROR_FLOOR):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def probe(fn, x, grad, coords, step=STEP, pattern=None):
    """Worst relative error of ``grad`` against central differences of ``fn`` at ``coords``.

    ``x`` is perturbed in place and restored after every probe. When
    ``pattern`` is given it should return the on/off state of every
    piecewise-linear unit; probes whose two evaluations straddle a kink are
    skipped because the difference quotient is meaningless there.
    """
    worst = 0.0
    for idx in coords:
        old = x[idx]
        x[idx] = old + step
        plus = fn()
        above = pattern() if pattern else None
        x[idx] = old - step
        minus = fn()
        below = pattern() if pattern else None
        x[idx] = old
        if pattern and not np.array_equal(above, below):
            log.info("probe %s straddles a kink; skipped", idx)
            continue
        worst = max(worst, relative_error(grad[idx], (plus - minus) / (2 * step)))
    return worst


def _coords(shape, n, rng):
    flat = rng.choice(int(np.prod(shape)), size=min(n, int(np.prod(shape))), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def _activation_pattern(model, batch):
    gmap, lmap, tape = enc.forward(model.encoder, batch.features, batch.modality)
    clamp = GEM_CLAMP_MIN
    return np.concatenate([(tape["h1"] > 0).ravel(), (tape["h2"] > 0).ravel(),
                           (gmap > clamp).ravel(), (lmap > clamp).ravel()])


def _toy_batch(rng, classes=3, per=3, dim=5):
    feats, ids, mods = [], [], []
    for c in range(classes):
        for m in (L.VISIBLE, L.THERMAL):
            feats.append(rng.normal(loc=c, size=(per, dim)))
            ids += [c] * per
            mods += [m] * per
    return L.LabeledBatch(np.concatenate(feats), np.array(ids), np.array(mods))


def check_losses(num_probes, rng, corrupt=None):
    """Stand-alone loss functions on small random inputs."""
    scale = lambda name: 1.5 if corrupt == name else 1.0  # noqa: E731
    errors = {}

    fv, ft = rng.normal(size=(5, 4)), rng.normal(size=(6, 4))
    for normalize in (False, True):
        res = L.cm_emd_loss(fv, ft, normalize=normalize)
        w = res.diagnostics["weights"]
        gv, gt = (g * scale("cm_emd_loss") for g in res.gradient)
        f = lambda: L.cm_emd_loss(fv, ft, weights=w, normalize=normalize).value  # noqa: E731
        key = "cm_emd_loss" + ("/normalized" if normalize else "")
        errors[key] = max(probe(f, fv, gv, _coords(fv.shape, num_probes, rng)),
                          probe(f, ft, gt, _coords(ft.shape, num_probes, rng)))

    batch = _toy_batch(rng)
    g = L.cm_dl_loss(batch).gradient * scale("cm_dl_loss")
    errors["cm_dl_loss"] = probe(lambda: L.cm_dl_loss(batch).value, batch.features, g,
                                 _coords(batch.features.shape, num_probes, rng))

    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    g = L.identity_loss(logits, labels).gradient * scale("identity_loss")
    errors["identity_loss"] = probe(lambda: L.identity_loss(logits, labels).value, logits, g,
                                    _coords(logits.shape, num_probes, rng))

    # holistic weights: a random linear read-out of the weighted concatenation
    parts = [rng.normal(size=(4, 3)) for _ in range(5)]
    logits_w = rng.normal(size=5)
    up = rng.normal(size=(4, 15))
    f = lambda: float(np.sum(holistic_feature(parts, logits_w) * up))  # noqa: E731
    g_parts, g_logits = holistic_backward(parts, logits_w, up)
    g_logits = g_logits * scale("holistic_weights")
    errors["holistic_weights"] = max(
        probe(f, logits_w, g_logits, _coords(logits_w.shape, num_probes, rng)),
        max(probe(f, p, gp, _coords(p.shape, max(1, num_probes // 5), rng))
            for p, gp in zip(parts, g_parts)),
    )
    return errors


def check_model(cfg: RunConfig, num_probes, rng, corrupt=None, data=None):
    """End-to-end objective: every encoder layer and the part-weight logits.

    Running statistics are left untouched and the plans are frozen after a
    first solve, so repeated evaluations see the same function.
    """
    train_set, _ = data if data is not None else load_data(cfg)
    lmap = label_map(train_set.identity)
    labels_all = np.array([lmap[int(c)] for c in train_set.identity])
    model = Model(cfg, len(lmap), np.random.default_rng([cfg.seed, 0]))
    idx, batch = sample_batch(train_set, cfg.batch, np.random.default_rng([cfg.seed, 1]))
    labels = labels_all[idx]

    model.zero_grad()
    obj, _ = model.loss(batch, labels, update_state=False)
    frozen = obj.frozen

    def objective():
        return model.loss(batch, labels, update_state=False, frozen=frozen, backward=False)[0].value

    errors = {}
    for name, value, grad in model.parameters():
        if not (name.startswith("encoder.") or name == "mgs.part_logits"):
            continue
        g = grad.copy()
        if corrupt == "encoder" and name.startswith("encoder.") or \
                corrupt == "holistic_weights" and name == "mgs.part_logits":
            g *= 1.5
        errors[f"model/{name}"] = probe(objective, value, g, _coords(value.shape, num_probes, rng),
                                        pattern=lambda: _activation_pattern(model, batch))
    model.zero_grad()
    return errors


def run_gradcheck(cfg: RunConfig, num_probes=10, corrupt=None, data=None):
    """All components; ``corrupt`` names one whose analytic gradient is scaled by 1.5."""
    if corrupt is not None and corrupt not in COMPONENTS:
        raise ValueError(f"unknown component {corrupt!r}; expected one of {COMPONENTS}")
    report = GradcheckReport(probes=num_probes)
    if num_probes <= 0:
        log.warning("gradcheck called with no probes; nothing was checked")
        return report
    rng = np.random.default_rng([cfg.seed, 99])
    report.errors.update(check_losses(num_probes, rng, corrupt))
    report.errors.update(check_model(cfg, num_probes, rng, corrupt, data))
    return report
