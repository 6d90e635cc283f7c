"""Synthetic two-modality identity data, batch sampling and the feature CSV format.

Feature CSV layout (UTF-8, LF line endings)::

    dim=<D>
    <identity:int>,<modality:v|t>,<f1>,...,<fD>
    ...

Floats are written with ``repr`` so a write/read round trip is bit-exact.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, ParseError
from .losses import THERMAL, VISIBLE, LabeledBatch

MODALITY_TAGS = {"v": VISIBLE, "t": THERMAL}
TAG_OF = {VISIBLE: "v", THERMAL: "t"}
MAX_CONDITION = 5.0


@dataclass
class SynthSpec:
    num_identities: int = 40
    dim: int = 16
    modality_offset_scale: float = 3.0
    modality_transform_strength: float = 0.3
    modality_transform_seed: int = 1
    intra_identity_noise: float = 0.5
    samples_per_identity_per_modality: int = 20
    num_test_identities: int = 10
    # heterogeneous noise: this fraction of identities gets noise multiplied by noisy_scale
    noisy_identity_fraction: float = 0.0
    noisy_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_identities < 1 or self.dim < 1 or self.samples_per_identity_per_modality < 1:
            raise InvalidArgument("identity count, dimension and samples per identity must be >= 1")
        if self.intra_identity_noise < 0 or self.modality_offset_scale < 0:
            raise InvalidArgument("noise and offset scales must be >= 0")
        if not 0 <= self.num_test_identities < self.num_identities:
            raise InvalidArgument("num_test_identities must be in [0, num_identities)")
        if not 0.0 <= self.noisy_identity_fraction <= 1.0 or self.noisy_scale < 0:
            raise InvalidArgument("noisy_identity_fraction must be in [0, 1] and noisy_scale >= 0")


@dataclass
class BatchSpec:
    C: int = 6
    n_v: int = 4
    n_t: int = 4

    def __post_init__(self):
        if self.C < 2 or self.n_v < 1 or self.n_t < 1:
            raise InvalidArgument(f"need C >= 2 and n_v, n_t >= 1, got {self}")

    @property
    def size(self):
        return self.C * (self.n_v + self.n_t)


@dataclass
class Dataset:
    train: LabeledBatch
    test: LabeledBatch
    transform: np.ndarray
    offset: np.ndarray


def modality_transform(dim, strength, seed):
    """Random invertible map ``I + strength * R / sqrt(dim)`` with unit-norm columns.

    Redrawn with the next seed until its condition number is below 5.
    """
    for attempt in range(1000):
        rng = np.random.default_rng([seed, attempt])
        A = np.eye(dim) + strength * rng.normal(size=(dim, dim)) / np.sqrt(dim)
        A /= np.linalg.norm(A, axis=0, keepdims=True)
        if np.linalg.cond(A) < MAX_CONDITION:
            return A
    raise InvalidArgument(f"no well-conditioned transform found for strength {strength}")


def generate_dataset(spec):
    """Identity clusters observed through two modalities.

    Visible samples are ``z_c + noise``; thermal samples are
    ``A z_c + b + noise``. The last ``num_test_identities`` identities form
    the test split.
    """
    rng = np.random.default_rng(spec.seed)
    n, d, m = spec.num_identities, spec.dim, spec.samples_per_identity_per_modality
    centers = rng.normal(size=(n, d))
    if spec.modality_transform_strength == 0:
        A = np.eye(d)
    else:
        A = modality_transform(d, spec.modality_transform_strength, spec.modality_transform_seed)
    direction = np.random.default_rng([spec.modality_transform_seed, 7919]).normal(size=d)
    offset = spec.modality_offset_scale * direction / np.linalg.norm(direction)
    noise_scale = np.full(n, spec.intra_identity_noise)
    n_noisy = int(round(spec.noisy_identity_fraction * n))
    if n_noisy:
        noisy = rng.permutation(n)[:n_noisy]
        noise_scale[noisy] *= spec.noisy_scale

    feats, ids, mods = [], [], []
    for c in range(n):
        vis = centers[c] + noise_scale[c] * rng.normal(size=(m, d))
        th = centers[c] @ A.T + offset + noise_scale[c] * rng.normal(size=(m, d))
        feats += [vis, th]
        ids += [np.full(m, c), np.full(m, c)]
        mods += [np.full(m, VISIBLE), np.full(m, THERMAL)]
    feats = np.concatenate(feats)
    ids = np.concatenate(ids)
    mods = np.concatenate(mods)
    is_test = ids >= n - spec.num_test_identities
    train = LabeledBatch(feats[~is_test], ids[~is_test], mods[~is_test])
    test = LabeledBatch(feats[is_test], ids[is_test], mods[is_test])
    return Dataset(train, test, A, offset)


def sample_batch(data, spec, rng):
    """Draw ``C`` identities, then ``n_v`` visible and ``n_t`` thermal samples of each.

    Everything is drawn without replacement. Returns the row indices into
    ``data`` and the sampled :class:`LabeledBatch`.
    """
    ids = np.unique(data.identity)
    if ids.size < spec.C:
        raise InvalidArgument(f"only {ids.size} identities available, batch needs {spec.C}")
    chosen = rng.choice(ids, size=spec.C, replace=False)
    rows = []
    for c in chosen:
        for tag, count in ((VISIBLE, spec.n_v), (THERMAL, spec.n_t)):
            pool = np.nonzero((data.identity == c) & (data.modality == tag))[0]
            if pool.size < count:
                raise InvalidArgument(
                    f"identity {c} has {pool.size} {TAG_OF[tag]} samples, batch needs {count}")
            rows.append(rng.choice(pool, size=count, replace=False))
    rows = np.concatenate(rows)
    return rows, LabeledBatch(data.features[rows], data.identity[rows], data.modality[rows])


def format_feature_csv(batch):
    buf = io.StringIO()
    buf.write(f"dim={batch.features.shape[1]}\n")
    for f, c, m in zip(batch.features, batch.identity, batch.modality):
        buf.write(f"{int(c)},{TAG_OF[int(m)]}," + ",".join(repr(float(x)) for x in f) + "\n")
    return buf.getvalue()


def write_feature_file(path, batch):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_feature_csv(batch))


def parse_feature_csv(text, source="<string>"):
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(f"{source}: empty file", 1)
    header = lines[0].strip()
    if not header.startswith("dim="):
        raise ParseError(f"{source}: expected header 'dim=<D>', got {header!r}", 1)
    try:
        dim = int(header[4:])
    except ValueError:
        raise ParseError(f"{source}: bad dimension in header {header!r}", 1) from None
    if dim < 1:
        raise ParseError(f"{source}: dimension must be >= 1", 1)
    feats, ids, mods = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.rstrip("\r").split(",")
        if len(fields) != dim + 2:
            raise ParseError(f"{source}: expected {dim + 2} fields, found {len(fields)}", lineno)
        try:
            ident = int(fields[0])
        except ValueError:
            raise ParseError(f"{source}: identity {fields[0]!r} is not an integer", lineno) from None
        tag = fields[1].strip()
        if tag not in MODALITY_TAGS:
            raise ParseError(f"{source}: unknown modality tag {tag!r}", lineno)
        try:
            values = [float(x) for x in fields[2:]]
        except ValueError as exc:
            raise ParseError(f"{source}: {exc}", lineno) from None
        if not all(np.isfinite(values)):
            raise ParseError(f"{source}: non-finite feature value", lineno)
        feats.append(values)
        ids.append(ident)
        mods.append(MODALITY_TAGS[tag])
    if not feats:
        raise ParseError(f"{source}: no data rows", len(lines))
    return LabeledBatch(np.array(feats, dtype=np.float64), np.array(ids), np.array(mods))


def load_feature_file(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_feature_csv(fh.read(), str(path))
