"""Small dense numerics shared by the losses, the feature builder and the evaluator."""
from __future__ import annotations

import numpy as np

from .errors import InvalidArgument

GEM_P = 3.0
GEM_CLAMP_MIN = 1e-6
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _as_matrix(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgument(f"{name} must be a 2-D matrix, got shape {x.shape}")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise InvalidArgument(f"{name} must be non-empty, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgument(f"{name} contains non-finite entries")
    return x


def pairwise_euclidean(a, b):
    """Euclidean distance between every row of ``a`` and every row of ``b``.

    Differences are formed explicitly rather than through the
    ``|a|^2 + |b|^2 - 2ab`` expansion, so coincident rows give exactly zero.
    """
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise InvalidArgument(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    diff = a[:, None, :] - b[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return np.sqrt(np.maximum(sq, 0.0))


def squared_euclidean(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def gem_pool(region, p=GEM_P, clamp_min=GEM_CLAMP_MIN):
    """Generalized-mean pooling over the spatial cells of an ``H x W x C`` region.

    A leading batch axis is accepted (``N x H x W x C``); the result then has
    shape ``N x C``.
    """
    x = np.asarray(region, dtype=np.float64)
    if x.ndim not in (3, 4):
        raise InvalidArgument(f"expected an H x W x C region, got shape {x.shape}")
    if x.shape[-3] == 0 or x.shape[-2] == 0:
        raise InvalidArgument("cannot pool an empty region")
    if p < 1:
        raise InvalidArgument(f"GeM exponent must be >= 1, got {p}")
    xc = np.maximum(x, clamp_min)
    return np.mean(xc ** p, axis=(-3, -2)) ** (1.0 / p)


def gem_pool_backward(region, pooled, grad_out, p=GEM_P, clamp_min=GEM_CLAMP_MIN):
    """Gradient of :func:`gem_pool` with respect to the (unclamped) region."""
    x = np.asarray(region, dtype=np.float64)
    ncells = x.shape[-3] * x.shape[-2]
    xc = np.maximum(x, clamp_min)
    # d/dx_i (mean x^p)^(1/p) = x_i^(p-1) * y^(1-p) / n
    scale = (grad_out * pooled ** (1.0 - p) / ncells)[..., None, None, :]
    g = scale * xc ** (p - 1.0)
    return np.where(x > clamp_min, g, 0.0)


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax_backward(weights, grad_out):
    """Vector-Jacobian product of softmax given its output ``weights``."""
    return weights * (grad_out - np.dot(grad_out, weights))


class BNNeck:
    """Per-dimension standardization with a learned scale and no shift term.

    Training mode normalizes with batch statistics and folds them into the
    running state; eval mode uses the running state only.
    """

    def __init__(self, dim, eps=BN_EPS, momentum=BN_MOMENTUM):
        self.dim = dim
        self.eps = eps
        self.momentum = momentum
        self.scale = np.ones(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.grad_scale = np.zeros(dim)

    def forward(self, x, training=True, update_state=True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise InvalidArgument("BNNeck needs a non-empty N x D batch")
        if x.shape[1] != self.dim:
            raise InvalidArgument(f"expected dimension {self.dim}, got {x.shape[1]}")
        if not training:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            return (x - self.running_mean) * inv_std * self.scale, None
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        if update_state:
            n = x.shape[0]
            unbiased = var * n / (n - 1) if n > 1 else var
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        return xhat * self.scale, (xhat, inv_std)

    def backward(self, cache, grad_out):
        """Accumulate the scale gradient and return the gradient on the input."""
        xhat, inv_std = cache
        n = xhat.shape[0]
        self.grad_scale += np.sum(grad_out * xhat, axis=0)
        gx = grad_out * self.scale
        return inv_std / n * (n * gx - gx.sum(axis=0) - xhat * np.sum(gx * xhat, axis=0))


def standardize_bnneck(batch, neck, training=True):
    out, _ = neck.forward(batch, training=training)
    return out
