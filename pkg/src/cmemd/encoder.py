"""Two-stream toy encoder with hand-written backward pass.

Layout::

    input --(modality-specific affine)--> relu --(shared affine)--> relu
          --(global-stream affine)--> H x W x C global map
          --(local-stream affine)---> H x W x C local map

Each sample goes through the shallow layer of its own modality; everything
after that is shared by both modalities.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, NumericalError

LAYERS = ("shallow_visible", "shallow_thermal", "shared_trunk", "global_stream", "local_stream")


@dataclass
class EncoderConfig:
    input_dim: int = 16
    shallow_width: int = 32
    trunk_width: int = 64
    height: int = 6
    width: int = 1
    channels: int = 16

    @property
    def map_size(self):
        return self.height * self.width * self.channels

    def layer_shapes(self):
        return {
            "shallow_visible": (self.input_dim, self.shallow_width),
            "shallow_thermal": (self.input_dim, self.shallow_width),
            "shared_trunk": (self.shallow_width, self.trunk_width),
            "global_stream": (self.trunk_width, self.map_size),
            "local_stream": (self.trunk_width, self.map_size),
        }


class EncoderParams:
    """Weights and biases of every layer, each paired with a gradient buffer."""

    def __init__(self, cfg, tensors=None):
        self.cfg = cfg
        self.tensors = {}
        for layer, (fan_in, fan_out) in cfg.layer_shapes().items():
            self.tensors[f"{layer}.weight"] = np.zeros((fan_in, fan_out))
            self.tensors[f"{layer}.bias"] = np.zeros(fan_out)
        if tensors is not None:
            for name, value in tensors.items():
                if name not in self.tensors:
                    raise InvalidArgument(f"unknown encoder tensor {name!r}")
                if self.tensors[name].shape != value.shape:
                    raise InvalidArgument(
                        f"{name}: expected shape {self.tensors[name].shape}, got {value.shape}")
                self.tensors[name] = np.array(value, dtype=np.float64)
        self.grads = {k: np.zeros_like(v) for k, v in self.tensors.items()}

    @classmethod
    def initialize(cls, cfg, rng):
        """Glorot-uniform weights, zero biases."""
        params = cls(cfg)
        for layer, (fan_in, fan_out) in cfg.layer_shapes().items():
            s = np.sqrt(6.0 / (fan_in + fan_out))
            params.tensors[f"{layer}.weight"] = rng.uniform(-s, s, size=(fan_in, fan_out))
        return params

    def W(self, layer):
        return self.tensors[f"{layer}.weight"]

    def b(self, layer):
        return self.tensors[f"{layer}.bias"]

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def named_parameters(self):
        for name, value in self.tensors.items():
            yield f"encoder.{name}", value, self.grads[name]


def forward(params, inputs, modality):
    """Run the encoder; returns ``(global_map, local_map, tape)``.

    Maps have shape ``N x H x W x C``. ``modality`` holds 0 (visible) or
    1 (thermal) per row.
    """
    cfg = params.cfg
    x = np.asarray(inputs, dtype=np.float64)
    modality = np.asarray(modality, dtype=int)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise InvalidArgument(f"expected inputs of width {cfg.input_dim}, got shape {x.shape}")
    if modality.shape != (x.shape[0],):
        raise InvalidArgument("one modality tag per input row required")
    if np.any((modality != 0) & (modality != 1)):
        raise InvalidArgument("modality tags must be 0 (visible) or 1 (thermal)")
    vis = modality == 0
    h1 = np.empty((x.shape[0], cfg.shallow_width))
    h1[vis] = x[vis] @ params.W("shallow_visible") + params.b("shallow_visible")
    h1[~vis] = x[~vis] @ params.W("shallow_thermal") + params.b("shallow_thermal")
    a1 = np.maximum(h1, 0.0)
    h2 = a1 @ params.W("shared_trunk") + params.b("shared_trunk")
    a2 = np.maximum(h2, 0.0)
    g = a2 @ params.W("global_stream") + params.b("global_stream")
    loc = a2 @ params.W("local_stream") + params.b("local_stream")
    shape = (x.shape[0], cfg.height, cfg.width, cfg.channels)
    tape = {"x": x, "vis": vis, "h1": h1, "a1": a1, "h2": h2, "a2": a2}
    return g.reshape(shape), loc.reshape(shape), tape


def backward(params, tape, grad_global, grad_local):
    """Accumulate parameter gradients given gradients on the two maps."""
    cfg = params.cfg
    n = tape["x"].shape[0]
    expected = (n, cfg.height, cfg.width, cfg.channels)
    if np.shape(grad_global) != expected or np.shape(grad_local) != expected:
        raise InvalidArgument(f"map gradients must have shape {expected}")
    gg = np.asarray(grad_global).reshape(n, -1)
    gl = np.asarray(grad_local).reshape(n, -1)
    a2, a1, x, vis = tape["a2"], tape["a1"], tape["x"], tape["vis"]
    grads = params.grads
    grads["global_stream.weight"] += a2.T @ gg
    grads["global_stream.bias"] += gg.sum(axis=0)
    grads["local_stream.weight"] += a2.T @ gl
    grads["local_stream.bias"] += gl.sum(axis=0)
    g_a2 = gg @ params.W("global_stream").T + gl @ params.W("local_stream").T
    g_h2 = g_a2 * (tape["h2"] > 0)
    grads["shared_trunk.weight"] += a1.T @ g_h2
    grads["shared_trunk.bias"] += g_h2.sum(axis=0)
    g_h1 = (g_h2 @ params.W("shared_trunk").T) * (tape["h1"] > 0)
    grads["shallow_visible.weight"] += x[vis].T @ g_h1[vis]
    grads["shallow_visible.bias"] += g_h1[vis].sum(axis=0)
    grads["shallow_thermal.weight"] += x[~vis].T @ g_h1[~vis]
    grads["shallow_thermal.bias"] += g_h1[~vis].sum(axis=0)
    return g_h1


def step_decay_lr(epoch, base_lr=0.01, total_epochs=80, decay_every=30, factor=0.1,
                  reference_epochs=80):
    """Learning rate after ``epoch`` epochs of step decay.

    ``decay_every`` is given for a ``reference_epochs``-long schedule and is
    rescaled proportionally to ``total_epochs``.
    """
    every = max(1, int(round(decay_every * total_epochs / reference_epochs)))
    return base_lr * factor ** (epoch // every)


def sgd_step(parameters, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """In-place ``p -= lr * g`` over ``(name, value, grad)`` triples; zeroes the grads.

    All gradients are checked before any parameter moves, so a non-finite
    gradient leaves the model untouched.
    """
    parameters = list(parameters)
    bad = [name for name, _, g in parameters if not np.all(np.isfinite(g))]
    if bad:
        raise NumericalError(f"non-finite gradient in {bad[0]}", {"tensors": bad})
    for name, value, grad in parameters:
        step = grad + weight_decay * value if weight_decay else grad
        if momentum:
            buf = velocity.setdefault(name, np.zeros_like(value))
            buf *= momentum
            buf += step
            step = buf
        value -= lr * step
        grad[...] = 0.0
