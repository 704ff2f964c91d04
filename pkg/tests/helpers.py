"""Shared test oracles: finite differences and kink-avoiding random draws."""
from __future__ import annotations

import dataclasses

import numpy as np

from bilat import nn

FD_H = 1e-3
FD_RTOL = 1e-4


def mean_loss(model, x, label, kind=nn.LossKind.CROSS_ENTROPY_SOFT):
    return float(nn.loss(model, x, label, kind).mean())


def fd_input_gradient(model, x, label, kind=nn.LossKind.CROSS_ENTROPY_SOFT, h=FD_H):
    """Central-difference gradient of the mean loss w.r.t. every input entry."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = g.reshape(-1)
    xw = x.astype(np.float64).copy()
    xf = xw.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        lp = mean_loss(model, xw, label, kind)
        xf[i] = orig - h
        lm = mean_loss(model, xw, label, kind)
        xf[i] = orig
        flat[i] = (lp - lm) / (2 * h)
    return g


def _model_with_param(model, layer_idx, name, value):
    layer = dataclasses.replace(model.layers[layer_idx], **{name: value})
    layers = model.layers[:layer_idx] + (layer,) + model.layers[layer_idx + 1:]
    return nn.Model(layers, model.input_shape, model.n_classes)


def fd_param_gradient_samples(model, x, label, rng, kind=nn.LossKind.CROSS_ENTROPY_SOFT,
                              h=FD_H, per_array=4):
    """Yield (layer_idx, name, flat_idx, fd_value) for sampled parameter coords."""
    for li, layer in enumerate(model.layers):
        for name, p in nn.layer_params(layer).items():
            k = min(per_array, p.size)
            for flat_idx in rng.choice(p.size, size=k, replace=False):
                pp = p.copy().reshape(-1)
                orig = pp[flat_idx]
                pp[flat_idx] = orig + h
                lp = mean_loss(_model_with_param(model, li, name, pp.reshape(p.shape)), x, label, kind)
                pp[flat_idx] = orig - h
                lm = mean_loss(_model_with_param(model, li, name, pp.reshape(p.shape)), x, label, kind)
                yield li, name, int(flat_idx), (lp - lm) / (2 * h)


def relu_kink_margin(model, x):
    """Smallest |preactivation| feeding any relu (inf when the net has none)."""
    a = np.asarray(x, dtype=np.float64)
    margin = np.inf
    for layer in model.layers:
        if isinstance(layer, nn.Relu):
            margin = min(margin, float(np.abs(a).min()))
            a = np.maximum(a, 0.0)
        elif isinstance(layer, nn.Affine):
            a = a.reshape(a.shape[0], -1) @ layer.weight.T + layer.bias
        elif isinstance(layer, nn.Flatten):
            a = a.reshape(a.shape[0], -1)
        else:
            a = nn._conv_forward(layer, a)[0]
    return margin


def cw_tie_margin(model, x, labels):
    """Gap between the two largest non-target logits (margin loss is kinked there)."""
    logits = nn.forward_logits(model, x)
    rows = np.arange(logits.shape[0])
    masked = logits.copy()
    masked[rows, labels] = -np.inf
    part = np.sort(masked, axis=1)
    return float((part[:, -1] - part[:, -2]).min())


def kink_safe_batch(model, rng, batch, *, labels_of=None, kind=nn.LossKind.CROSS_ENTROPY_SOFT,
                    margin=10 * FD_H, tries=500):
    """Draw (x, y) whose finite-difference stencil stays on one side of every kink.

    Central differences step h in each coordinate; requiring all relu
    preactivations (and, for the margin loss, the runner-up logit gap) to sit
    well clear of zero keeps the quadratic-error model of the stencil valid.
    Rejection only works when the net has few relu units, so FD tests use the
    small geometries from small_fd_arch.
    """
    for _ in range(tries):
        x = rng.uniform(-1.0, 1.0, (batch,) + model.input_shape)
        y = rng.integers(0, model.n_classes, batch) if labels_of is None else labels_of(x)
        if relu_kink_margin(model, x) < margin:
            continue
        if kind is nn.LossKind.MARGIN_CW and cw_tie_margin(model, x, y) < margin:
            continue
        return x, y
    raise AssertionError("could not draw a kink-safe batch; widen tries or shrink margin")


def small_fd_arch(rng, conv=None):
    """Random desk-size architecture with few enough relus for kink rejection."""
    n_classes = int(rng.integers(3, 6))
    if conv is None:
        conv = bool(rng.integers(0, 2))
    if conv:
        c = int(rng.integers(1, 3))
        hw = int(rng.integers(4, 7))
        stride = int(rng.integers(1, 3))
        layers = (
            nn.ConvSpec(int(rng.integers(2, 4)), 3, stride, 1), nn.ReluSpec(),
            nn.FlattenSpec(),
            nn.AffineSpec(int(rng.integers(5, 9))), nn.ReluSpec(),
            nn.AffineSpec(n_classes),
        )
        return nn.ArchSpec((c, hw, hw), layers)
    n_in = int(rng.integers(4, 9))
    layers = (
        nn.AffineSpec(int(rng.integers(5, 11))), nn.ReluSpec(),
        nn.AffineSpec(int(rng.integers(5, 11))), nn.ReluSpec(),
        nn.AffineSpec(n_classes),
    )
    return nn.ArchSpec((n_in,), layers)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
