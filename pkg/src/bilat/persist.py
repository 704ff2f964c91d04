"""Checkpoint persistence: versioned JSON, written atomically.

Parameters are stored as nested JSON lists; Python's shortest-repr float
serialization makes the round trip bit-exact for float64. Wall-clock and other
run-dependent values are deliberately excluded so identical runs produce
identical files.
"""
from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from . import nn

__all__ = ["CHECKPOINT_FORMAT", "save_checkpoint", "load_checkpoint", "atomic_write_text"]

CHECKPOINT_FORMAT = "bat-checkpoint/1"


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file in the same directory, then rename over the target."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode_layer(layer: nn.Layer) -> dict:
    if isinstance(layer, nn.Affine):
        return {"kind": "affine", "weight": layer.weight.tolist(), "bias": layer.bias.tolist()}
    if isinstance(layer, nn.Conv):
        return {"kind": "conv", "kernel": layer.kernel.tolist(), "bias": layer.bias.tolist(),
                "stride": layer.stride, "padding": layer.padding}
    if isinstance(layer, nn.Relu):
        return {"kind": "relu"}
    return {"kind": "flatten"}


def _decode_layer(doc: dict) -> nn.Layer:
    kind = doc.get("kind")
    if kind == "affine":
        return nn.Affine(np.asarray(doc["weight"], dtype=np.float64),
                         np.asarray(doc["bias"], dtype=np.float64))
    if kind == "conv":
        return nn.Conv(np.asarray(doc["kernel"], dtype=np.float64),
                       np.asarray(doc["bias"], dtype=np.float64),
                       int(doc["stride"]), int(doc["padding"]))
    if kind == "relu":
        return nn.Relu()
    if kind == "flatten":
        return nn.Flatten()
    raise ValueError(f"unknown layer kind {kind!r} in checkpoint")


def save_checkpoint(path: str, model: nn.Model, extra: dict | None = None) -> None:
    """Serialize the model (and optional run metadata) to a versioned JSON file."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "input_shape": list(model.input_shape),
        "n_classes": model.n_classes,
        "layers": [_encode_layer(l) for l in model.layers],
        "extra": extra or {},
    }
    atomic_write_text(path, json.dumps(doc))


def load_checkpoint(path: str) -> tuple[nn.Model, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file "
                         f"(format={doc.get('format')!r})")
    layers = tuple(_decode_layer(d) for d in doc["layers"])
    model = nn.Model(layers, tuple(doc["input_shape"]), int(doc["n_classes"]))
    return model, doc.get("extra", {})
