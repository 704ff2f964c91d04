"""Checkpoint round-trip and atomic-write tests."""
import json
import os

import numpy as np
import pytest

from bilat import nn
from bilat.persist import (CHECKPOINT_FORMAT, atomic_write_text,
                           load_checkpoint, save_checkpoint)


def build_mixed_model(seed=0):
    arch = nn.ArchSpec((2, 6, 6), (
        nn.ConvSpec(3, 3, stride=1, padding=1),
        nn.ReluSpec(),
        nn.FlattenSpec(),
        nn.AffineSpec(5),
        nn.ReluSpec(),
        nn.AffineSpec(4),
    ))
    return nn.build_model(arch, seed)


def test_round_trip_is_bit_exact(tmp_path):
    model = build_mixed_model(seed=3)
    path = tmp_path / "model.json"
    save_checkpoint(str(path), model, extra={"note": "round trip", "epochs": 2})
    loaded, extra = load_checkpoint(str(path))
    assert extra == {"note": "round trip", "epochs": 2}
    assert loaded.input_shape == model.input_shape
    assert loaded.n_classes == model.n_classes
    assert len(loaded.layers) == len(model.layers)
    for orig, back in zip(model.layers, loaded.layers):
        assert type(orig) is type(back)
    for da, db in zip(nn.layer_params(model), nn.layer_params(loaded)):
        for k in da:
            assert np.array_equal(da[k], db[k]), k
    conv_orig = model.layers[0]
    conv_back = loaded.layers[0]
    assert (conv_back.stride, conv_back.padding) == (conv_orig.stride, conv_orig.padding)


def test_loaded_model_predicts_identically(tmp_path):
    model = build_mixed_model(seed=5)
    path = tmp_path / "model.json"
    save_checkpoint(str(path), model)
    loaded, extra = load_checkpoint(str(path))
    assert extra == {}
    x = np.random.default_rng(1).uniform(-1, 1, (7, 2, 6, 6))
    assert np.array_equal(nn.forward_logits(model, x), nn.forward_logits(loaded, x))


def test_rejects_other_formats(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"format": "bat-checkpoint/999", "layers": []}))
    with pytest.raises(ValueError, match="not a bat-checkpoint/1"):
        load_checkpoint(str(path))
    path.write_text(json.dumps({"layers": []}))
    with pytest.raises(ValueError, match="format=None"):
        load_checkpoint(str(path))


def test_rejects_unknown_layer_kind(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({
        "format": CHECKPOINT_FORMAT, "input_shape": [3], "n_classes": 2,
        "layers": [{"kind": "attention"}], "extra": {},
    }))
    with pytest.raises(ValueError, match="unknown layer kind 'attention'"):
        load_checkpoint(str(path))


def test_missing_file_raises():
    with pytest.raises(FileNotFoundError):
        load_checkpoint("/nonexistent/checkpoint.json")


def test_atomic_write_replaces_and_leaves_no_droppings(tmp_path):
    path = tmp_path / "out.txt"
    path.write_text("old")
    atomic_write_text(str(path), "new contents")
    assert path.read_text() == "new contents"
    assert os.listdir(tmp_path) == ["out.txt"]


def test_atomic_write_cleans_up_on_failure(tmp_path):
    class Boom(str):
        def __str__(self):
            raise RuntimeError("boom")

    path = tmp_path / "out.txt"
    # a write that fails mid-flight must not leave temp files behind
    with pytest.raises(TypeError):
        atomic_write_text(str(path), 12345)  # not a str
    assert not path.exists()
    assert os.listdir(tmp_path) == []


def test_identical_models_produce_identical_files(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_checkpoint(str(a), build_mixed_model(seed=9), extra={"seed": 9})
    save_checkpoint(str(b), build_mixed_model(seed=9), extra={"seed": 9})
    assert a.read_bytes() == b.read_bytes()
