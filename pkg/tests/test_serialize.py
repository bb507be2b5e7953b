import struct

import numpy as np
import pytest

from nncompress.errors import DataError, FormatError, TruncatedFileError
from nncompress.distill import SoftTargets, soften
from nncompress.harness.metrics import count_params
from nncompress.harness.serialize import (
    file_param_stats, load_model, load_soft_targets, model_from_bytes, model_to_bytes,
    save_model, save_soft_targets,
)
from nncompress.nn import Dense, Flatten, Model, build_model, evaluate, forward, predict
from nncompress.pruning import prune_model

HEADER = 4 + 4 * 6  # magic, version, C, H, W, classes, layer count


def _bn_model(rng):
    spec = [{"type": "conv", "out": 3}, {"type": "batchnorm"}, {"type": "relu"}, {"type": "pool"},
            {"type": "flatten"}, {"type": "dense", "out": "classes"}]
    model = build_model(spec, (1, 6, 6), 4, rng)
    model.layers[1].buffers["running_mean"] = rng.normal(3)
    model.layers[1].buffers["running_var"] = rng.uniform(3, 0.5, 2)
    return model


class TestSlim:
    def test_round_trip(self, rng, tmp_path):
        model = _bn_model(rng)
        save_model(model, tmp_path / "m.slim")
        loaded = load_model(tmp_path / "m.slim").model
        for (k, a), (k2, b) in zip(model.named_params(), loaded.named_params()):
            assert k == k2
            np.testing.assert_allclose(b, a, rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(loaded.layers[1].buffers["running_var"],
                                   model.layers[1].buffers["running_var"], rtol=1e-6)
        x = rng.normal((3, 1, 6, 6))
        np.testing.assert_allclose(forward(loaded, x), forward(model, x), atol=1e-5)

    def test_f32_model_is_fixed_point(self, rng, tmp_path):
        model = load_model_bytes(model_to_bytes(_bn_model(rng)))
        assert model_to_bytes(model) == model_to_bytes(load_model_bytes(model_to_bytes(model)))

    def test_header_only(self):
        raw = model_to_bytes(Model([], (2, 3, 3), 18))
        assert len(raw) == HEADER
        assert raw[:4] == b"SLIM"
        assert struct.unpack("<6I", raw[4:]) == (1, 2, 3, 3, 18, 0)

    def test_masked_payload_size(self, rng):
        model = Model([Flatten(), Dense(rng.normal((8, 4)))], (1, 2, 4), 4)
        mask = prune_model(model, 0.75)
        raw = model_to_bytes(model, mask)
        dense_record = 3 + 2 * 4 + 32 // 8 + 8 * 4
        assert len(raw) == HEADER + 2 + 2 + dense_record
        unmasked = model_to_bytes(model)
        assert len(unmasked) - len(raw) == 32 * 4 - (4 + 8 * 4)
        loaded = model_from_bytes(raw)
        np.testing.assert_array_equal(loaded.mask["1.weight"], mask["1.weight"])
        assert np.count_nonzero(loaded.model.get("1.weight")) == 8

    def test_evaluate_preserved(self, blobs, tiny_cnn, tmp_path):
        from nncompress.nn import TrainConfig, train
        model = train(tiny_cnn, blobs[0], TrainConfig(0.05, 16, 100)).model
        mask = prune_model(model, 0.5)
        save_model(model, tmp_path / "p.slim", mask)
        loaded = load_model(tmp_path / "p.slim").model
        assert evaluate(loaded, blobs[1]) == evaluate(model, blobs[1])
        np.testing.assert_array_equal(predict(loaded, blobs[1].images).argmax(1),
                                      predict(model, blobs[1].images).argmax(1))

    def test_file_param_stats(self, rng, tmp_path):
        model = _bn_model(rng)
        mask = prune_model(model, 0.75)
        save_model(model, tmp_path / "s.slim", mask)
        stats = file_param_stats(tmp_path / "s.slim")
        counts = count_params(model)
        assert stats["weights"] == counts.total
        assert stats["nonzero_weights"] == counts.nonzero
        assert stats["params"] == counts.total + counts.aux

    def test_bad_magic_and_version(self, rng):
        raw = bytearray(model_to_bytes(_bn_model(rng)))
        with pytest.raises(FormatError):
            model_from_bytes(b"XLIM" + bytes(raw[4:]))
        raw[4] = 2
        with pytest.raises(FormatError, match="version"):
            model_from_bytes(bytes(raw))

    def test_truncated_and_trailing(self, rng):
        raw = model_to_bytes(_bn_model(rng))
        with pytest.raises(TruncatedFileError):
            model_from_bytes(raw[:-3])
        with pytest.raises(FormatError):
            model_from_bytes(raw + b"\0")

    def test_unknown_layer_tag(self):
        header = b"SLIM" + struct.pack("<6I", 1, 1, 2, 2, 4, 1)
        with pytest.raises(FormatError):
            model_from_bytes(header + bytes([99, 0]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_model(tmp_path / "none.slim")


def load_model_bytes(raw):
    return model_from_bytes(raw).model


class TestSlmt:
    def test_round_trip(self, rng, tmp_path):
        probs = soften(rng.normal((7, 5)) * 3, 4.0)
        n = save_soft_targets(SoftTargets(probs, 4.0), tmp_path / "t.slmt")
        assert n == 4 + 4 + 8 + 4 + 8 + 7 * 5 * 4
        back = load_soft_targets(tmp_path / "t.slmt")
        assert back.temperature == 4.0
        np.testing.assert_allclose(back.probs, probs, atol=1e-7)
        np.testing.assert_allclose(back.probs.sum(axis=1), 1.0, atol=1e-12)

    def test_corrupt(self, rng, tmp_path):
        path = tmp_path / "t.slmt"
        save_soft_targets(SoftTargets(np.full((2, 2), 0.5), 2.0), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-1])
        with pytest.raises(TruncatedFileError):
            load_soft_targets(path)
        path.write_bytes(b"SLIM" + raw[4:])
        with pytest.raises(FormatError):
            load_soft_targets(path)
