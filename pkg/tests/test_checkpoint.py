"""Checkpoint container round trips and failure modes."""

import numpy as np
import pytest

from dupscope import checkpoint as ck
from dupscope.errors import BadMagic, IoError, ShapeMismatchOnLoad, VersionMismatch
from dupscope.model import ModelConfig, PairModel, load_model, save_model


def cfg():
    return ModelConfig(
        image_size=16, patch_size=8, embed_dim=8, heads=2, ssm_state_dim=4,
        topk=3, encoder_depth=1, dtype="f32",
    )


class TestContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "a": rng.normal(size=(3, 4)).astype(np.float32),
            "b": rng.normal(size=(2, 2, 2)).astype(np.float64),
            "scalar": np.float32(1.5).reshape(()),
        }
        path = tmp_path / "t.btnt"
        ck.save_checkpoint(path, tensors, {"k": 1})
        loaded, config = ck.load_checkpoint(path)
        assert config == {"k": 1}
        for name, arr in tensors.items():
            assert loaded[name].tobytes() == np.ascontiguousarray(arr).tobytes()
            assert loaded[name].dtype == arr.dtype

    def test_save_load_save_identical_bytes(self, tmp_path):
        tensors = {"w": np.random.default_rng(1).normal(size=(5, 5)).astype(np.float32)}
        p1, p2 = tmp_path / "a.btnt", tmp_path / "b.btnt"
        ck.save_checkpoint(p1, tensors, {"x": [1, 2]})
        loaded, config = ck.load_checkpoint(p1)
        ck.save_checkpoint(p2, loaded, config)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.btnt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(BadMagic):
            ck.load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "t.btnt"
        ck.save_checkpoint(path, {"w": np.zeros((4, 4), np.float32)}, {})
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(IoError):
            ck.load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "t.btnt"
        ck.save_checkpoint(path, {}, {})
        data = bytearray(path.read_bytes())
        data[4] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatch):
            ck.load_checkpoint(path)


class TestModelPersistence:
    def test_model_round_trip_bit_exact(self, tmp_path):
        model = PairModel(cfg())
        path = tmp_path / "m.btnt"
        save_model(model, path)
        again, extras = load_model(path)
        state_a = model.state()
        state_b = again.state()
        assert set(state_a) == set(state_b)
        for name in state_a:
            assert state_a[name].tobytes() == state_b[name].tobytes()

    def test_shape_mismatch_on_load(self, tmp_path):
        model = PairModel(cfg())
        state = model.state()
        state["encoder.pos"] = np.zeros((99, 8), np.float32)
        with pytest.raises(ShapeMismatchOnLoad):
            model.load_state(state)

    def test_missing_tensor_detected(self):
        model = PairModel(cfg())
        state = model.state()
        state.pop("encoder.pos")
        with pytest.raises(ShapeMismatchOnLoad):
            model.load_state(state)
