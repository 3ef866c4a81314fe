import numpy as np
import pytest

from promptfed import checkpoint
from promptfed.encoder import BackboneWeights
from promptfed.gradcheck import small_config


def test_round_trip_bit_exact(tmp_path, rng):
    t = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "c": np.array(np.pi)}
    checkpoint.save(tmp_path / "ck", t, config={"x": 1}, seed=7)
    back, man = checkpoint.load(tmp_path / "ck")
    assert man["seed"] == 7 and man["config"] == {"x": 1}
    for k in t:
        assert back[k].tobytes() == np.asarray(t[k], dtype=np.float64).tobytes()


def test_f4_export(tmp_path, rng):
    a = rng.normal(size=4)
    checkpoint.save(tmp_path / "ck", {"a": a}, dtype="<f4")
    back, _ = checkpoint.load(tmp_path / "ck")
    np.testing.assert_array_equal(back["a"], a.astype("<f4").astype(np.float64))
    with pytest.raises(ValueError):
        checkpoint.save(tmp_path / "x", {"a": a}, dtype="<f2")


def test_corruption_detected(tmp_path):
    checkpoint.save(tmp_path / "ck", {"a": np.ones(3)})
    blob = tmp_path / "ck" / checkpoint.BLOB
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 1
    blob.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        checkpoint.load(tmp_path / "ck")


def test_backbone_round_trip(tmp_path):
    bb = BackboneWeights.init(small_config(), 4)
    checkpoint.save_backbone(tmp_path / "bb", bb, seed=4)
    back, _ = checkpoint.load_backbone(tmp_path / "bb")
    assert back.digest() == bb.digest() and back.config == bb.config
