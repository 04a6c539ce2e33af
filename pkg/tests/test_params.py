import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grmp.params import (CheckpointError, GradientVector, Layout, ParameterStore,
                         load_checkpoint, save_checkpoint, value_and_grad)


def small_store():
    rng = np.random.default_rng(0)
    return ParameterStore({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4),
                           "c": np.array(1.5)}, trainable=["a", "c"])


def test_store_is_immutable_and_replace_returns_new():
    s = small_store()
    with pytest.raises(ValueError):
        s["a"][0, 0] = 1.0
    s2 = s.replace({"a": np.zeros((2, 3))})
    assert s["a"][0, 0] != 0.0 and s2["a"][0, 0] == 0.0
    assert s2.trainable == ("a", "c")
    with pytest.raises(ValueError):
        s.replace({"a": np.zeros(3)})
    with pytest.raises(KeyError):
        s.replace({"zzz": np.zeros(3)})


def test_trainable_order_follows_store_order():
    s = small_store().with_trainable(["c", "a"])
    assert s.trainable == ("a", "c")
    with pytest.raises(KeyError):
        s.with_trainable(["nope"])


@settings(max_examples=25, deadline=None)
@given(shapes=st.lists(st.lists(st.integers(1, 4), min_size=0, max_size=3), min_size=1, max_size=5),
       seed=st.integers(0, 1000))
def test_flatten_unflatten_roundtrip_bit_exact(shapes, seed):
    rng = np.random.default_rng(seed)
    arrays = {f"t{i}": rng.normal(size=tuple(s)) for i, s in enumerate(shapes)}
    layout = Layout.from_shapes((k, v.shape) for k, v in arrays.items())
    flat = layout.flatten(arrays)
    back = layout.unflatten(flat)
    for k, v in arrays.items():
        assert back[k].tobytes() == v.tobytes() and back[k].shape == v.shape
    assert layout.flatten(back).tobytes() == flat.tobytes()


def test_gradient_vector_dot_and_layout_check():
    s = small_store()
    lay = s.layout()
    assert lay.size == 7
    g1 = GradientVector.from_grads({"a": np.ones((2, 3)), "c": np.array(2.0)}, lay)
    g2 = GradientVector.from_grads({"a": np.full((2, 3), 2.0)}, lay)
    assert g1.dot(g2) == 12.0
    assert g1.norm() == pytest.approx(np.sqrt(10))
    other = GradientVector(np.zeros(7), Layout.from_shapes([("x", (7,))]))
    with pytest.raises(ValueError):
        g1.dot(other)


def test_value_and_grad_zero_for_unreached():
    s = small_store()
    loss, g = value_and_grad(lambda p: (p["a"] * p["a"]).sum(), s)
    assert loss == pytest.approx(float((s["a"] ** 2).sum()))
    np.testing.assert_allclose(g["a"], 2 * s["a"])
    assert set(g) == {"a", "c"} and g["c"] == 0.0


def test_checkpoint_roundtrip(tmp_path):
    s = small_store()
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, s)
    back = load_checkpoint(path)
    assert list(back) == sorted(s)
    for k in s:
        assert back[k].tobytes() == s[k].tobytes() and back[k].shape == s[k].shape
    save_checkpoint(tmp_path / "y.ckpt", ParameterStore(back))
    assert (tmp_path / "y.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_layout_is_documented_format(tmp_path):
    path = tmp_path / "one.ckpt"
    save_checkpoint(path, {"w": np.array([[1.0, 2.0]])})
    raw = path.read_bytes()
    expected = (b"GRMP" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"w"
                + struct.pack("<I", 2) + struct.pack("<2I", 1, 2) + struct.pack("<2d", 1.0, 2.0))
    assert raw == expected


def test_checkpoint_errors(tmp_path):
    s = small_store()
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, s)
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "ver.ckpt").write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.ckpt")


def test_checksum_changes_with_values():
    s = small_store()
    assert s.checksum() == small_store().checksum()
    assert s.replace({"b": np.zeros(4)}).checksum() != s.checksum()
    assert s.replace({"b": np.zeros(4)}).checksum(["a"]) == s.checksum(["a"])
