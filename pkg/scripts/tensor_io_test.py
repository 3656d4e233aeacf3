"""
Tests for tensor and model files.
"""
import struct

import numpy as np
import pytest

from src.lra_ntd.lra import TuckerModel, load_model, save_model
from src.lra_ntd.tensor_core import ShapeError
from src.lra_ntd.tensor_io import load_tensor, save_tensor


def test_binary_tensor_layout(tmp_path):
    t = np.arange(6, dtype=float).reshape((2, 3), order="F")
    path = tmp_path / "t.lntd"
    save_tensor(path, t)
    raw = path.read_bytes()
    assert raw[:4] == b"LNTD"
    assert struct.unpack("<II", raw[4:12]) == (1, 2)
    assert struct.unpack("<QQ", raw[12:28]) == (2, 3)
    # first index varies fastest
    np.testing.assert_array_equal(np.frombuffer(raw[28:], dtype="<f8"), np.arange(6.0))
    np.testing.assert_array_equal(load_tensor(path), t)


def test_text_tensor_is_exact_and_ignores_comments(tmp_path):
    rng = np.random.default_rng(0)
    t = rng.standard_normal((3, 2, 2))
    path = tmp_path / "t.txt"
    save_tensor(path, t)
    np.testing.assert_array_equal(load_tensor(path), t)

    fixture = tmp_path / "fixture.txt"
    fixture.write_text("# a 2x2 fixture\n2 2\n1\n2\n3\n4\n")
    np.testing.assert_array_equal(load_tensor(fixture), [[1.0, 3.0], [2.0, 4.0]])


def test_text_tensor_with_wrong_count_is_rejected(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("2 2\n1\n2\n3\n")
    with pytest.raises(ShapeError):
        load_tensor(path)


def test_corrupt_binary_files_are_rejected(tmp_path):
    path = tmp_path / "t.lntd"
    save_tensor(path, np.ones((2, 2)))
    raw = path.read_bytes()

    (tmp_path / "magic.lntd").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "magic.lntd")

    (tmp_path / "short.lntd").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "short.lntd")

    (tmp_path / "long.lntd").write_bytes(raw + b"\x00")
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "long.lntd")


def test_model_file_keeps_identity_flags(tmp_path):
    rng = np.random.default_rng(1)
    model = TuckerModel(rng.random((2, 3, 4)), [rng.random((5, 2)), rng.random((6, 3)), np.eye(4)], [False, False, True])
    path = tmp_path / "m.lntm"
    save_model(path, model)
    loaded = load_model(path)
    assert loaded.fixed == [False, False, True]
    np.testing.assert_array_equal(loaded.core, model.core)
    for a, b in zip(loaded.factors, model.factors):
        np.testing.assert_array_equal(a, b)


def test_missing_file_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        load_tensor(tmp_path / "missing.lntd")
