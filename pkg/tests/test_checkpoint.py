import numpy as np
import pytest

from cmemd.checkpoint import load_tensors, save_tensors
from cmemd.errors import ParseError


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a.weight": rng.normal(size=(3, 4)),
        "b": np.array([np.pi, -0.0, 1e-300]),
        "steps": np.array([7], dtype=np.int64),
        "scalar": np.array(2.5),
    }
    path = tmp_path / "m.ckpt"
    save_tensors(path, tensors, {"note": "x"})
    back, meta = load_tensors(path)
    assert meta == {"note": "x"}
    assert set(back) == set(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_saving_twice_gives_identical_bytes(tmp_path):
    t = {"x": np.arange(5.0), "y": np.ones((2, 2))}
    save_tensors(tmp_path / "1", t)
    save_tensors(tmp_path / "2", dict(reversed(list(t.items()))))
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()


def test_corrupt_files(tmp_path):
    path = tmp_path / "m.ckpt"
    save_tensors(path, {"x": np.zeros(3)})
    raw = path.read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "trailing").write_bytes(raw + b"\0")
    for name in ("bad_magic", "trailing"):
        with pytest.raises(ParseError):
            load_tensors(tmp_path / name)


def test_unsupported_dtype(tmp_path):
    with pytest.raises(TypeError):
        save_tensors(tmp_path / "m", {"s": np.array(["a"])})
