import struct

import numpy as np
import pytest

from gazeforge import io


@pytest.mark.parametrize("shape", [(), (5,), (2, 3), (1, 2, 3, 4)])
def test_gzt_roundtrip_bitwise(tmp_path, rng, shape):
    arr = rng.standard_normal(shape)
    io.write_gzt(tmp_path / "a.gzt", arr)
    back = io.read_gzt(tmp_path / "a.gzt")
    assert back.shape == arr.shape
    assert back.tobytes() == np.asarray(arr, dtype="<f8").tobytes()


def test_gzt_layout(tmp_path):
    io.write_gzt(tmp_path / "a.gzt", np.array([[1.0, 2.0, 3.0]]))
    raw = (tmp_path / "a.gzt").read_bytes()
    assert raw[:4] == b"GZT1"
    assert raw[4] == 2
    assert struct.unpack("<2Q", raw[5:21]) == (1, 3)
    assert struct.unpack("<3d", raw[21:]) == (1.0, 2.0, 3.0)


def test_gzt_rejects_corruption(tmp_path):
    path = tmp_path / "a.gzt"
    io.write_gzt(path, np.ones(4))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(io.FormatError):
        io.read_gzt(path)
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(io.FormatError):
        io.read_gzt(path)


def test_container_roundtrip(tmp_path, rng):
    tensors = {"a.weight": rng.standard_normal((2, 3)), "b/bias": rng.standard_normal(3)}
    io.save_container(tmp_path / "c", tensors, meta={"k": 1}, flags={"a.weight": True, "b/bias": False})
    back, manifest = io.load_container(tmp_path / "c")
    assert set(back) == set(tensors)
    for name in tensors:
        assert np.array_equal(back[name], tensors[name])
    assert manifest["meta"] == {"k": 1}
    assert [e["trainable"] for e in manifest["tensors"]] == [True, False]


def test_container_missing_manifest(tmp_path):
    with pytest.raises(io.FormatError):
        io.load_container(tmp_path)


def test_image_roundtrip_is_8bit_exact(tmp_path, rng):
    img = np.round(rng.uniform(0, 1, (3, 4, 5)) * 255) / 255
    io.save_image(tmp_path / "x.ppm", img)
    np.testing.assert_array_equal(io.load_image(tmp_path / "x.ppm"), img)


def test_netpbm_header_with_comment_and_16bit(tmp_path):
    samples = np.array([[0, 1000], [65535, 7]])
    io.write_netpbm(tmp_path / "d.pgm", samples, 65535, comment="hello\nworld")
    np.testing.assert_array_equal(io.read_netpbm(tmp_path / "d.pgm"), samples)


def test_mask_roundtrip(tmp_path):
    mask = np.zeros((4, 4))
    mask[1:3, 1:3] = 1
    io.save_mask(tmp_path / "m.pgm", mask)
    np.testing.assert_array_equal(io.load_mask(tmp_path / "m.pgm"), mask)


def test_density_preview_scaled_by_max(tmp_path):
    d = np.array([[0.1, 0.2], [0.3, 0.4]])
    io.save_density_pgm(tmp_path / "d.pgm", d)
    raw = io.read_netpbm(tmp_path / "d.pgm")
    assert raw.max() == 65535
    assert raw[0, 0] == round(0.25 * 65535)


def test_csv_floats_roundtrip_exactly(tmp_path):
    value = 0.1 + 0.2
    io.write_csv(tmp_path / "r.csv", ["a", "b"], [[1, value], ["x", None]])
    rows = io.read_csv_dicts(tmp_path / "r.csv")
    assert float(rows[0]["b"]) == value
    assert rows[1] == {"a": "x", "b": ""}


def test_env_threads(monkeypatch):
    monkeypatch.setenv("GAZEFORGE_THREADS", "3")
    assert io.env_threads() == 3
    monkeypatch.setenv("GAZEFORGE_THREADS", "junk")
    assert io.env_threads() == 1
