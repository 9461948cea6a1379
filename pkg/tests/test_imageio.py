import numpy as np
import pytest

from coda import imageio


def test_ppm_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = imageio.snap_to_grid(rng.random((12, 9, 3)).astype(np.float32))
    path = tmp_path / "x.ppm"
    imageio.write_ppm(path, img)
    back = imageio.read_ppm(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, img)


def test_pgm_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 5, size=(7, 11)).astype(np.uint8)
    path = tmp_path / "y.pgm"
    imageio.write_pgm(path, labels)
    assert np.array_equal(imageio.read_pgm(path), labels)


def test_write_is_byte_deterministic(tmp_path):
    img = imageio.snap_to_grid(np.random.default_rng(2).random((8, 8, 3)))
    a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
    imageio.write_ppm(a, img)
    imageio.write_ppm(b, img)
    assert a.read_bytes() == b.read_bytes()


def test_truncated_file_is_rejected(tmp_path):
    img = imageio.snap_to_grid(np.random.default_rng(3).random((8, 8, 3)))
    path = tmp_path / "t.ppm"
    imageio.write_ppm(path, img)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(imageio.PnmError, match="truncated"):
        imageio.read_ppm(path)


def test_wrong_magic_is_rejected(tmp_path):
    path = tmp_path / "m.ppm"
    path.write_bytes(b"P3\n2 2\n255\n" + bytes(12))
    with pytest.raises(imageio.PnmError, match="expected P6"):
        imageio.read_ppm(path)


def test_header_comments_are_skipped(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 2\n255\n" + bytes([1, 2, 3, 4]))
    assert np.array_equal(imageio.read_pgm(path), [[1, 2], [3, 4]])
