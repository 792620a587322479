import numpy as np
import pytest

from chandb.grid import ChannelGrid, GridSpec, Sample, build_grid
from chandb.io import (mask_path_for, read_grid, read_grid_csv,
                       read_samples_csv, write_grid, write_grid_csv,
                       write_pgm, write_samples_csv)


def test_samples_csv_round_trip(tmp_path):
    samples = [Sample(0.125, 7.25, -61.3), Sample(3.0, 0.0, -48.777)]
    path = tmp_path / "s.csv"
    write_samples_csv(path, samples)
    back = read_samples_csv(path)
    assert back == samples


def test_samples_csv_round_trip_preserves_floats(tmp_path):
    rng = np.random.default_rng(11)
    samples = [Sample(float(a), float(b), float(g))
               for a, b, g in rng.random((50, 3))]
    path = tmp_path / "s.csv"
    write_samples_csv(path, samples)
    back = read_samples_csv(path)
    for orig, rt in zip(samples, back):
        assert rt.x1 == orig.x1 and rt.x2 == orig.x2
        assert rt.gain_db == orig.gain_db


def test_read_samples_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x1,x2,gain_db\n1.0,2.0,-50\n1.0,oops,-60\n")
    with pytest.raises(ValueError, match=r"bad\.csv:3"):
        read_samples_csv(path)


def test_read_samples_rejects_wrong_column_count(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x1,x2,gain_db\n1.0,2.0\n")
    with pytest.raises(ValueError):
        read_samples_csv(path)


def test_grid_csv_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    m = rng.normal(-55, 9, (6, 4))
    path = tmp_path / "g.csv"
    write_grid_csv(path, m)
    assert np.array_equal(read_grid_csv(path), m)


def test_grid_csv_single_row(tmp_path):
    path = tmp_path / "g.csv"
    write_grid_csv(path, np.array([[1.5, 2.5, -3.0]]))
    back = read_grid_csv(path)
    assert back.shape == (1, 3)


def test_mask_path_convention():
    assert mask_path_for("out/grid.csv").name == "grid.mask.csv"


def test_write_read_grid_round_trip(tmp_path):
    spec = GridSpec(0.0, 4.0, 0.0, 3.0, 0.5)
    rng = np.random.default_rng(4)
    mask = (rng.random(spec.shape) < 0.5).astype(np.int8)
    values = np.where(mask == 1, rng.normal(-60, 5, spec.shape), 0.0)
    grid = ChannelGrid(spec, values, mask)
    path = tmp_path / "grid.csv"
    write_grid(path, grid)
    back = read_grid(path, q=0.5)
    assert np.array_equal(back.values, grid.values)
    assert np.array_equal(back.mask, grid.mask)
    assert back.spec.shape == spec.shape
    assert back.spec.q == 0.5


def test_read_grid_mask_shape_mismatch(tmp_path):
    vp = tmp_path / "v.csv"
    mp = tmp_path / "m.csv"
    write_grid_csv(vp, np.zeros((3, 3)))
    write_grid_csv(mp, np.ones((2, 3)))
    with pytest.raises(ValueError):
        read_grid(vp, mask_path=mp)


def test_write_pgm_format(tmp_path):
    values = np.array([[0.0, 5.0], [10.0, 0.0]])
    mask = np.array([[1, 1], [1, 0]])
    path = tmp_path / "f.pgm"
    write_pgm(path, values, mask)
    raw = path.read_bytes()
    assert raw.startswith(b"P5")
    header = raw.split(b"\n")
    assert header[1] == b"2 2"
    assert header[2] == b"65535"
    pixels = np.frombuffer(raw[raw.index(b"65535\n") + 6:], dtype=">u2")
    assert pixels.shape == (4,)
    # invalid cell renders as 0, valid ones span the positive range
    assert pixels[3] == 0
    assert pixels[0] >= 1
    assert pixels[2] == 65535


def test_write_pgm_constant_field(tmp_path):
    path = tmp_path / "c.pgm"
    write_pgm(path, np.full((2, 2), -50.0))
    pixels = np.frombuffer(path.read_bytes().split(b"65535\n", 1)[1], dtype=">u2")
    assert np.all(pixels == 65535)
