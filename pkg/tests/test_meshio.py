import numpy as np
import pytest

from touchcharts.geometry import TriMesh, icosphere
from touchcharts.meshio import (read_grid, read_obj, read_ppm, read_xyz, write_grid, write_obj, write_ply,
                                write_ppm, write_xyz)


def test_obj_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    m = icosphere(1)
    m = TriMesh(m.vertices * rng.uniform(0.5, 2.0, size=3) + rng.normal(size=3), m.faces)
    write_obj(tmp_path / "m.obj", m)
    back = read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.faces, m.faces)


def test_obj_reader_handles_slashes_and_quads(tmp_path):
    (tmp_path / "q.obj").write_text(
        "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\n")
    m = read_obj(tmp_path / "q.obj")
    assert m.n_faces == 2
    assert m.face_areas().sum() == pytest.approx(1.0)


def test_ply_header_and_xyz_round_trip(tmp_path):
    p = np.random.default_rng(1).normal(size=(10, 3))
    write_ply(tmp_path / "p.ply", p)
    text = (tmp_path / "p.ply").read_text().splitlines()
    assert text[0] == "ply" and "element vertex 10" in text
    write_xyz(tmp_path / "p.xyz", p)
    assert np.allclose(read_xyz(tmp_path / "p.xyz"), p, rtol=1e-8)
    (tmp_path / "e.xyz").write_text("")
    assert read_xyz(tmp_path / "e.xyz").shape == (0, 3)


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(2).integers(0, 256, size=(5, 7, 3)) / 255.0
    write_ppm(tmp_path / "i.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "i.ppm"), img)
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "bad.ppm", np.zeros((4, 4)))


def test_grid_round_trip(tmp_path):
    g = np.random.default_rng(3).random((6, 4, 3)).astype(np.float32)
    write_grid(tmp_path / "g.f32", g)
    assert np.array_equal(read_grid(tmp_path / "g.f32"), g)
    assert (tmp_path / "g.f32").stat().st_size == g.size * 4
