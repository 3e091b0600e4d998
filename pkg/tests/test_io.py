import json
import math

import numpy as np
import pytest
from PIL import Image

from envlight.camera import CameraModel
from envlight.io import (ConfigError, FormatError, ReferenceImage, compute_mask, error_map,
                         load_image, load_mask, load_mesh, load_reference, load_scene_config,
                         read_pfm, save_image, save_mask, save_ply, srgb_to_linear, vertex_normals,
                         write_pfm)
from envlight.scene import TriangleMesh, build_accel
from envlight.synthetic import box_scene, merge, quad_grid

QUAD_V = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)]


def ascii_ply(path, normals=True, colors="uchar", faces=((0, 1, 2, 3),)):
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if normals else [])
    lines = ["ply", "format ascii 1.0", f"element vertex {len(QUAD_V)}"]
    lines += [f"property float {p}" for p in props]
    if colors:
        lines += [f"property {colors} {c}" for c in ("red", "green", "blue")]
    lines += [f"element face {len(faces)}", "property list uchar int vertex_indices", "end_header"]
    white = "255 255 255" if colors == "uchar" else "1 1 1"
    for v in QUAD_V:
        row = [*map(str, v)] + (["0", "0", "1"] if normals else []) + ([white] if colors else [])
        lines.append(" ".join(row))
    for f in faces:
        lines.append(" ".join(map(str, (len(f), *f))))
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------- meshes

def test_ascii_quad(tmp_path):
    mesh = load_mesh(ascii_ply(tmp_path / "q.ply"))
    assert mesh.n_triangles == 2
    np.testing.assert_array_equal(mesh.albedos, 1.0)
    np.testing.assert_array_equal(mesh.normals, [[0, 0, 1]] * 4)


def test_missing_normals_are_face_normal(tmp_path):
    mesh = load_mesh(ascii_ply(tmp_path / "q.ply", normals=False))
    np.testing.assert_allclose(mesh.normals, [[0, 0, 1]] * 4, atol=1e-15)


def test_float_colours_are_not_rescaled(tmp_path):
    mesh = load_mesh(ascii_ply(tmp_path / "q.ply", colors="float"))
    np.testing.assert_array_equal(mesh.albedos, 1.0)


def test_missing_colours_rejected(tmp_path):
    with pytest.raises(FormatError, match="colour"):
        load_mesh(ascii_ply(tmp_path / "q.ply", colors=None))


def test_missing_positions_rejected(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float red\nend_header\n1\n")
    with pytest.raises(FormatError):
        load_mesh(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "x.ply"
    p.write_bytes(b"not a mesh")
    with pytest.raises(FormatError, match="byte 0"):
        load_mesh(p)


def test_truncated_binary_reports_offset(tmp_path):
    p = tmp_path / "m.ply"
    save_ply(p, box_scene())
    data = p.read_bytes()
    p.write_bytes(data[: len(data) // 2])
    with pytest.raises(FormatError, match="byte"):
        load_mesh(p)


def test_missing_mesh_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mesh(tmp_path / "nope.ply")


def test_binary_round_trip_is_bitwise(tmp_path, rng):
    mesh = box_scene()
    save_ply(tmp_path / "m.ply", mesh)
    back = load_mesh(tmp_path / "m.ply")
    for name in ("vertices", "normals", "albedos", "triangles"):
        np.testing.assert_array_equal(getattr(back, name), getattr(mesh, name))
    # random unit normals also survive exactly
    n = rng.normal(size=(4, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    quad = TriangleMesh(np.asarray(QUAD_V, float), n, rng.random((4, 3)),
                        np.array([[0, 1, 2], [0, 2, 3]]))
    save_ply(tmp_path / "r.ply", quad)
    np.testing.assert_array_equal(load_mesh(tmp_path / "r.ply").normals, quad.normals)


def test_non_unit_normals_renormalized(tmp_path):
    p = tmp_path / "n.ply"
    text = ascii_ply(p).read_text().replace("0 0 1 255", "0 0 3 255")
    p.write_text(text)
    np.testing.assert_allclose(load_mesh(p).normals, [[0, 0, 1]] * 4, atol=1e-15)


def test_obj_with_vertex_colours(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0 1 1 1\nv 1 0 0 1 1 1\nv 1 1 0 1 1 1\nv 0 1 0 1 1 1\nf 1 2 3 4\n")
    mesh = load_mesh(p)
    assert mesh.n_triangles == 2
    np.testing.assert_array_equal(mesh.albedos, 1.0)
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nf 1 2 3\n")
    with pytest.raises(FormatError):
        load_mesh(p)


def test_vertex_normals_area_weighted():
    v = np.array([(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1.0)])
    t = np.array([[0, 1, 2], [0, 3, 1]])
    n = vertex_normals(v, t)
    np.testing.assert_allclose(n[0], np.array([0, 1, 1]) / math.sqrt(2))
    np.testing.assert_allclose(n[2], [0, 0, 1])


# ---------------------------------------------------------------- images

def test_pfm_known_values(tmp_path):
    p = tmp_path / "a.pfm"
    rows = np.array([[[1, 2, 3], [4, 5, 6]], [[7, 8, 9], [10, 11, 12]]], dtype="<f4")
    # file rows run bottom-up
    p.write_bytes(b"PF\n2 2\n-1.0\n" + rows[::-1].tobytes())
    np.testing.assert_array_equal(read_pfm(p), rows)


def test_pfm_big_endian_and_gray(tmp_path):
    p = tmp_path / "b.pfm"
    p.write_bytes(b"Pf\n2 1\n1.0\n" + np.array([0.5, 2.0], dtype=">f4").tobytes())
    np.testing.assert_array_equal(read_pfm(p), [[[0.5] * 3, [2.0] * 3]])


def test_pfm_round_trip_bitwise(tmp_path, rng):
    img = rng.exponential(size=(5, 7, 3)).astype(np.float32)
    write_pfm(tmp_path / "x.pfm", img)
    back = read_pfm(tmp_path / "x.pfm")
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, img)
    assert (tmp_path / "x.pfm").read_bytes().startswith(b"PF\n7 5\n-1.0\n")


@pytest.mark.parametrize("data,where", [
    (b"P6\n2 2\n-1.0\n", "byte 0"),
    (b"PF\n2 x\n-1.0\n", "byte 5"),
    (b"PF\n2 2\nabc\n", "byte 7"),
    (b"PF\n2 2\n-1.0\n" + bytes(10), "byte 12"),
    (b"PF\n2", "byte"),
])
def test_pfm_malformed(tmp_path, data, where):
    p = tmp_path / "m.pfm"
    p.write_bytes(data)
    with pytest.raises(FormatError, match=where):
        read_pfm(p)


def test_png_gray_128_linearizes(tmp_path):
    Image.fromarray(np.full((2, 2, 3), 128, np.uint8)).save(tmp_path / "g.png")
    img = load_image(tmp_path / "g.png")
    np.testing.assert_allclose(img, 0.2158605, atol=1e-6)
    assert abs(float(srgb_to_linear(128 / 255)) - ((128 / 255 + 0.055) / 1.055) ** 2.4) < 1e-15


def test_png_save_clamps_and_round_trips(tmp_path):
    img = np.array([[[-1.0, 0.0, 2.0], [0.2158605, 0.5, 1.0]]])
    save_image(tmp_path / "o.png", img)
    raw = np.asarray(Image.open(tmp_path / "o.png"))
    np.testing.assert_array_equal(raw[0, 0], [0, 0, 255])
    assert raw[0, 1, 0] == 128
    np.testing.assert_allclose(load_image(tmp_path / "o.png")[0, 1], img[0, 1], atol=3e-3)


def test_mask_round_trip(tmp_path, rng):
    m = rng.random((6, 9)) < 0.5
    save_mask(tmp_path / "m.png", m)
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), m)


def test_reference_image_validation():
    with pytest.raises(ValueError):
        ReferenceImage(np.full((2, 2, 3), -1.0), None)
    with pytest.raises(ValueError):
        ReferenceImage(np.full((2, 2, 3), np.nan), None)
    with pytest.raises(ValueError):
        ReferenceImage(np.zeros((2, 2, 3)), np.ones((3, 2), bool))


# ---------------------------------------------------------------- masks and error maps

def test_mask_facing_a_wall_is_full():
    wall = build_accel(merge([quad_grid((-50, 5, -50), (100, 0, 0), (0, 0, 100), (0, -1, 0), 0.5, 1)]))
    cam = CameraModel.look_at((0, 0, 0), (0, 1, 0), width=8, height=6)
    assert compute_mask(wall, cam).all()


def test_mask_facing_empty_space_is_empty():
    wall = build_accel(merge([quad_grid((-50, 5, -50), (100, 0, 0), (0, 0, 100), (0, -1, 0), 0.5, 1)]))
    cam = CameraModel.look_at((0, 0, 0), (0, -1, 0), width=8, height=6)
    assert not compute_mask(wall, cam).any()


def test_mask_of_half_plane_matches_projection():
    # ground half-plane x >= 0 seen from straight above; its edge projects to one image column
    plane = build_accel(merge([quad_grid((0, -20, 0), (20, 0, 0), (0, 40, 0), (0, 0, 1), 0.5, 1)]))
    cam = CameraModel.look_at((0.3, 0, 3), (0.3, 0.001, 0), width=40, height=30, fov_y_deg=50)
    mask = compute_mask(plane, cam)
    edge_u = cam.project(np.array([[0.0, 0.0, 0.0]]))[0, 0]
    inside_u = cam.project(np.array([[1.0, 0.0, 0.0]]))[0, 0]
    u = np.arange(cam.width) + 0.5
    far = np.abs(u - edge_u) > 1.0
    expected = (u > edge_u) if inside_u > edge_u else (u < edge_u)
    assert np.all(mask[:, far] == expected[far])


def test_error_map_cases(rng):
    a = rng.random((4, 4, 3))
    assert np.all(error_map(a, a) == 0)
    np.testing.assert_array_equal(error_map(np.ones((2, 2, 3)), np.zeros((2, 2, 3))), 1.5)
    mask = np.ones((4, 4), bool)
    mask[2, 3] = False
    out = error_map(a, a + 1, 2.0, mask)
    assert np.all(out[2, 3] == 0)
    np.testing.assert_allclose(out[mask], 2.0, rtol=1e-12)
    with pytest.raises(ValueError):
        error_map(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


# ---------------------------------------------------------------- scene config

def write_config(tmp_path, **extra):
    save_ply(tmp_path / "m.ply", box_scene())
    cam = CameraModel.look_at((0, -1.6, 2.4), (0, 0, 0), width=8, height=6)
    write_pfm(tmp_path / "r.pfm", np.ones((6, 8, 3)))
    doc = {"mesh": "m.ply", "views": [{"image": "r.pfm", "camera": cam.to_json()}], **extra}
    (tmp_path / "s.json").write_text(json.dumps(doc))
    return tmp_path / "s.json"


def test_scene_config_relative_paths(tmp_path):
    cfg = load_scene_config(write_config(tmp_path, rings=5))
    assert cfg.mesh == tmp_path / "m.ply"
    assert cfg.rings == 5
    ref = load_reference(cfg.views[0], build_accel(load_mesh(cfg.mesh)))
    assert ref.image.shape == (6, 8, 3)


@pytest.mark.parametrize("change", [dict(rings=1), dict(views=[]), dict(mesh="missing.ply")])
def test_scene_config_errors(tmp_path, change):
    path = write_config(tmp_path)
    doc = json.loads(path.read_text())
    doc.update(change)
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        load_scene_config(path)


def test_reference_size_must_match_camera(tmp_path):
    cfg = load_scene_config(write_config(tmp_path))
    write_pfm(tmp_path / "r.pfm", np.ones((5, 8, 3)))
    with pytest.raises(ConfigError):
        load_reference(cfg.views[0])
