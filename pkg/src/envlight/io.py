"""Meshes, images, masks and scene configuration on disk."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraModel
from .scene import AccelStructure, TriangleMesh, intersect_many


class FormatError(ValueError):
    """Malformed input file; the message carries the byte offset when known."""


class ConfigError(ValueError):
    pass


@dataclass
class ReferenceImage:
    image: np.ndarray  # (H, W, 3) float32, linear
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.mask is None:
            self.mask = np.ones(self.image.shape[:2], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError("reference image must be (H, W, 3)")
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError("mask does not match image dimensions")
        if not np.all(np.isfinite(self.image)) or self.image.min(initial=0.0) < 0:
            raise ValueError("reference values must be finite and nonnegative")


# --------------------------------------------------------------------------
# PFM

def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    # three whitespace-separated header fields: type, "w h", scale
    while len(tokens) < 4:
        m = re.compile(rb"\s*(\S+)").match(data, pos)
        if m is None:
            raise FormatError(f"{path}: truncated PFM header at byte {pos}")
        tokens.append((m.group(1), m.start(1)))
        pos = m.end()
    (kind, _), (w, w_at), (h, h_at), (scale, s_at) = tokens
    if kind not in (b"PF", b"Pf"):
        raise FormatError(f"{path}: bad PFM magic {kind!r} at byte 0")
    dims = []
    for tok, at in ((w, w_at), (h, h_at)):
        try:
            dims.append(int(tok))
        except ValueError:
            dims.append(0)
        if dims[-1] <= 0:
            raise FormatError(f"{path}: bad PFM dimension at byte {at}")
    width, height = dims
    try:
        s = float(scale)
    except ValueError:
        raise FormatError(f"{path}: bad PFM scale at byte {s_at}") from None
    if s == 0.0:
        raise FormatError(f"{path}: zero PFM scale at byte {s_at}")
    pos += 1  # single whitespace byte ends the header
    channels = 3 if kind == b"PF" else 1
    n = width * height * channels
    if len(data) - pos < 4 * n:
        raise FormatError(f"{path}: expected {4 * n} bytes of pixel data at byte {pos}, "
                          f"found {len(data) - pos}")
    img = np.frombuffer(data, dtype="<f4" if s < 0 else ">f4", count=n, offset=pos)
    img = img.reshape(height, width, channels)[::-1].astype(np.float32)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def write_pfm(path, image) -> None:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


# --------------------------------------------------------------------------
# PNG (sRGB)

def srgb_to_linear(v):
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v):
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    return np.where(v <= 0.0031308, 12.92 * v, 1.055 * v ** (1.0 / 2.4) - 0.055)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(arr).astype(np.float32)


def save_image(path, image) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, image)
        return
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    out = np.round(linear_to_srgb(img) * 255.0).astype(np.uint8)
    Image.fromarray(out, "RGB").save(path)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def save_mask(path, mask) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255, "L").save(path)


# --------------------------------------------------------------------------
# meshes

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def vertex_normals(vertices, triangles) -> np.ndarray:
    """Area-weighted vertex normals (unnormalized face cross products summed)."""
    p = vertices[triangles]
    fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    n = np.zeros_like(vertices, dtype=np.float64)
    for k in range(3):
        np.add.at(n, triangles[:, k], fn)
    length = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, length, out=np.zeros_like(n), where=length > 0)
    n[length[:, 0] == 0] = (0.0, 0.0, 1.0)
    return n


def _finish_mesh(vertices, normals, colors, color_is_byte, triangles) -> TriangleMesh:
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if colors is None:
        raise FormatError("mesh has no per-vertex colours; albedos are required")
    albedos = np.asarray(colors, dtype=np.float64)
    if color_is_byte:
        albedos = albedos / 255.0
    if normals is None:
        normals = vertex_normals(vertices, triangles)
    else:
        normals = np.asarray(normals, dtype=np.float64)
        length = np.linalg.norm(normals, axis=1, keepdims=True)
        # leave unit normals untouched so binary round trips are exact
        fix = (np.abs(length[:, 0] - 1.0) > 1e-12) & (length[:, 0] > 0)
        normals = normals.copy()
        normals[fix] /= length[fix]
    return TriangleMesh(vertices, normals, albedos, triangles)


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file (missing 'ply' magic or end_header) at byte 0")
    body = data.index(b"\n", end) + 1
    fmt = None
    elements = []
    offset = 0
    for line in data[:end].split(b"\n"):
        words = line.decode("ascii", "replace").split()
        if not words or words[0] in ("ply", "comment", "obj_info"):
            offset += len(line) + 1
            continue
        if words[0] == "format":
            fmt = words[1]
        elif words[0] == "element":
            elements.append({"name": words[1], "count": int(words[2]), "props": []})
        elif words[0] == "property":
            if not elements:
                raise FormatError(f"property before element at byte {offset}")
            if words[1] == "list":
                elements[-1]["props"].append((words[4], "list", words[2], words[3]))
            else:
                if words[1] not in _PLY_TYPES:
                    raise FormatError(f"unknown PLY type {words[1]!r} at byte {offset}")
                elements[-1]["props"].append((words[2], words[1]))
        offset += len(line) + 1
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, body


def load_ply(path) -> TriangleMesh:
    data = Path(path).read_bytes()
    fmt, elements, pos = _parse_ply_header(data)
    endian = ">" if fmt == "binary_big_endian" else "<"
    verts = faces = None
    if fmt == "ascii":
        lines = data[pos:].decode("ascii").split("\n")
        li = 0
        for el in elements:
            rows = []
            for _ in range(el["count"]):
                while li < len(lines) and not lines[li].strip():
                    li += 1
                if li >= len(lines):
                    raise FormatError(f"{path}: truncated {el['name']} data")
                rows.append(lines[li].split())
                li += 1
            if el["name"] == "vertex":
                names = [p[0] for p in el["props"]]
                arr = np.asarray(rows, dtype=np.float64).reshape(-1, len(names))
                verts = ({n: arr[:, k] for k, n in enumerate(names)},
                         {p[0]: p[1] for p in el["props"]})
            elif el["name"] == "face":
                faces = [[int(x) for x in r[1:1 + int(r[0])]] for r in rows]
    else:
        for el in elements:
            if all(p[1] != "list" for p in el["props"]):
                dt = np.dtype([(p[0], endian + _PLY_TYPES[p[1]]) for p in el["props"]])
                need = dt.itemsize * el["count"]
                if len(data) - pos < need:
                    raise FormatError(f"{path}: truncated {el['name']} data at byte {pos}")
                arr = np.frombuffer(data, dtype=dt, count=el["count"], offset=pos)
                pos += need
                if el["name"] == "vertex":
                    verts = ({n: arr[n].astype(np.float64) for n in dt.names},
                             {p[0]: p[1] for p in el["props"]})
            else:
                rows = []
                for _ in range(el["count"]):
                    row = []
                    for p in el["props"]:
                        if p[1] == "list":
                            ct = np.dtype(endian + _PLY_TYPES[p[2]])
                            it = np.dtype(endian + _PLY_TYPES[p[3]])
                            if pos + ct.itemsize > len(data):
                                raise FormatError(f"{path}: truncated list at byte {pos}")
                            n = int(np.frombuffer(data, ct, 1, pos)[0])
                            pos += ct.itemsize
                            if pos + n * it.itemsize > len(data):
                                raise FormatError(f"{path}: truncated list at byte {pos}")
                            row = np.frombuffer(data, it, n, pos).tolist()
                            pos += n * it.itemsize
                        else:
                            pos += np.dtype(_PLY_TYPES[p[1]]).itemsize
                    rows.append(row)
                if el["name"] == "face":
                    faces = rows
    if verts is None or not {"x", "y", "z"} <= verts[0].keys():
        raise FormatError(f"{path}: PLY has no vertex positions")
    cols, types = verts
    xyz = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = None
    if {"nx", "ny", "nz"} <= cols.keys():
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    colors = None
    byte = False
    for names in (("red", "green", "blue"), ("diffuse_red", "diffuse_green", "diffuse_blue")):
        if set(names) <= cols.keys():
            colors = np.stack([cols[n] for n in names], axis=1)
            byte = _PLY_TYPES[types[names[0]]][0] in "iu"
            break
    tris = []
    for f in faces or []:
        for k in range(1, len(f) - 1):
            tris.append((f[0], f[k], f[k + 1]))
    try:
        return _finish_mesh(xyz, normals, colors, byte, np.asarray(tris, dtype=np.int64))
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


def save_ply(path, mesh: TriangleMesh) -> None:
    """Binary little-endian PLY, doubles for every vertex attribute."""
    n = len(mesh.vertices)
    header = (
        "ply\nformat binary_little_endian 1.0\ncomment envlight mesh\n"
        f"element vertex {n}\n"
        + "".join(f"property double {p}\n" for p in ("x", "y", "z", "nx", "ny", "nz",
                                                      "red", "green", "blue"))
        + f"element face {mesh.n_triangles}\nproperty list uchar int vertex_indices\n"
        "end_header\n"
    )
    vdt = np.dtype([(p, "<f8") for p in ("x", "y", "z", "nx", "ny", "nz", "red", "green", "blue")])
    v = np.empty(n, dtype=vdt)
    for k, p in enumerate(("x", "y", "z")):
        v[p] = mesh.vertices[:, k]
        v["n" + p] = mesh.normals[:, k]
    for k, p in enumerate(("red", "green", "blue")):
        v[p] = mesh.albedos[:, k]
    fdt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
    f = np.empty(mesh.n_triangles, dtype=fdt)
    f["n"] = 3
    f["i"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(v.tobytes())
        fh.write(f.tobytes())


def load_obj(path) -> TriangleMesh:
    """OBJ with the common ``v x y z r g b`` vertex-colour extension."""
    pos, col, nrm, tris = [], [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        w = line.split()
        if not w or w[0].startswith("#"):
            continue
        if w[0] == "v":
            pos.append([float(x) for x in w[1:4]])
            if len(w) >= 7:
                col.append([float(x) for x in w[4:7]])
        elif w[0] == "vn":
            nrm.append([float(x) for x in w[1:4]])
        elif w[0] == "f":
            idx = []
            for tok in w[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(pos) + i)
            for k in range(1, len(idx) - 1):
                tris.append((idx[0], idx[k], idx[k + 1]))
    if not pos:
        raise FormatError(f"{path}: OBJ has no vertex positions")
    if len(col) != len(pos):
        raise FormatError(f"{path}: OBJ lacks per-vertex colours; albedos are required")
    col = np.asarray(col)
    byte = col.max(initial=0.0) > 1.0
    normals = np.asarray(nrm) if len(nrm) == len(pos) else None
    return _finish_mesh(pos, normals, col, byte, tris)


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix.lower() == ".obj":
        return load_obj(path)
    return load_ply(path)


save_mesh = save_ply


# --------------------------------------------------------------------------
# masks and error maps

def compute_mask(accel: AccelStructure, camera: CameraModel) -> np.ndarray:
    """True where the pixel's central ray hits front-facing geometry."""
    o, d = camera.pixel_rays(0.5)
    tri, _, _ = intersect_many(accel, o, d)
    hit = tri >= 0
    front = np.zeros_like(hit)
    front[hit] = np.einsum("ij,ij->i", d[hit], accel.geo_normals[tri[hit]]) < 0
    return front.reshape(camera.shape)


def error_map(ref, render, scale: float = 1.5, mask=None) -> np.ndarray:
    ref = np.asarray(ref, dtype=np.float64)
    render = np.asarray(render, dtype=np.float64)
    if ref.shape != render.shape:
        raise ValueError(f"image sizes differ: {ref.shape} vs {render.shape}")
    out = np.abs(ref - render) * scale
    if mask is not None:
        out[~np.asarray(mask, dtype=bool)] = 0.0
    return out


# --------------------------------------------------------------------------
# scene configuration

@dataclass
class ViewConfig:
    image: Path
    camera: CameraModel
    mask: Path | None = None


@dataclass
class SceneConfig:
    mesh: Path
    views: list
    rings: int = 9
    trace: dict = field(default_factory=dict)
    objective: dict = field(default_factory=dict)
    render_spp: int = 1024
    threads: int | None = None

    def to_json(self) -> dict:
        return {
            "mesh": str(self.mesh),
            "views": [{"image": str(v.image), "camera": v.camera.to_json(),
                       **({"mask": str(v.mask)} if v.mask else {})} for v in self.views],
            "rings": self.rings,
            "trace": dict(self.trace),
            "objective": dict(self.objective),
            "render_spp": self.render_spp,
            "threads": self.threads,
        }


def parse_scene_config(doc: dict, base: Path) -> SceneConfig:
    if "resolved_config" in doc:  # a run manifest
        doc = doc["resolved_config"]

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else (base / p)

    try:
        mesh = resolve(doc["mesh"])
        views = [ViewConfig(resolve(v["image"]), CameraModel.from_json(v["camera"]),
                            resolve(v["mask"]) if v.get("mask") else None)
                 for v in doc["views"]]
        cfg = SceneConfig(mesh, views, int(doc.get("rings", 9)), dict(doc.get("trace", {})),
                          dict(doc.get("objective", {})), int(doc.get("render_spp", 1024)),
                          doc.get("threads"))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid scene config: {e}") from None
    if cfg.rings < 2:
        raise ConfigError("rings must be >= 2")
    if not cfg.views:
        raise ConfigError("scene config needs at least one view")
    for p in [cfg.mesh] + [v.image for v in cfg.views] + [v.mask for v in cfg.views if v.mask]:
        if not p.exists():
            raise ConfigError(f"missing file: {p}")
    return cfg


def load_scene_config(path) -> SceneConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_scene_config(doc, path.parent)


def load_reference(view: ViewConfig, accel: AccelStructure | None = None) -> ReferenceImage:
    img = load_image(view.image)
    if img.shape[:2] != view.camera.shape:
        raise ConfigError(f"{view.image}: size {img.shape[1]}x{img.shape[0]} does not match "
                          f"camera {view.camera.width}x{view.camera.height}")
    mask = load_mask(view.mask) if view.mask else np.ones(img.shape[:2], dtype=bool)
    if accel is not None:
        mask &= compute_mask(accel, view.camera)
    return ReferenceImage(img, mask)
