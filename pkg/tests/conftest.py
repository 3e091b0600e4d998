import numpy as np
import pytest

from envlight.scene import TriangleMesh, build_accel
from envlight.synthetic import box_scene, floor_plane


def brute_force_hits(mesh: TriangleMesh, origins, dirs, t_min=0.0, t_max=np.inf):
    """Exhaustive closest hit over every triangle (vectorized over triangles).

    Returns (tri ids, t) with -1 / inf for misses; equal t resolves to the
    smallest triangle id.
    """
    p = mesh.vertices[mesh.triangles]
    v0, e1, e2 = p[:, 0], p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    ids = np.full(len(origins), -1)
    ts = np.full(len(origins), np.inf)
    for k, (o, d) in enumerate(zip(origins, dirs)):
        pv = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, pv)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            s = o - v0
            u = np.einsum("ij,ij->i", s, pv) * inv
            q = np.cross(s, e1)
            v = (q @ d) * inv
            t = np.einsum("ij,ij->i", e2, q) * inv
        ok = (det != 0) & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > t_min) & (t < t_max)
        if ok.any():
            cand = np.flatnonzero(ok)
            best = cand[np.argmin(t[cand])]
            ids[k] = best
            ts[k] = t[best]
    return ids, ts


def random_units(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def triangle_soup(rng, n):
    centers = rng.uniform(-1, 1, size=(n, 1, 3))
    verts = (centers + rng.normal(scale=0.05, size=(n, 3, 3))).reshape(-1, 3)
    normals = random_units(rng, len(verts))
    albedos = rng.uniform(0, 1, size=verts.shape)
    return TriangleMesh(verts, normals, albedos, np.arange(3 * n).reshape(n, 3))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def floor():
    mesh = floor_plane(50.0, (0.5, 0.5, 0.5))
    return mesh, build_accel(mesh)


@pytest.fixture(scope="session")
def box():
    mesh = box_scene()
    return mesh, build_accel(mesh)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion."""
    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
