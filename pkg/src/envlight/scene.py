"""Triangle-mesh geometry, BVH construction and ray queries.

The numba kernels in this module (``closest_hit``, ``any_hit``) are shared
with the path tracer; the Python wrappers below are the convenient surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

LEAF_SIZE = 4
STACK_SIZE = 64
# relative t window inside which two hits count as a tie (smallest id wins)
TIE_EPS = 1e-12
SHADOW_EPS_SCALE = 1e-4


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    normals: np.ndarray
    albedos: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        n = np.ascontiguousarray(self.normals, dtype=np.float64)
        a = np.ascontiguousarray(self.albedos, dtype=np.float64)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise GeometryError("vertices must have shape (V, 3)")
        if n.shape != v.shape or a.shape != v.shape:
            raise GeometryError("normals and albedos must match the vertex array")
        if t.size == 0:
            t = t.reshape(0, 3)
        if t.ndim != 2 or t.shape[1] != 3:
            raise GeometryError("triangles must have shape (T, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise GeometryError("triangle index out of range")
        if not np.all(np.isfinite(v)):
            raise GeometryError("non-finite vertex position")
        if len(n) and np.max(np.abs(np.linalg.norm(n, axis=1) - 1.0)) > 1e-6:
            raise GeometryError("normals must be unit length")
        if a.size and (a.min() < 0.0 or a.max() > 1.0):
            raise GeometryError("albedo channels must lie in [0, 1]")
        for name, arr in (("vertices", v), ("normals", n), ("albedos", a), ("triangles", t)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        used = self.vertices[np.unique(self.triangles)] if self.n_triangles else self.vertices
        return used.min(axis=0), used.max(axis=0)

    def diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = np.inf

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if self.t_min < 0 or not self.t_min < self.t_max:
            raise ValueError("ray bounds must satisfy 0 <= t_min < t_max")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class SurfaceHit:
    point: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray
    triangle: int
    t: float
    geometric_normal: np.ndarray = field(repr=False)
    front_facing: bool = True


@dataclass(frozen=True)
class AccelStructure:
    """Flattened BVH. Interior nodes have ``count == 0`` and their left child
    directly follows them; ``right`` holds the right child index. Leaves cover
    ``order[start:start + count]``."""

    mesh: TriangleMesh
    node_min: np.ndarray
    node_max: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    tri_verts: np.ndarray  # (T, 3, 3) positions, cached for the kernels
    geo_normals: np.ndarray  # (T, 3), oriented to agree with shading normals
    shadow_eps: float

    @property
    def n_nodes(self) -> int:
        return len(self.count)

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.count))


def geometric_normals(mesh: TriangleMesh) -> np.ndarray:
    """Unit face normals from winding, flipped to agree with the vertex normals."""
    p = mesh.vertices[mesh.triangles]
    ng = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    length = np.linalg.norm(ng, axis=1, keepdims=True)
    ng = np.divide(ng, length, out=np.zeros_like(ng), where=length > 0)
    ns = mesh.normals[mesh.triangles].sum(axis=1)
    flip = np.einsum("ij,ij->i", ng, ns) < 0
    ng[flip] *= -1.0
    return ng


def build_accel(mesh: TriangleMesh) -> AccelStructure:
    if mesh.n_triangles == 0:
        raise GeometryError("cannot build an acceleration structure for an empty mesh")
    tri_verts = np.ascontiguousarray(mesh.vertices[mesh.triangles])
    tmin = tri_verts.min(axis=1)
    tmax = tri_verts.max(axis=1)
    centroids = tri_verts.mean(axis=1)

    node_min, node_max, right, start, count = [], [], [], [], []
    order = np.arange(mesh.n_triangles, dtype=np.int64)

    def build(lo: int, hi: int) -> int:
        idx = len(count)
        ids = order[lo:hi]
        node_min.append(tmin[ids].min(axis=0))
        node_max.append(tmax[ids].max(axis=0))
        right.append(-1)
        start.append(lo)
        count.append(hi - lo)
        if hi - lo <= LEAF_SIZE:
            return idx
        c = centroids[ids]
        extent = c.max(axis=0) - c.min(axis=0)
        axis = int(np.argmax(extent))
        if extent[axis] <= 0.0:
            return idx
        # stable sort keeps the layout deterministic
        perm = np.argsort(c[:, axis], kind="stable")
        order[lo:hi] = ids[perm]
        mid = lo + (hi - lo) // 2
        count[idx] = 0
        build(lo, mid)
        right[idx] = build(mid, hi)
        return idx

    build(0, mesh.n_triangles)
    return AccelStructure(
        mesh=mesh,
        node_min=np.asarray(node_min, dtype=np.float64),
        node_max=np.asarray(node_max, dtype=np.float64),
        right=np.asarray(right, dtype=np.int64),
        start=np.asarray(start, dtype=np.int64),
        count=np.asarray(count, dtype=np.int64),
        order=order,
        tri_verts=tri_verts,
        geo_normals=geometric_normals(mesh),
        shadow_eps=SHADOW_EPS_SCALE * max(mesh.diagonal(), 1e-12),
    )


def accel_arrays(accel: AccelStructure) -> tuple:
    """The positional tuple every traversal kernel takes."""
    return (accel.node_min, accel.node_max, accel.right, accel.start, accel.count,
            accel.order, accel.tri_verts)


# --------------------------------------------------------------------------
# numba kernels

@nb.njit(cache=True, error_model="numpy")
def ray_triangle(ox, oy, oz, dx, dy, dz, tv, tri):
    """Moller-Trumbore. Returns (t, u, v); t is -1 on a miss. Edges inclusive."""
    v0x, v0y, v0z = tv[tri, 0, 0], tv[tri, 0, 1], tv[tri, 0, 2]
    e1x, e1y, e1z = tv[tri, 1, 0] - v0x, tv[tri, 1, 1] - v0y, tv[tri, 1, 2] - v0z
    e2x, e2y, e2z = tv[tri, 2, 0] - v0x, tv[tri, 2, 1] - v0y, tv[tri, 2, 2] - v0z
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if det == 0.0:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    sx, sy, sz = ox - v0x, oy - v0y, oz - v0z
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return t, u, v


@nb.njit(cache=True, error_model="numpy")
def _slab(ox, oy, oz, ix, iy, iz, bmin, bmax, node, t_min, t_max):
    t0 = t_min
    t1 = t_max
    a = (bmin[node, 0] - ox) * ix
    b = (bmax[node, 0] - ox) * ix
    if a > b:
        a, b = b, a
    # NaN from 0*inf means the ray lies in the slab plane; keep the interval
    if a == a and a > t0:
        t0 = a
    if b == b and b < t1:
        t1 = b
    a = (bmin[node, 1] - oy) * iy
    b = (bmax[node, 1] - oy) * iy
    if a > b:
        a, b = b, a
    if a == a and a > t0:
        t0 = a
    if b == b and b < t1:
        t1 = b
    a = (bmin[node, 2] - oz) * iz
    b = (bmax[node, 2] - oz) * iz
    if a > b:
        a, b = b, a
    if a == a and a > t0:
        t0 = a
    if b == b and b < t1:
        t1 = b
    return t0 <= t1 * (1.0 + 1e-12)


@nb.njit(cache=True, error_model="numpy")
def closest_hit(ox, oy, oz, dx, dy, dz, t_min, t_max,
                bmin, bmax, right, start, count, order, tv):
    """Nearest hit with t in (t_min, t_max). Returns (tri, t, u, v); tri = -1 on a miss."""
    ix = 1.0 / dx
    iy = 1.0 / dy
    iz = 1.0 / dz
    best_t = t_max
    best_tri = -1
    best_u = 0.0
    best_v = 0.0
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        reach = best_t * (1.0 + TIE_EPS) if best_tri >= 0 else best_t
        if not _slab(ox, oy, oz, ix, iy, iz, bmin, bmax, node, t_min, reach):
            continue
        n = count[node]
        if n > 0:
            for k in range(start[node], start[node] + n):
                tri = order[k]
                t, u, v = ray_triangle(ox, oy, oz, dx, dy, dz, tv, tri)
                if t <= t_min or t >= t_max:
                    continue
                if best_tri < 0:
                    take = True
                else:
                    tol = TIE_EPS * max(1.0, abs(best_t))
                    if t < best_t - tol:
                        take = True
                    elif t <= best_t + tol:
                        take = tri < best_tri
                    else:
                        take = False
                if take:
                    best_t = t
                    best_tri = tri
                    best_u = u
                    best_v = v
        else:
            stack[sp] = right[node]
            sp += 1
            stack[sp] = node + 1
            sp += 1
    return best_tri, best_t, best_u, best_v


@nb.njit(cache=True, error_model="numpy")
def any_hit(ox, oy, oz, dx, dy, dz, t_min, t_max,
            bmin, bmax, right, start, count, order, tv):
    ix = 1.0 / dx
    iy = 1.0 / dy
    iz = 1.0 / dz
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _slab(ox, oy, oz, ix, iy, iz, bmin, bmax, node, t_min, t_max):
            continue
        n = count[node]
        if n > 0:
            for k in range(start[node], start[node] + n):
                t, u, v = ray_triangle(ox, oy, oz, dx, dy, dz, tv, order[k])
                if t > t_min and t < t_max:
                    return True
        else:
            stack[sp] = right[node]
            sp += 1
            stack[sp] = node + 1
            sp += 1
    return False


@nb.njit(cache=True, error_model="numpy")
def _closest_batch(origins, dirs, t_min, t_max, bmin, bmax, right, start, count, order, tv):
    n = origins.shape[0]
    tri = np.empty(n, dtype=np.int64)
    t = np.empty(n)
    uv = np.empty((n, 2))
    for i in range(n):
        h, th, u, v = closest_hit(origins[i, 0], origins[i, 1], origins[i, 2],
                                  dirs[i, 0], dirs[i, 1], dirs[i, 2], t_min[i], t_max[i],
                                  bmin, bmax, right, start, count, order, tv)
        tri[i] = h
        t[i] = th
        uv[i, 0] = u
        uv[i, 1] = v
    return tri, t, uv


@nb.njit(cache=True, error_model="numpy")
def _any_batch(origins, dirs, t_min, t_max, bmin, bmax, right, start, count, order, tv):
    n = origins.shape[0]
    out = np.empty(n, dtype=np.bool_)
    for i in range(n):
        out[i] = any_hit(origins[i, 0], origins[i, 1], origins[i, 2],
                         dirs[i, 0], dirs[i, 1], dirs[i, 2], t_min[i], t_max[i],
                         bmin, bmax, right, start, count, order, tv)
    return out


# --------------------------------------------------------------------------
# Python surface

def _broadcast_bounds(value, n):
    return np.ascontiguousarray(np.broadcast_to(np.asarray(value, dtype=np.float64), (n,)))


def intersect_many(accel: AccelStructure, origins, directions, t_min=0.0, t_max=np.inf):
    """Batched closest-hit query. Returns (triangle ids, t, barycentric uv)."""
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    n = len(o)
    return _closest_batch(o, d, _broadcast_bounds(t_min, n), _broadcast_bounds(t_max, n),
                          *accel_arrays(accel))


def hit_from_barycentrics(accel: AccelStructure, origin, direction, tri: int, t: float,
                          u: float, v: float) -> SurfaceHit:
    mesh = accel.mesh
    i0, i1, i2 = mesh.triangles[tri]
    w = 1.0 - u - v
    n = w * mesh.normals[i0] + u * mesh.normals[i1] + v * mesh.normals[i2]
    norm = np.linalg.norm(n)
    ng = accel.geo_normals[tri]
    n = n / norm if norm > 0 else ng.copy()
    albedo = w * mesh.albedos[i0] + u * mesh.albedos[i1] + v * mesh.albedos[i2]
    return SurfaceHit(
        point=np.asarray(origin) + t * np.asarray(direction),
        normal=n,
        albedo=albedo,
        triangle=int(tri),
        t=float(t),
        geometric_normal=ng.copy(),
        front_facing=bool(np.dot(direction, ng) < 0.0),
    )


def intersect(accel: AccelStructure, ray: Ray) -> SurfaceHit | None:
    o, d = ray.origin, ray.direction
    tri, t, u, v = closest_hit(o[0], o[1], o[2], d[0], d[1], d[2], float(ray.t_min),
                               float(ray.t_max), *accel_arrays(accel))
    if tri < 0:
        return None
    return hit_from_barycentrics(accel, o, d, tri, t, u, v)


def occluded(accel: AccelStructure, p, omega, normal=None) -> bool:
    """Shadow query: is anything hit leaving ``p`` along ``omega``?

    The origin is pushed off the surface by the shadow epsilon, along
    ``normal`` (flipped to omega's side) when given, otherwise along omega.
    """
    p = np.asarray(p, dtype=np.float64)
    w = np.asarray(omega, dtype=np.float64)
    if normal is None:
        offset = w
    else:
        offset = np.asarray(normal, dtype=np.float64)
        if np.dot(offset, w) < 0:
            offset = -offset
    o = p + accel.shadow_eps * offset
    return bool(any_hit(o[0], o[1], o[2], w[0], w[1], w[2], 0.0, np.inf, *accel_arrays(accel)))


def occluded_many(accel: AccelStructure, points, omegas) -> np.ndarray:
    p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    w = np.ascontiguousarray(omegas, dtype=np.float64).reshape(-1, 3)
    o = np.ascontiguousarray(p + accel.shadow_eps * w)
    n = len(o)
    return _any_batch(o, w, np.zeros(n), np.full(n, np.inf), *accel_arrays(accel))
