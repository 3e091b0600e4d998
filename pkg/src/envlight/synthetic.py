"""Synthetic scenes and a spherical-area-light reference renderer.

The reference renderer deliberately uses a lighting model the environment
map cannot represent exactly: finite-distance emissive spheres.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .camera import CameraModel
from .scene import AccelStructure, TriangleMesh, accel_arrays, any_hit, closest_hit
from .tracer import (INV_PI, _shade_point, cosine_direction, next_uniform, pixel_stream)


def quad_grid(origin, edge_u, edge_v, normal, albedo, n: int = 4):
    """Planar quad split into an n x n grid. Winding agrees with ``normal``."""
    origin, edge_u, edge_v = (np.asarray(a, dtype=np.float64) for a in (origin, edge_u, edge_v))
    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    s = np.linspace(0.0, 1.0, n + 1)
    uu, vv = np.meshgrid(s, s, indexing="ij")
    verts = origin + uu.reshape(-1, 1) * edge_u + vv.reshape(-1, 1) * edge_v
    tris = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b = (i + 1) * (n + 1) + j
            tris += [(a, b, b + 1), (a, b + 1, a + 1)]
    tris = np.asarray(tris)
    if np.dot(np.cross(edge_u, edge_v), normal) < 0:
        tris = tris[:, ::-1]
    albedo = np.broadcast_to(np.asarray(albedo, dtype=np.float64), verts.shape)
    return verts, np.tile(normal, (len(verts), 1)), albedo.copy(), tris


def merge(parts) -> TriangleMesh:
    verts, norms, albs, tris = [], [], [], []
    base = 0
    for v, n, a, t in parts:
        verts.append(v)
        norms.append(n)
        albs.append(a)
        tris.append(np.asarray(t) + base)
        base += len(v)
    return TriangleMesh(np.concatenate(verts), np.concatenate(norms), np.concatenate(albs),
                        np.concatenate(tris))


def floor_plane(half_size: float = 50.0, albedo=(0.5, 0.5, 0.5)) -> TriangleMesh:
    s = half_size
    return merge([quad_grid((-s, -s, 0.0), (2 * s, 0, 0), (0, 2 * s, 0), (0, 0, 1), albedo, n=1)])


def box_scene(wall_height: float = 0.35, grid: int = 6) -> TriangleMesh:
    """Open-top 2 x 2 m box with coloured inner walls and a block on the floor."""
    h = wall_height
    parts = [
        quad_grid((-1, -1, 0), (2, 0, 0), (0, 2, 0), (0, 0, 1), (0.70, 0.70, 0.65), grid),
        quad_grid((-1, 1, 0), (2, 0, 0), (0, 0, h), (0, -1, 0), (0.65, 0.35, 0.30), grid),
        quad_grid((-1, -1, 0), (2, 0, 0), (0, 0, h), (0, 1, 0), (0.60, 0.60, 0.60), grid),
        quad_grid((-1, -1, 0), (0, 2, 0), (0, 0, h), (1, 0, 0), (0.30, 0.55, 0.35), grid),
        quad_grid((1, -1, 0), (0, 2, 0), (0, 0, h), (-1, 0, 0), (0.35, 0.40, 0.65), grid),
    ]
    # block: 0.4 x 0.4 x 0.4 at (-0.25, 0.15)
    x0, y0, s = -0.45, -0.05, 0.4
    parts += [
        quad_grid((x0, y0, s), (s, 0, 0), (0, s, 0), (0, 0, 1), (0.80, 0.75, 0.40), 2),
        quad_grid((x0, y0, 0), (s, 0, 0), (0, 0, s), (0, -1, 0), (0.80, 0.75, 0.40), 2),
        quad_grid((x0, y0 + s, 0), (s, 0, 0), (0, 0, s), (0, 1, 0), (0.80, 0.75, 0.40), 2),
        quad_grid((x0, y0, 0), (0, s, 0), (0, 0, s), (-1, 0, 0), (0.80, 0.75, 0.40), 2),
        quad_grid((x0 + s, y0, 0), (0, s, 0), (0, 0, s), (1, 0, 0), (0.80, 0.75, 0.40), 2),
    ]
    return merge(parts)


def closed_box(half: float = 1.0) -> TriangleMesh:
    """Cube with all faces pointing inward (no aperture)."""
    a = half
    parts = [
        quad_grid((-a, -a, -a), (2 * a, 0, 0), (0, 2 * a, 0), (0, 0, 1), 0.8, 1),
        quad_grid((-a, -a, a), (2 * a, 0, 0), (0, 2 * a, 0), (0, 0, -1), 0.8, 1),
        quad_grid((-a, -a, -a), (2 * a, 0, 0), (0, 0, 2 * a), (0, 1, 0), 0.8, 1),
        quad_grid((-a, a, -a), (2 * a, 0, 0), (0, 0, 2 * a), (0, -1, 0), 0.8, 1),
        quad_grid((-a, -a, -a), (0, 2 * a, 0), (0, 0, 2 * a), (1, 0, 0), 0.8, 1),
        quad_grid((a, -a, -a), (0, 2 * a, 0), (0, 0, 2 * a), (-1, 0, 0), 0.8, 1),
    ]
    return merge(parts)


def box_camera(width: int = 160, height: int = 120) -> CameraModel:
    return CameraModel.look_at((0.0, -1.6, 2.4), (0.0, 0.05, 0.0), width=width, height=height,
                               fov_y_deg=48.0)


def direction_from_angles(elevation_deg: float, azimuth_deg: float) -> np.ndarray:
    el, az = math.radians(elevation_deg), math.radians(azimuth_deg)
    return np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])


@dataclass(frozen=True)
class SphereLight:
    center: np.ndarray
    radius: float
    radiance: np.ndarray  # RGB

    @classmethod
    def at_bearing(cls, elevation_deg, azimuth_deg, distance=8.0, radius=0.6,
                   radiance=(200.0, 200.0, 200.0), target=(0.0, 0.0, 0.0)):
        c = np.asarray(target, dtype=np.float64) + distance * direction_from_angles(
            elevation_deg, azimuth_deg)
        return cls(c, float(radius), np.asarray(radiance, dtype=np.float64))


@nb.njit(cache=True, error_model="numpy")
def _sample_sphere(px, py, pz, cx, cy, cz, radius, u1, u2):
    """Uniform cone sample towards a sphere: (wx, wy, wz, t_max, inv_pdf); inv_pdf 0 if inside."""
    lx, ly, lz = cx - px, cy - py, cz - pz
    d2 = lx * lx + ly * ly + lz * lz
    if d2 <= radius * radius:
        return 0.0, 0.0, 1.0, 0.0, 0.0
    d = math.sqrt(d2)
    lx, ly, lz = lx / d, ly / d, lz / d
    cos_max = math.sqrt(1.0 - radius * radius / d2)
    ct = 1.0 - u1 * (1.0 - cos_max)
    st = math.sqrt(max(0.0, 1.0 - ct * ct))
    phi = 2.0 * math.pi * u2
    sign = 1.0 if lz >= 0.0 else -1.0
    a = -1.0 / (sign + lz)
    b = lx * ly * a
    tx, ty, tz = 1.0 + sign * lx * lx * a, sign * b, -sign * lx
    bx, by, bz = b, sign + ly * ly * a, -ly
    ax, ay = st * math.cos(phi), st * math.sin(phi)
    wx = ax * tx + ay * bx + ct * lx
    wy = ax * ty + ay * by + ct * ly
    wz = ax * tz + ay * bz + ct * lz
    # distance to the near sphere surface along w
    proj = d * ct
    disc = max(0.0, radius * radius - (d2 - proj * proj))
    t_hit = proj - math.sqrt(disc)
    return wx, wy, wz, t_hit, 2.0 * math.pi * (1.0 - cos_max)


@nb.njit(parallel=True, cache=True, error_model="numpy")
def _sphere_kernel(cam, width, height, spp, max_bounces, seed, eps,
                   tris, normals, albedos, geo, bmin, bmax, right, start, count, order, tv,
                   centers, radii, emission, img, coverage):
    n_pix = width * height
    n_lights = centers.shape[0]
    fx, fy, cx, cy = cam[0], cam[1], cam[2], cam[3]
    ox, oy, oz = cam[13], cam[14], cam[15]
    for pix in nb.prange(n_pix):
        state = pixel_stream(seed, pix)
        py = pix // width
        px = pix - py * width
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        covered = False
        for s in range(spp):
            state, u1 = next_uniform(state)
            state, u2 = next_uniform(state)
            cxv = (px + u1 - cx) / fx
            cyv = (py + u2 - cy) / fy
            inv = 1.0 / math.sqrt(cxv * cxv + cyv * cyv + 1.0)
            cxv *= inv
            cyv *= inv
            czv = inv
            dx = cam[4] * cxv + cam[5] * cyv + cam[6] * czv
            dy = cam[7] * cxv + cam[8] * cyv + cam[9] * czv
            dz = cam[10] * cxv + cam[11] * cyv + cam[12] * czv
            tri, t, bu, bv = closest_hit(ox, oy, oz, dx, dy, dz, 0.0, np.inf,
                                         bmin, bmax, right, start, count, order, tv)
            if tri < 0:
                continue
            gx, gy, gz = geo[tri, 0], geo[tri, 1], geo[tri, 2]
            if dx * gx + dy * gy + dz * gz >= 0.0:
                continue
            covered = True
            qx, qy, qz = ox + t * dx, oy + t * dy, oz + t * dz
            nx, ny, nz, rr, rg, rb = _shade_point(tri, bu, bv, tris, normals, albedos, geo)
            t0, t1, t2 = 1.0, 1.0, 1.0
            for bounce in range(max_bounces):
                sx, sy, sz = qx + eps * gx, qy + eps * gy, qz + eps * gz
                state, ul = next_uniform(state)
                state, ua = next_uniform(state)
                state, ub = next_uniform(state)
                li = min(int(ul * n_lights), n_lights - 1)
                wx, wy, wz, tmax, inv_pdf = _sample_sphere(
                    sx, sy, sz, centers[li, 0], centers[li, 1], centers[li, 2], radii[li], ua, ub)
                cos_s = wx * nx + wy * ny + wz * nz
                if inv_pdf > 0.0 and cos_s > 0.0 and wx * gx + wy * gy + wz * gz > 0.0:
                    if not any_hit(sx, sy, sz, wx, wy, wz, 0.0, tmax,
                                   bmin, bmax, right, start, count, order, tv):
                        w = cos_s * inv_pdf * n_lights * INV_PI
                        acc0 += t0 * rr * w * emission[li, 0]
                        acc1 += t1 * rg * w * emission[li, 1]
                        acc2 += t2 * rb * w * emission[li, 2]
                if bounce + 1 == max_bounces:
                    break
                state, ua = next_uniform(state)
                state, ub = next_uniform(state)
                dx, dy, dz = cosine_direction(nx, ny, nz, ua, ub)
                if dx * gx + dy * gy + dz * gz <= 0.0:
                    break
                t0 *= rr
                t1 *= rg
                t2 *= rb
                tri, t, bu, bv = closest_hit(sx, sy, sz, dx, dy, dz, 0.0, np.inf,
                                             bmin, bmax, right, start, count, order, tv)
                if tri < 0:
                    break
                gx, gy, gz = geo[tri, 0], geo[tri, 1], geo[tri, 2]
                if dx * gx + dy * gy + dz * gz >= 0.0:
                    break
                qx, qy, qz = sx + t * dx, sy + t * dy, sz + t * dz
                nx, ny, nz, rr, rg, rb = _shade_point(tri, bu, bv, tris, normals, albedos, geo)
        img[pix, 0] = acc0 / spp
        img[pix, 1] = acc1 / spp
        img[pix, 2] = acc2 / spp
        coverage[pix] = covered


def render_sphere_lights(accel: AccelStructure, lights: list[SphereLight], camera: CameraModel,
                         spp: int = 256, max_bounces: int = 3, seed: int = 12345):
    """Path-traced image (H, W, 3) and coverage (H, W) lit only by emissive spheres."""
    mesh = accel.mesh
    centers = np.asarray([l.center for l in lights], dtype=np.float64).reshape(-1, 3)
    radii = np.asarray([l.radius for l in lights], dtype=np.float64)
    emission = np.asarray([l.radiance for l in lights], dtype=np.float64).reshape(-1, 3)
    img = np.zeros((camera.n_pixels, 3))
    coverage = np.zeros(camera.n_pixels, dtype=np.bool_)
    _sphere_kernel(camera.params(), camera.width, camera.height, int(spp), int(max_bounces),
                   np.uint64(seed), accel.shadow_eps, mesh.triangles, mesh.normals, mesh.albedos,
                   accel.geo_normals, *accel_arrays(accel), centers, radii, emission,
                   img, coverage)
    return img.reshape(camera.height, camera.width, 3), coverage.reshape(camera.shape)


def angular_mass_fraction(env, bearing, max_angle_deg: float = 30.0) -> float:
    """Share of total radiance on directions within ``max_angle_deg`` of ``bearing``."""
    b = np.asarray(bearing, dtype=np.float64)
    b = b / np.linalg.norm(b)
    power = env.radiance.sum(axis=1)
    total = power.sum()
    if total <= 0:
        return 0.0
    near = env.directions @ b >= math.cos(math.radians(max_angle_deg))
    return float(power[near].sum() / total)


def write_box_fixture(out_dir, elevation_deg: float = 55.0, azimuth_deg: float = 30.0,
                      distance: float = 8.0, radius: float = 0.6, spp: int = 1024,
                      width: int = 160, height: int = 120, seed: int = 12345, rings: int = 9):
    """Write box mesh, sphere-lit reference and a scene config into ``out_dir``.

    Returns the config path. ``truth.json`` records the light that made the reference.
    """
    import json
    from pathlib import Path

    from .io import save_ply, write_pfm
    from .scene import build_accel

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = box_scene()
    camera = box_camera(width, height)
    light = SphereLight.at_bearing(elevation_deg, azimuth_deg, distance, radius)
    img, _ = render_sphere_lights(build_accel(mesh), [light], camera, spp=spp, seed=seed)
    save_ply(out / "box.ply", mesh)
    write_pfm(out / "reference.pfm", img)
    (out / "truth.json").write_text(json.dumps({
        "light_center": light.center.tolist(), "light_radius": light.radius,
        "light_radiance": light.radiance.tolist(),
        "bearing": direction_from_angles(elevation_deg, azimuth_deg).tolist(),
        "elevation_deg": elevation_deg, "azimuth_deg": azimuth_deg, "spp": spp, "seed": seed,
    }, indent=2))
    config = {"mesh": "box.ply", "views": [{"image": "reference.pfm", "camera": camera.to_json()}],
              "rings": rings, "render_spp": 1024, "trace": {}, "objective": {}}
    path = out / "scene.json"
    path.write_text(json.dumps(config, indent=2))
    return path
