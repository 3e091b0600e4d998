"""Monte Carlo path tracer that records the light Jacobian.

Every path vertex does next-event estimation against the environment map:
a light is picked from the light distribution, a direction is drawn
uniformly inside its nearest-neighbour cell, and the shadow-tested
contribution is added to that light's column. Pixel values are then linear in
the radiance vector, so a forward render is a Jacobian-vector product.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numba as nb
import numpy as np

from .camera import CameraModel
from .envmap import (DEFAULT_FLOOR_WEIGHT, EnvironmentMap, LightSampleDistribution,
                     build_light_distribution, nearest_on_rings, pick_light)
from .scene import AccelStructure, accel_arrays, any_hit, closest_hit

INV_PI = 1.0 / math.pi


@dataclass(frozen=True)
class TraceConfig:
    samples_per_pixel: int = 64
    max_bounces: int = 3
    env_samples_per_vertex: int = 1
    rng_seed: int = 0
    floor_weight: float = DEFAULT_FLOOR_WEIGHT

    def __post_init__(self):
        for name in ("samples_per_pixel", "max_bounces", "env_samples_per_vertex"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ValueError("rng_seed must fit in 64 bits")
        if not 0.0 <= self.floor_weight <= 1.0:
            raise ValueError("floor_weight must lie in [0, 1]")


@dataclass
class LightJacobian:
    """d(pixel, channel) / d(radiance of light j, same channel)."""

    coefficients: np.ndarray  # (P, N, 3)
    coverage: np.ndarray  # (P,) bool
    width: int
    height: int
    seed: int = 0

    @property
    def m_pix(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_lights(self) -> int:
        return self.coefficients.shape[1]

    @property
    def channels(self) -> int:
        return self.coefficients.shape[2]

    def column(self, j: int) -> np.ndarray:
        return self.coefficients[:, j, :].reshape(self.height, self.width, 3)

    def save(self, path) -> None:
        """Raw little-endian float32 array plus a JSON sidecar at ``path.json``."""
        path = Path(path)
        self.coefficients.astype("<f4").tofile(path)
        meta = {"m_pix": self.m_pix, "n_lights": self.n_lights, "channels": self.channels,
                "seed": int(self.seed), "width": self.width, "height": self.height,
                "coverage": np.flatnonzero(self.coverage).tolist()}
        path.with_name(path.name + ".json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, path) -> "LightJacobian":
        path = Path(path)
        meta = json.loads(path.with_name(path.name + ".json").read_text())
        shape = (meta["m_pix"], meta["n_lights"], meta["channels"])
        coeffs = np.fromfile(path, dtype="<f4").reshape(shape).astype(np.float64)
        coverage = np.zeros(shape[0], dtype=bool)
        coverage[meta.get("coverage", [])] = True
        return cls(coeffs, coverage, meta["width"], meta["height"], meta["seed"])


# --------------------------------------------------------------------------
# random numbers: one splitmix64 stream per pixel

@nb.njit(cache=True)
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def pixel_stream(seed, pixel):
    return _mix64(_mix64(np.uint64(seed)) ^ (np.uint64(pixel) * np.uint64(0x9E3779B97F4A7C15)
                                            + np.uint64(0x632BE59BD9B4E019)))


@nb.njit(cache=True)
def next_uniform(state):
    """Advance a splitmix64 state; returns (new_state, u in [0, 1))."""
    state = state + np.uint64(0x9E3779B97F4A7C15)
    return state, (_mix64(state) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


# --------------------------------------------------------------------------
# sampling

@nb.njit(cache=True, error_model="numpy")
def _onb(nx, ny, nz):
    # Duff et al. 2017 branchless frame
    sign = 1.0 if nz >= 0.0 else -1.0
    a = -1.0 / (sign + nz)
    b = nx * ny * a
    return (1.0 + sign * nx * nx * a, sign * b, -sign * nx,
            b, sign + ny * ny * a, -ny)


@nb.njit(cache=True, error_model="numpy")
def cosine_direction(nx, ny, nz, u1, u2):
    r = math.sqrt(u1)
    phi = 2.0 * math.pi * u2
    lx = r * math.cos(phi)
    ly = r * math.sin(phi)
    lz = math.sqrt(max(0.0, 1.0 - u1))
    tx, ty, tz, bx, by, bz = _onb(nx, ny, nz)
    wx = lx * tx + ly * bx + lz * nx
    wy = lx * ty + ly * by + lz * ny
    wz = lx * tz + ly * bz + lz * nz
    inv = 1.0 / math.sqrt(wx * wx + wy * wy + wz * wz)
    return wx * inv, wy * inv, wz * inv


def lambertian_brdf(albedo) -> np.ndarray:
    return np.asarray(albedo, dtype=np.float64) * INV_PI


def cosine_sample_hemisphere(n, u1: float, u2: float) -> tuple[np.ndarray, float]:
    """Cosine-weighted direction about unit normal ``n`` and its solid-angle pdf."""
    n = np.asarray(n, dtype=np.float64)
    w = np.array(cosine_direction(n[0], n[1], n[2], float(u1), float(u2)))
    return w, max(float(w @ n), 0.0) * INV_PI


MAX_CELL_TRIES = 256


@nb.njit(cache=True, error_model="numpy")
def sample_in_cell(j, state, dirs, cap_cos, counts, offsets):
    """Uniform direction in light ``j``'s nearest-neighbour cell, by rejection from a cap.

    Returns (state, wx, wy, wz, ok); ``ok`` is False only if every try missed.
    """
    nx, ny, nz = dirs[j, 0], dirs[j, 1], dirs[j, 2]
    tx, ty, tz, bx, by, bz = _onb(nx, ny, nz)
    for _ in range(MAX_CELL_TRIES):
        state, u1 = next_uniform(state)
        state, u2 = next_uniform(state)
        ct = 1.0 - u1 * (1.0 - cap_cos[j])
        st = math.sqrt(max(0.0, 1.0 - ct * ct))
        phi = 2.0 * math.pi * u2
        lx, ly = st * math.cos(phi), st * math.sin(phi)
        wx = lx * tx + ly * bx + ct * nx
        wy = lx * ty + ly * by + ct * ny
        wz = lx * tz + ly * bz + ct * nz
        if nearest_on_rings(wx, wy, wz, dirs, counts, offsets) == j:
            return state, wx, wy, wz, True
    return state, 0.0, 0.0, 1.0, False


# --------------------------------------------------------------------------
# kernel

@nb.njit(cache=True, error_model="numpy")
def _shade_point(tri, u, v, tris, normals, albedos, geo):
    i0, i1, i2 = tris[tri, 0], tris[tri, 1], tris[tri, 2]
    w = 1.0 - u - v
    nx = w * normals[i0, 0] + u * normals[i1, 0] + v * normals[i2, 0]
    ny = w * normals[i0, 1] + u * normals[i1, 1] + v * normals[i2, 1]
    nz = w * normals[i0, 2] + u * normals[i1, 2] + v * normals[i2, 2]
    ln = math.sqrt(nx * nx + ny * ny + nz * nz)
    if ln > 0.0:
        nx, ny, nz = nx / ln, ny / ln, nz / ln
    else:
        nx, ny, nz = geo[tri, 0], geo[tri, 1], geo[tri, 2]
    r = w * albedos[i0, 0] + u * albedos[i1, 0] + v * albedos[i2, 0]
    g = w * albedos[i0, 1] + u * albedos[i1, 1] + v * albedos[i2, 1]
    b = w * albedos[i0, 2] + u * albedos[i1, 2] + v * albedos[i2, 2]
    return nx, ny, nz, r, g, b


@nb.njit(parallel=True, cache=True, error_model="numpy")
def _trace_kernel(cam, width, height, spp, max_bounces, n_env, seed, eps,
                  tris, normals, albedos, geo,
                  bmin, bmax, right, start, count, order, tv,
                  dirs, counts, offsets, cap_cos, q, floor_weight, share_cdf, cell_omega,
                  J, coverage):
    n_pix = width * height
    n_lights = q.shape[0]
    fx, fy, cx, cy = cam[0], cam[1], cam[2], cam[3]
    ox, oy, oz = cam[13], cam[14], cam[15]
    norm = 1.0 / (spp * n_env)
    for pix in nb.prange(n_pix):
        state = pixel_stream(seed, pix)
        py = pix // width
        px = pix - py * width
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
            px_, py_, pz_ = ox + t * dx, oy + t * dy, oz + t * dz
            nx, ny, nz, rr, rg, rb = _shade_point(tri, bu, bv, tris, normals, albedos, geo)
            t0, t1, t2 = 1.0, 1.0, 1.0
            for bounce in range(max_bounces):
                sx, sy, sz = px_ + eps * gx, py_ + eps * gy, pz_ + eps * gz
                for _ in range(n_env):
                    state, ul = next_uniform(state)
                    j = pick_light(ul, floor_weight, share_cdf, n_lights)
                    state, wx, wy, wz, ok = sample_in_cell(j, state, dirs, cap_cos, counts, offsets)
                    if not ok:
                        continue
                    cos_s = wx * nx + wy * ny + wz * nz
                    if cos_s <= 0.0 or wx * gx + wy * gy + wz * gz <= 0.0:
                        continue
                    if any_hit(sx, sy, sz, wx, wy, wz, 0.0, np.inf,
                               bmin, bmax, right, start, count, order, tv):
                        continue
                    w = cos_s * cell_omega[j] / q[j] * INV_PI * norm
                    J[pix, j, 0] += t0 * rr * w
                    J[pix, j, 1] += t1 * rg * w
                    J[pix, j, 2] += t2 * rb * w
                if bounce + 1 == max_bounces:
                    break
                state, ua = next_uniform(state)
                state, ub = next_uniform(state)
                dx, dy, dz = cosine_direction(nx, ny, nz, ua, ub)
                if dx * gx + dy * gy + dz * gz <= 0.0:
                    break
                # Lambertian with cosine sampling: f cos / pdf == albedo
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
                px_, py_, pz_ = sx + t * dx, sy + t * dy, sz + t * dz
                nx, ny, nz, rr, rg, rb = _shade_point(tri, bu, bv, tris, normals, albedos, geo)
        coverage[pix] = covered


@nb.njit(parallel=True, cache=True)
def _contract(J, lam, out):
    n_pix, n_lights, n_ch = J.shape
    for i in nb.prange(n_pix):
        for c in range(n_ch):
            acc = 0.0
            for j in range(n_lights):
                acc += J[i, j, c] * lam[j, c]
            out[i, c] = acc


def light_tables(env: EnvironmentMap) -> tuple:
    return (np.ascontiguousarray(env.directions), env.counts, env.offsets,
            np.ascontiguousarray(env.cell_cap_cosines()))


def trace_jacobian(accel: AccelStructure, env: EnvironmentMap, camera: CameraModel,
                   cfg: TraceConfig, dist: LightSampleDistribution | None = None) -> LightJacobian:
    if camera.n_pixels == 0:
        raise ValueError("zero-area image")
    if env.n_lights < 1:
        raise ValueError("environment map has no lights")
    if dist is None:
        dist = build_light_distribution(env, cfg.floor_weight)
    if dist.n_lights != env.n_lights:
        raise ValueError("light distribution does not match the environment map")
    mesh = accel.mesh
    J = np.zeros((camera.n_pixels, env.n_lights, 3))
    coverage = np.zeros(camera.n_pixels, dtype=np.bool_)
    _trace_kernel(camera.params(), camera.width, camera.height, int(cfg.samples_per_pixel),
                  int(cfg.max_bounces), int(cfg.env_samples_per_vertex),
                  np.uint64(cfg.rng_seed), accel.shadow_eps,
                  mesh.triangles, mesh.normals, mesh.albedos, accel.geo_normals,
                  *accel_arrays(accel), *light_tables(env),
                  *dist.kernel_tables(), env.cell_solid_angles(), J, coverage)
    if not np.all(np.isfinite(J)):
        raise FloatingPointError("non-finite Jacobian entry")
    assert J.min() >= 0.0
    return LightJacobian(J, coverage, camera.width, camera.height, int(cfg.rng_seed))


def apply_jacobian(J: LightJacobian, lam) -> np.ndarray:
    """Image (H, W, 3) with pixel i, channel c = sum_j J[i, j, c] * lam[j, c]."""
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1 and J.channels == 1:
        lam = lam[:, None]
    if lam.shape != (J.n_lights, J.channels):
        raise ValueError(f"radiance shape {lam.shape} does not match Jacobian "
                         f"({J.n_lights}, {J.channels})")
    out = np.empty((J.m_pix, J.channels))
    _contract(np.ascontiguousarray(J.coefficients), np.ascontiguousarray(lam), out)
    return out.reshape(J.height, J.width, J.channels)


def render(accel: AccelStructure, env: EnvironmentMap, camera: CameraModel, cfg: TraceConfig,
           dist: LightSampleDistribution | None = None) -> np.ndarray:
    return apply_jacobian(trace_jacobian(accel, env, camera, cfg, dist), env.radiance)


def set_threads(n: int | None) -> int:
    """Cap tracer parallelism; returns the thread count in effect."""
    if n:
        nb.set_num_threads(max(1, min(int(n), nb.config.NUMBA_NUM_THREADS)))
    return nb.get_num_threads()


def config_dict(cfg: TraceConfig) -> dict:
    return asdict(cfg)
