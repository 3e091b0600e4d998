"""Ring-discretized environment light.

Directions live on rings of constant polar angle about world +z. Radiance
lookup is nearest-direction, so each direction owns its spherical Voronoi
cell; the tracer samples those cells and weights by their exact areas.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numba as nb
import numpy as np
from scipy.spatial import SphericalVoronoi

DEFAULT_FLOOR_WEIGHT = 0.1


def ring_counts(ring_count: int) -> np.ndarray:
    """Number of directions on each ring; single points at the poles."""
    if int(ring_count) != ring_count or ring_count < 2:
        raise ValueError(f"ring_count must be an integer >= 2, got {ring_count!r}")
    R = int(ring_count)
    counts = np.ones(R, dtype=np.int64)
    for i in range(1, R - 1):
        # mirror index so both hemispheres evaluate identical floats
        m = min(i, R - 1 - i)
        # 2*pi*sin(theta) / (pi/(R-1)), nudged so exact integers stay put
        ratio = 2.0 * (R - 1) * math.sin(math.pi * m / (R - 1))
        counts[i] = max(1, math.ceil(ratio - 1e-9))
    return counts


@dataclass
class EnvironmentMap:
    ring_count: int
    directions: np.ndarray  # (N, 3)
    ring_index: np.ndarray  # (N,)
    radiance: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64)
        self.ring_index = np.asarray(self.ring_index, dtype=np.int64)
        self.radiance = np.asarray(self.radiance, dtype=np.float64)
        if self.radiance.shape != self.directions.shape:
            raise ValueError("radiance must have one RGB triple per direction")
        if np.any(self.radiance < 0) or not np.all(np.isfinite(self.radiance)):
            raise ValueError("radiance must be finite and nonnegative")

    @property
    def n_lights(self) -> int:
        return len(self.directions)

    @property
    def counts(self) -> np.ndarray:
        return ring_counts(self.ring_count)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)]).astype(np.int64)

    def with_radiance(self, radiance) -> "EnvironmentMap":
        return EnvironmentMap(self.ring_count, self.directions.copy(), self.ring_index.copy(),
                              np.array(radiance, dtype=np.float64).reshape(self.directions.shape))

    def cell_solid_angles(self) -> np.ndarray:
        return cell_solid_angles(self.ring_count)

    def cell_cap_cosines(self) -> np.ndarray:
        return voronoi_cells(self.ring_count)[1]

    def to_json(self) -> dict:
        return {
            "ring_count": int(self.ring_count),
            "directions": self.directions.tolist(),
            "radiance": self.radiance.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EnvironmentMap":
        env = discretize_sphere(int(doc["ring_count"]))
        dirs = np.asarray(doc["directions"], dtype=np.float64)
        if dirs.shape != env.directions.shape or not np.allclose(dirs, env.directions, atol=1e-9):
            raise ValueError("stored directions do not match the ring discretization")
        return env.with_radiance(np.asarray(doc["radiance"], dtype=np.float64))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path) -> "EnvironmentMap":
        with open(path) as f:
            return cls.from_json(json.load(f))


def discretize_sphere(ring_count: int) -> EnvironmentMap:
    counts = ring_counts(ring_count)
    R = len(counts)
    dirs, rings = [], []
    for i, n in enumerate(counts):
        theta = math.pi * i / (R - 1)
        st, ct = math.sin(theta), math.cos(theta)
        if i == 0:
            st, ct = 0.0, 1.0
        elif i == R - 1:
            st, ct = 0.0, -1.0
        elif 2 * i == R - 1:
            ct = 0.0
        for k in range(n):
            phi = 2.0 * math.pi * k / n
            dirs.append((st * math.cos(phi), st * math.sin(phi), ct))
            rings.append(i)
    dirs = np.asarray(dirs, dtype=np.float64)
    # southern rings are exact mirrors of the northern ones
    for i in range(R // 2):
        j = R - 1 - i
        a = np.flatnonzero(np.asarray(rings) == i)
        b = np.flatnonzero(np.asarray(rings) == j)
        dirs[b, :2] = dirs[a, :2]
        dirs[b, 2] = -dirs[a, 2]
    return EnvironmentMap(R, dirs, np.asarray(rings), np.zeros_like(dirs))


@lru_cache(maxsize=None)
def voronoi_cells(ring_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Per direction: (Voronoi cell solid angle, cosine of a cap radius covering the cell).

    The cell is convex and smaller than a hemisphere, so its farthest point
    from the generator is a vertex.
    """
    env = discretize_sphere(ring_count)
    if env.n_lights == 2:
        areas = np.full(2, 2.0 * math.pi)
        caps = np.zeros(2)
    else:
        sv = SphericalVoronoi(env.directions, radius=1.0, center=np.zeros(3), threshold=1e-9)
        areas = sv.calculate_areas()
        caps = np.array([float(np.min(sv.vertices[region] @ d))
                         for region, d in zip(sv.regions, env.directions)])
    caps = np.maximum(caps - 1e-9, -1.0)
    areas.setflags(write=False)
    caps.setflags(write=False)
    return areas, caps


def cell_solid_angles(ring_count: int) -> np.ndarray:
    """Solid angle of each direction's nearest-neighbour cell. Sums to 4*pi."""
    return voronoi_cells(ring_count)[0]


def nearest_direction(env: EnvironmentMap, omega) -> int:
    """Index of the stored direction with the largest dot product (first on ties)."""
    w = np.asarray(omega, dtype=np.float64).reshape(3)
    dots = env.directions[:, 0] * w[0] + env.directions[:, 1] * w[1] + env.directions[:, 2] * w[2]
    return int(np.argmax(dots))


def radiance(env: EnvironmentMap, omega) -> np.ndarray:
    return env.radiance[nearest_direction(env, omega)].copy()


@nb.njit(cache=True, error_model="numpy")
def nearest_on_rings(wx, wy, wz, dirs, counts, offsets):
    """Nearest stored direction, checking only rings near omega's polar angle."""
    R = counts.shape[0]
    dtheta = math.pi / (R - 1)
    theta = math.acos(min(1.0, max(-1.0, wz)))
    phi = math.atan2(wy, wx)
    if phi < 0.0:
        phi += 2.0 * math.pi
    center = int(math.floor(theta / dtheta + 0.5))
    best = -1
    best_dot = -2.0
    for ring in range(max(0, center - 2), min(R, center + 3)):
        n = counts[ring]
        if n <= 3:
            k0, k1 = 0, n
        else:
            kc = int(math.floor(phi * n / (2.0 * math.pi)))
            k0, k1 = kc - 1, kc + 3
        for kk in range(k0, k1):
            k = kk % n
            j = offsets[ring] + k
            d = dirs[j, 0] * wx + dirs[j, 1] * wy + dirs[j, 2] * wz
            if d > best_dot or (d == best_dot and j < best):
                best_dot = d
                best = j
    return best


@dataclass(frozen=True)
class LightSampleDistribution:
    """Selection probabilities ``q`` plus the tables the tracer samples with.

    ``q`` is a mixture of a uniform floor and power-proportional shares. The
    tracer picks the mixture component first, so the uniform part always
    maps a given random number to the same light across re-traces.
    """

    probabilities: np.ndarray
    cdf: np.ndarray
    floor_weight: float = 1.0
    share_cdf: np.ndarray | None = None  # None: the proportional part is uniform too

    @property
    def n_lights(self) -> int:
        return len(self.probabilities)

    @classmethod
    def from_weights(cls, weights) -> "LightSampleDistribution":
        q = _normalized(weights)
        return cls(q, _cdf(q), 0.0, _cdf(q))

    def kernel_tables(self) -> tuple:
        share = self.share_cdf if self.share_cdf is not None else np.empty(0)
        return self.probabilities, float(self.floor_weight), share


def _normalized(weights) -> np.ndarray:
    q = np.asarray(weights, dtype=np.float64)
    return q / q.sum()


def _cdf(q) -> np.ndarray:
    cdf = np.cumsum(q)
    cdf[-1] = 1.0
    return cdf


def build_light_distribution(env: EnvironmentMap,
                             floor_weight: float = DEFAULT_FLOOR_WEIGHT) -> LightSampleDistribution:
    if not 0.0 <= floor_weight <= 1.0:
        raise ValueError("floor_weight must lie in [0, 1]")
    n = env.n_lights
    power = env.radiance.sum(axis=1)
    total = power.sum()
    if total <= 0.0:
        q = np.full(n, 1.0 / n)
        return LightSampleDistribution(q, _cdf(q), 1.0, None)
    share = power / total
    q = _normalized((1.0 - floor_weight) * share + floor_weight / n)
    return LightSampleDistribution(q, _cdf(q), float(floor_weight), _cdf(share))


@nb.njit(cache=True)
def sample_cdf(cdf, u):
    """First index with cdf > u (inversion sampling)."""
    lo = 0
    hi = cdf.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cdf[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@nb.njit(cache=True)
def pick_light(u, floor_weight, share_cdf, n):
    """Draw a light from the floor/proportional mixture with one uniform."""
    if u < floor_weight or share_cdf.shape[0] == 0:
        v = u / floor_weight if u < floor_weight else u
        return min(int(v * n), n - 1)
    return sample_cdf(share_cdf, (u - floor_weight) / (1.0 - floor_weight))


def sample_light(dist: LightSampleDistribution, u: float) -> tuple[int, float]:
    j = int(sample_cdf(dist.cdf, float(u)))
    return j, float(dist.probabilities[j])


def equirect_image(env: EnvironmentMap, height: int = 64) -> np.ndarray:
    """Nearest-neighbour splat onto a (height, 2*height, 3) latitude-longitude image.

    Row 0 is the +z pole; column 0 is azimuth 0.
    """
    width = 2 * height
    theta = (np.arange(height) + 0.5) / height * np.pi
    phi = (np.arange(width) + 0.5) / width * 2.0 * np.pi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    w = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)
    idx = np.argmax(w.reshape(-1, 3) @ env.directions.T, axis=1)
    return env.radiance[idx].reshape(height, width, 3)
