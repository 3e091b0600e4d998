"""Pinhole camera with a world-from-camera pose.

Camera frame follows the usual vision convention: +x right, +y down,
+z along the optical axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # world-from-camera, (3, 3)
    translation: np.ndarray  # camera centre in world, (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera resolution must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def params(self) -> np.ndarray:
        """Flat float64 vector (fx, fy, cx, cy, R row-major, t) for the kernels."""
        return np.concatenate([[self.fx, self.fy, self.cx, self.cy],
                               self.rotation.ravel(), self.translation])

    def pixel_rays(self, offset: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
        """World-space rays through every pixel at sub-pixel ``offset``, row-major."""
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        d = np.stack([(xs + offset - self.cx) / self.fx,
                      (ys + offset - self.cy) / self.fy,
                      np.ones(xs.shape)], axis=-1).reshape(-1, 3)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d = d @ self.rotation.T
        o = np.broadcast_to(self.translation, d.shape).copy()
        return o, d

    def project(self, points) -> np.ndarray:
        """World points to pixel coordinates (x, y); points behind the camera give nan."""
        p = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.translation) @ self.rotation
        z = np.where(p[:, 2] > 0, p[:, 2], np.nan)
        return np.stack([self.fx * p[:, 0] / z + self.cx, self.fy * p[:, 1] / z + self.cy], axis=1)

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "CameraModel":
        return cls(float(doc["fx"]), float(doc["fy"]), float(doc["cx"]), float(doc["cy"]),
                   int(doc["width"]), int(doc["height"]),
                   np.asarray(doc["rotation"]), np.asarray(doc["translation"]))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), width=160, height=120,
                fov_y_deg=50.0) -> "CameraModel":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        up = np.asarray(up, dtype=np.float64)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [0.0, 1.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z], axis=1)
        f = 0.5 * height / np.tan(np.radians(fov_y_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height, R, eye)
