"""Pinhole intrinsics and the 3D-to-2D projection used by the losses and renderer."""
from dataclasses import dataclass

import numpy as np

Z_MIN = 1e-4


class BehindCameraError(ValueError):
    """Raised when a point to be projected has depth at or below ``z_min``."""

    def __init__(self, index, z):
        self.index = int(index)
        self.z = float(z)
        super().__init__(f"point {self.index} is behind the camera (z={self.z:.6g})")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite intrinsics {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    def as_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)

    def with_params(self, params):
        """Copy with (fx, fy, cx, cy) replaced, keeping the image size."""
        fx, fy, cx, cy = (float(p) for p in params)
        return CameraIntrinsics(fx, fy, cx, cy, self.width, self.height)

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }


def _params(mc):
    if isinstance(mc, CameraIntrinsics):
        return mc.as_array()
    arr = np.asarray(mc, dtype=np.float64)
    if arr.shape != (4,):
        raise ValueError(f"intrinsics must be (fx, fy, cx, cy), got shape {arr.shape}")
    return arr


def _check_depth(points, z_min):
    z = points[:, 2]
    bad = np.flatnonzero(~(z > z_min))
    if bad.size:
        raise BehindCameraError(bad[0], z[bad[0]])


def project(points, mc, z_min=Z_MIN):
    """Project camera-space points (n, 3) to pixel coordinates (n, 2).

    ``mc`` is a :class:`CameraIntrinsics` or a raw ``(fx, fy, cx, cy)`` vector
    (the latter is how predicted intrinsics travel through the losses).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got shape {pts.shape}")
    _check_depth(pts, z_min)
    fx, fy, cx, cy = _params(mc)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    return np.stack([fx * x / z + cx, fy * y / z + cy], axis=1)


def project_vjp(points, mc, grad_uv, z_min=Z_MIN):
    """Pull a gradient on projected pixels back to the points and intrinsics.

    Returns ``(grad_points (n, 3), grad_params (4,))`` for a scalar whose
    gradient w.r.t. ``project(points, mc)`` is ``grad_uv``.
    """
    pts = np.asarray(points, dtype=np.float64)
    g = np.asarray(grad_uv, dtype=np.float64)
    if g.shape != (pts.shape[0], 2):
        raise ValueError(f"grad_uv shape {g.shape} does not match {pts.shape[0]} points")
    _check_depth(pts, z_min)
    fx, fy, _, _ = _params(mc)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    gu, gv = g[:, 0], g[:, 1]
    inv_z = 1.0 / z
    grad_pts = np.empty_like(pts)
    grad_pts[:, 0] = gu * fx * inv_z
    grad_pts[:, 1] = gv * fy * inv_z
    grad_pts[:, 2] = -(gu * fx * x + gv * fy * y) * inv_z * inv_z
    grad_params = np.array([
        np.sum(gu * x * inv_z),
        np.sum(gv * y * inv_z),
        np.sum(gu),
        np.sum(gv),
    ])
    return grad_pts, grad_params
