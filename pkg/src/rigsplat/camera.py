"""Pinhole camera model.

Camera frame: +x right, +y down, +z forward. A point is visible when
its camera-frame z exceeds the near plane. Pixel centers sit on
integer coordinates, so the principal point of a W x H image is
((W - 1) / 2, (H - 1) / 2).
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Camera:
    world_to_camera: np.ndarray  # (4, 4) rigid transform
    fov_x: float  # radians
    fov_y: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.world_to_camera.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")

    @property
    def tan_fovx(self):
        return float(np.tan(0.5 * self.fov_x))

    @property
    def tan_fovy(self):
        return float(np.tan(0.5 * self.fov_y))

    @property
    def focal_x(self):
        return self.width / (2.0 * self.tan_fovx)

    @property
    def focal_y(self):
        return self.height / (2.0 * self.tan_fovy)

    @property
    def principal(self):
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def translation(self):
        return self.world_to_camera[:3, 3]

    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points):
        """World points (N, 3) -> camera frame (N, 3)."""
        return points @ self.rotation.T + self.translation

    def orbited(self, azimuth, elevation, pivot):
        """Camera rotated about a world-space pivot point.

        Azimuth rotates about the world y axis, elevation about the
        world x axis, both in radians. Zero offsets reproduce the
        original transform bit for bit.
        """
        pivot = np.asarray(pivot, dtype=np.float64)
        ca, sa = np.cos(azimuth), np.sin(azimuth)
        ce, se = np.cos(elevation), np.sin(elevation)
        ry = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
        rx = np.array([[1.0, 0.0, 0.0], [0.0, ce, -se], [0.0, se, ce]])
        rot = np.eye(4)
        rot[:3, :3] = ry @ rx
        shift = np.eye(4)
        shift[:3, 3] = -pivot
        unshift = np.eye(4)
        unshift[:3, 3] = pivot
        w2c = self.world_to_camera @ unshift @ rot @ shift
        return Camera(
            w2c, self.fov_x, self.fov_y, self.width, self.height, self.near, self.far
        )


def look_at(eye, target, up, fov_x, fov_y, width, height, near=0.01, far=100.0):
    """Camera at eye looking toward target (y-down image convention)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise ValueError("up vector is parallel to the viewing direction")
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ eye
    return Camera(w2c, fov_x, fov_y, width, height, near, far)
