"""Camera model, back-projection and the silhouette lower bound on SDF values.

Image coordinates ``u`` live in the canonical ``[-1, 1]`` square (x right,
y down).  Depth ``z`` is the camera-frame z coordinate, with the near plane
at ``z = 1``.  A camera's ``(R, t)`` maps camera-frame points into the object
frame, ``x_obj = R @ x_cam + t``, so ``t`` is also the camera center in object
coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NEAR_PLANE = 1.0
MODELS = ("perspective", "orthographic")


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    """Pinhole or orthographic camera with its principal point at the origin.

    ``focal`` is expressed in normalized-image units; ``focal = 1`` gives the
    plain homogeneous back-projection ``z * [u; 1]``.  For orthographic
    cameras it acts as an image scale.
    """

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 64
    height: int = 64
    focal: float = 1.0
    model: str = "perspective"

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        self.focal = float(self.focal)
        if self.model not in MODELS:
            raise CameraError(f"unknown camera model {self.model!r}")
        if self.width < 1 or self.height < 1:
            raise CameraError("image size must be positive")
        if not self.focal > 0:
            raise CameraError("focal must be positive")
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-9):
            raise CameraError("rotation is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-9:
            raise CameraError("rotation must have det +1")

    @property
    def principal_point(self) -> np.ndarray:
        return np.zeros(2)

    @property
    def center(self) -> np.ndarray:
        """Camera center in the object frame."""
        return self.t.copy()

    @property
    def distance(self) -> float:
        """Distance from the camera center to the object-frame origin."""
        return float(np.linalg.norm(self.t))

    @classmethod
    def look_at(cls, position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), **kwargs) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise CameraError("up vector is parallel to the viewing direction")
        right /= norm
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=1)
        return cls(R=R, t=position, **kwargs)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "focal": self.focal,
            "R": self.R.reshape(-1).tolist(),
            "t": self.t.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            R = np.asarray(d["R"], dtype=np.float64)
            t = np.asarray(d["t"], dtype=np.float64)
            if R.size != 9 or t.size != 3:
                raise CameraError("R needs 9 entries and t needs 3")
            return cls(
                R=R.reshape(3, 3),
                t=t,
                width=d["width"],
                height=d["height"],
                focal=d.get("focal", 1.0),
                model=d.get("model", "perspective"),
            )
        except (KeyError, TypeError) as e:
            raise CameraError(f"invalid camera description: {e}") from e

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Camera":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise CameraError(f"{path}: {e}") from e
        return cls.from_dict(d)

    def rays(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Object-frame rays ``(origins, directions)`` with ``x_obj = o + z * d``."""
        u = np.asarray(u, dtype=np.float64)
        uc = u / self.focal
        ones = np.ones(u.shape[:-1] + (1,))
        if self.model == "perspective":
            d_cam = np.concatenate([uc, ones], axis=-1)
            o = np.broadcast_to(self.t, d_cam.shape).copy()
        else:
            d_cam = np.broadcast_to(np.array([0.0, 0.0, 1.0]), u.shape[:-1] + (3,))
            o = np.concatenate([uc, np.zeros_like(ones)], axis=-1) @ self.R.T + self.t
        return o, d_cam @ self.R.T


def pixel_to_normalized(ix, camera: Camera) -> np.ndarray:
    """Map integer pixel indices ``(col, row)`` to pixel-center coordinates."""
    ix = np.asarray(ix)
    size = np.array([camera.width, camera.height])
    if np.any(ix < 0) or np.any(ix >= size):
        raise IndexError("pixel index out of range")
    return (ix + 0.5) * 2.0 / size - 1.0


def normalized_to_pixel(u, camera: Camera) -> np.ndarray:
    size = np.array([camera.width, camera.height])
    return np.rint((np.asarray(u) + 1.0) * size / 2.0 - 0.5).astype(np.int64)


def pixel_grid(camera: Camera) -> np.ndarray:
    """Normalized coordinates of every pixel center, shape ``(H, W, 2)``."""
    cols, rows = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    return pixel_to_normalized(np.stack([cols, rows], axis=-1), camera)


def backproject(u, z, camera: Camera) -> np.ndarray:
    """Camera-frame 3D point of pixel ``u`` at depth ``z``."""
    u = np.asarray(u, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(z < NEAR_PLANE):
        raise ValueError(f"depth below the near plane z={NEAR_PLANE}")
    uc = u / camera.focal
    if camera.model == "perspective":
        return z[..., None] * np.concatenate([uc, np.ones(uc.shape[:-1] + (1,))], axis=-1)
    zz = np.broadcast_to(z, uc.shape[:-1])[..., None]
    return np.concatenate([np.broadcast_to(uc, zz.shape[:-1] + (2,)), zz], axis=-1)


def world_to_object(x, camera: Camera) -> np.ndarray:
    """Camera-frame point(s) into the object frame: ``R x + t``."""
    return np.asarray(x, dtype=np.float64) @ camera.R.T + camera.t


def object_to_world(y, camera: Camera) -> np.ndarray:
    return (np.asarray(y, dtype=np.float64) - camera.t) @ camera.R


def farthest_circle_point(u, d) -> np.ndarray:
    """Point on the circle of radius ``d`` around ``u`` farthest from the origin.

    At ``u = 0`` every direction is equally far; ``+x`` is used.
    """
    u = np.asarray(u, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    norm = np.linalg.norm(u, axis=-1)
    safe = np.where(norm > 0, norm, 1.0)
    direction = np.where((norm > 0)[..., None], u / safe[..., None], np.array([1.0, 0.0]))
    return u + d[..., None] * direction


def _residual_norm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Norm of ``a`` minus its projection onto ``b`` (row-wise)."""
    coef = np.sum(a * b, axis=-1) / np.sum(b * b, axis=-1)
    return np.linalg.norm(a - coef[..., None] * b, axis=-1)


def sdf_lower_bound(u, z, d, camera: Camera | None = None) -> np.ndarray:
    """Lower bound on the SDF at the back-projection of ``u`` to depth ``z``.

    ``u`` and ``d`` (the distance-transform value) are in normalized-image
    units.  Under perspective the bound is the radius of the largest sphere
    centered at ``z * [u; 1]`` that fits inside the free-space cone spanned
    by the circle of radius ``d``; under orthographic projection the cone
    becomes a cylinder and the bound is ``d`` itself.
    """
    camera = camera or Camera()
    u = np.asarray(u, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(z < NEAR_PLANE):
        raise ValueError(f"depth below the near plane z={NEAR_PLANE}")
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    if camera.model == "orthographic":
        return np.broadcast_to(d / camera.focal, np.broadcast_shapes(z.shape, d.shape, u.shape[:-1])).copy()
    uc = u / camera.focal
    v = farthest_circle_point(uc, d / camera.focal)
    ones = np.ones(np.broadcast_shapes(uc.shape[:-1], v.shape[:-1]) + (1,))
    ub = np.concatenate([np.broadcast_to(uc, ones.shape[:-1] + (2,)), ones], axis=-1)
    vb = np.concatenate([v, ones], axis=-1)
    return z * _residual_norm(ub, vb)


def sdf_lower_bound_finite_focal(u, z, d, focal: float) -> np.ndarray:
    """Bound for a camera whose image plane sits at distance ``focal``.

    The queried point keeps a fixed distance ``z - 1`` to the image plane,
    so ``focal = 1`` reproduces :func:`sdf_lower_bound` and ``focal -> inf``
    tends to the orthographic value ``d``.
    """
    u = np.asarray(u, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    v = farthest_circle_point(u, d)
    fc = np.full(u.shape[:-1] + (1,), float(focal))
    a = np.concatenate([u, fc], axis=-1)
    b = np.concatenate([v, fc], axis=-1)
    scale = (z - 1.0 + focal) / focal
    return scale * _residual_norm(a, b)
