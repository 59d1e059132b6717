"""Synthetic multi-view datasets rendered from analytic scenes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import netpbm
from .geometry import Camera, pixel_grid
from .renderer import sphere_trace_analytic
from .scenes import eval_scene, scene_from_dict, scene_to_dict
from .silhouette import SilhouetteMap, distance_transform

UNIT_CUBE = 0.5
ALBEDO = np.array([0.9, 0.55, 0.3])
AMBIENT = 0.25
# 60 degree field of view: normalized image half-width tan(30 deg)
DEFAULT_FOCAL = 1.0 / math.tan(math.radians(30.0))


@dataclass
class View:
    image: np.ndarray
    silhouette: SilhouetteMap
    camera: Camera
    depth: np.ndarray | None = None


def ring_cameras(n_views: int, resolution: int, distance=2.0, elevation_deg=15.0, focal=DEFAULT_FOCAL):
    """Cameras on a fixed-elevation ring at uniform azimuths, looking at the origin."""
    if n_views < 1:
        raise ValueError("need at least one view")
    el = math.radians(elevation_deg)
    cams = []
    for k in range(n_views):
        az = 2.0 * math.pi * k / n_views
        pos = distance * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
        cams.append(Camera.look_at(pos, width=resolution, height=resolution, focal=focal))
    return cams


def scene_normals(scene, x: np.ndarray) -> np.ndarray:
    xt = torch.as_tensor(x, dtype=torch.float64).requires_grad_(True)
    (g,) = torch.autograd.grad(eval_scene(scene, xt).sum(), xt)
    n = g.numpy()
    return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)


def render_view(scene, camera: Camera, tol=1e-6) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sphere-traced ``(rgb, mask, depth)``; white background, headlight Lambert shading."""
    u = pixel_grid(camera).reshape(-1, 2)
    depth = sphere_trace_analytic(scene, camera, u, tol=tol)
    hit = np.isfinite(depth)
    o, d = camera.rays(u)
    rgb = np.ones((len(u), 3))
    if hit.any():
        x = o[hit] + depth[hit, None] * d[hit]
        n = scene_normals(scene, x)
        to_cam = -d[hit] / np.linalg.norm(d[hit], axis=-1, keepdims=True)
        lambert = np.clip(np.sum(n * to_cam, axis=-1), 0.0, 1.0)
        rgb[hit] = ALBEDO * (AMBIENT + (1.0 - AMBIENT) * lambert)[:, None]
    shape = (camera.height, camera.width)
    return rgb.reshape(shape + (3,)), hit.reshape(shape), depth.reshape(shape)


def check_scene_fits(scene, half=UNIT_CUBE):
    lo, hi = scene.bounds()
    if np.any(np.asarray(lo) < -half - 1e-9) or np.any(np.asarray(hi) > half + 1e-9):
        raise ValueError(f"scene bounds {lo}..{hi} exceed the cube [-{half}, {half}]^3")


def generate_dataset(
    scene,
    out_dir,
    n_views=24,
    resolution=64,
    distance=2.0,
    elevation_deg=15.0,
    focal=DEFAULT_FOCAL,
    seed=0,
) -> list[View]:
    """Render ``n_views`` ring views of ``scene`` and write them to ``out_dir``.

    Rendering is deterministic; ``seed`` is recorded in the manifest for
    provenance only.
    """
    check_scene_fits(scene)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    views = []
    for k, cam in enumerate(ring_cameras(n_views, resolution, distance, elevation_deg, focal)):
        rgb, mask, depth = render_view(scene, cam)
        netpbm.write_rgb(out / f"view_{k:03d}.ppm", rgb)
        netpbm.write_mask(out / f"mask_{k:03d}.pgm", mask)
        netpbm.write_depth(out / f"depth_{k:03d}.pgm", depth)
        cam.save(out / f"camera_{k:03d}.json")
        views.append(View(rgb, distance_transform(mask), cam, depth))
    manifest = {
        "scene": scene_to_dict(scene),
        "seed": seed,
        "n_views": n_views,
        "resolution": resolution,
        "distance": distance,
        "elevation_deg": elevation_deg,
        "focal": focal,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return views


def load_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())


def load_scene(data_dir):
    return scene_from_dict(load_manifest(data_dir)["scene"])


def load_dataset(data_dir, with_depth=False) -> list[View]:
    data_dir = Path(data_dir)
    n = load_manifest(data_dir)["n_views"]
    views = []
    for k in range(n):
        mask = netpbm.read_mask(data_dir / f"mask_{k:03d}.pgm")
        depth = netpbm.read_depth(data_dir / f"depth_{k:03d}.pgm") if with_depth else None
        views.append(
            View(
                image=netpbm.read_rgb(data_dir / f"view_{k:03d}.ppm"),
                silhouette=distance_transform(mask),
                camera=Camera.load(data_dir / f"camera_{k:03d}.json"),
                depth=depth,
            )
        )
    return views


def surface_points(scene, n: int, seed=0, batch=200_000) -> np.ndarray:
    """Points on the zero set of an exact scene, by projecting random samples.

    Samples are drawn near the surface and pushed along the gradient until
    ``|f| < 1e-9``; roughly uniform over area for thin shells.
    """
    rng = np.random.default_rng(seed)
    lo, hi = scene.bounds()
    lo, hi = np.asarray(lo) - 0.05, np.asarray(hi) + 0.05
    pts = []
    count = 0
    while count < n:
        x = rng.uniform(lo, hi, size=(batch, 3))
        f = eval_scene(scene, x)
        x = x[np.abs(f) < 0.01]
        for _ in range(20):
            f = eval_scene(scene, x)
            x = x - f[:, None] * scene_normals(scene, x)
        x = x[np.abs(eval_scene(scene, x)) < 1e-9]
        pts.append(x)
        count += len(x)
    return np.concatenate(pts)[:n]


def audit_lower_bound(scene, views, n_depths=50, rng=0, guard_px=1.0, depth_range=1.2) -> tuple[int, int]:
    """Count exterior (pixel, depth) samples where the scene SDF undercuts the cone bound.

    The distance transform is reduced by ``guard_px`` pixels because it
    measures distance to interior pixel centers, not to the continuous
    silhouette.  Returns ``(violations, checked)``.
    """
    from .geometry import pixel_to_normalized, sdf_lower_bound

    rng = np.random.default_rng(rng)
    violations = checked = 0
    for view in views:
        sil, cam = view.silhouette, view.camera
        rows, cols = np.nonzero(sil.exterior & np.isfinite(sil.dist_exterior))
        if len(rows) == 0:
            continue
        ix = np.stack([cols, rows], axis=-1)
        u = pixel_to_normalized(ix, cam)
        d = sil.to_normalized(np.maximum(sil.dist_exterior[rows, cols] - guard_px, 0.0))
        lo, hi = max(1.0, cam.distance - depth_range), cam.distance + depth_range
        z = rng.uniform(lo, hi, size=(len(u), n_depths))
        b = sdf_lower_bound(u[:, None, :], z, d[:, None], cam)
        o, dirs = cam.rays(u)
        x = o[:, None, :] + z[..., None] * dirs[:, None, :]
        f = eval_scene(scene, x)
        violations += int(np.sum(f < b))
        checked += f.size
    return violations, checked
