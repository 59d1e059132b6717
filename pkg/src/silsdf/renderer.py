"""Learned ray marching, bisection surface refinement and color rendering.

All depths are camera-frame ``z`` values along object-frame rays
``x = o + z * d`` (see :meth:`silsdf.geometry.Camera.rays`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import NEAR_PLANE, Camera
from .scenes import eval_scene

DEFAULT_STEPS = 10
DEFAULT_BISECTIONS = 10
SCENE_MARGIN = 1.2


class AnalyticField:
    """Expose an analytic scene (or any ``x -> sdf`` callable) as a field."""

    def __init__(self, scene):
        self.scene = scene

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        if callable(self.scene) and not hasattr(self.scene, "sdf"):
            return self.scene(x)
        return eval_scene(self.scene, x)


@dataclass
class MarchTrace:
    """Marched depths ``z^(0..N)`` and SDF values for a batch of rays."""

    origins: torch.Tensor
    directions: torch.Tensor
    depths: torch.Tensor
    sdf: torch.Tensor
    z_star: torch.Tensor | None = None

    @property
    def steps(self) -> int:
        return self.depths.shape[-1] - 1

    @property
    def crossed(self) -> torch.Tensor:
        return (self.sdf[:, -2] > 0) & (self.sdf[:, -1] < 0)

    def points(self, z: torch.Tensor) -> torch.Tensor:
        return self.origins + z.unsqueeze(-1) * self.directions


def start_depth(camera: Camera) -> float:
    """First marching depth: just outside the scene bound, never before the near plane."""
    return max(NEAR_PLANE, camera.distance - SCENE_MARGIN)


def camera_rays(camera: Camera, u, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    o, d = camera.rays(np.asarray(u, dtype=np.float64).reshape(-1, 2))
    return torch.as_tensor(o, dtype=dtype), torch.as_tensor(d, dtype=dtype)


def march_rays(net, origins: torch.Tensor, directions: torch.Tensor, z0, steps: int = DEFAULT_STEPS) -> MarchTrace:
    """Run the recurrent step predictor along each ray, keeping the graph."""
    if steps < 2:
        raise ValueError("need at least 2 marching steps")
    batch = origins.shape[0]
    z = torch.as_tensor(z0, dtype=origins.dtype).expand(batch).clone()
    state = net.zero_state(batch)
    depths, values = [z], []
    for _ in range(steps):
        feat = net.features(origins + z.unsqueeze(-1) * directions)
        values.append(net.sdf_from_features(feat))
        state, dz = net.step(state, feat)
        z = z + dz
        depths.append(z)
    values.append(net.sdf(origins + z.unsqueeze(-1) * directions))
    trace = MarchTrace(origins, directions, torch.stack(depths, -1), torch.stack(values, -1))
    if not torch.isfinite(trace.sdf).all():
        raise FloatingPointError("non-finite field value while marching")
    return trace


def ray_march(net, camera: Camera, u, steps: int = DEFAULT_STEPS) -> MarchTrace:
    o, d = camera_rays(camera, u, dtype=net.dtype)
    return march_rays(net, o, d, start_depth(camera), steps)


def bisection_refine(field, trace: MarchTrace, iters: int = DEFAULT_BISECTIONS) -> torch.Tensor:
    """Refine the crossing inside ``[z^(N-1), z^(N)]`` by unrolled bisection.

    Branch decisions are constants, so the result is an affine function of the
    bracket endpoints and stays differentiable through the march.  Rays whose
    bracket has no sign change fall back to ``z^(N)``.
    """
    z_lo, z_hi = trace.depths[:, -2], trace.depths[:, -1]
    crossed = trace.crossed
    with torch.no_grad():
        a_lo = torch.zeros_like(z_lo)
        a_hi = torch.ones_like(z_hi)
        lo, hi = z_lo.detach(), z_hi.detach()
        for _ in range(iters):
            a_mid = 0.5 * (a_lo + a_hi)
            f = field.sdf(trace.points(lo + a_mid * (hi - lo)).detach())
            outside = f > 0
            a_lo = torch.where(outside, a_mid, a_lo)
            a_hi = torch.where(outside, a_hi, a_mid)
        a = torch.where(crossed, 0.5 * (a_lo + a_hi), torch.ones_like(a_lo))
    z_star = z_lo + a * (z_hi - z_lo)
    trace.z_star = z_star
    return z_star


def render_rgb(net, camera: Camera, u, steps=DEFAULT_STEPS, bisections=DEFAULT_BISECTIONS):
    """Colors of pixels ``u`` at the refined surface points; returns ``(rgb, trace)``."""
    trace = ray_march(net, camera, u, steps)
    z_star = bisection_refine(net, trace, bisections)
    return net.rgb(trace.points(z_star)), trace


def render_image(net, camera: Camera, steps=DEFAULT_STEPS, bisections=DEFAULT_BISECTIONS, chunk=4096):
    """Full ``(H, W, 3)`` image with white where the ray never crosses the surface."""
    from .geometry import pixel_grid

    u = pixel_grid(camera).reshape(-1, 2)
    out = np.ones((len(u), 3))
    with torch.no_grad():
        for s in range(0, len(u), chunk):
            rgb, trace = render_rgb(net, camera, u[s : s + chunk], steps, bisections)
            hit = trace.crossed.numpy()
            out[s : s + chunk][hit] = rgb.numpy()[hit]
    return out.reshape(camera.height, camera.width, 3)


def sphere_trace_analytic(scene, camera: Camera, u, max_steps: int = 512, tol: float = 1e-6, far: float | None = None):
    """Classical sphere tracing of an exact SDF; returns depths with ``nan`` for misses."""
    o, d = camera_rays(camera, u, dtype=torch.float64)
    scale = torch.linalg.norm(d, dim=-1)
    far = camera.distance + 2.0 if far is None else far
    z = torch.full((o.shape[0],), NEAR_PLANE, dtype=torch.float64)
    hit = torch.zeros(o.shape[0], dtype=torch.bool)
    active = torch.ones_like(hit)
    for _ in range(max_steps):
        idx = torch.nonzero(active).squeeze(-1)
        if idx.numel() == 0:
            break
        f = eval_scene(scene, o[idx] + z[idx, None] * d[idx])
        done = f < tol
        hit[idx[done]] = True
        z[idx[~done]] += f[~done] / scale[idx[~done]]
        gone = z[idx] > far
        active[idx[done | gone]] = False
    out = z.numpy().copy()
    out[~hit.numpy()] = np.nan
    return out
