"""Training objectives and the per-scene fitting loop.

A training step samples a few views and pixels (:func:`sample_batch`), marches
every sampled ray through the field, and combines four terms:

* silhouette term: exterior pixels push ``f`` above the cone lower bound
  at ``M`` random depths, weighted by ``1 / D(u)``;
* ray term: hinge with margin on every marched point, negative at the last
  step of interior pixels and positive everywhere else;
* color term: squared error of the color at the refined surface crossing;
* eikonal term: ``(||grad f|| - 1)^2`` at random points of the region of interest.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .fields import FieldNet, Tape, backward, grad_sdf, save_checkpoint
from .geometry import pixel_to_normalized, sdf_lower_bound
from .optim import Adam
from .renderer import SCENE_MARGIN, bisection_refine, march_rays, start_depth
from .silhouette import sample_pixels

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    sdf: float = 3.0
    rgb: float = 1.0
    ray_last: float = 1.0
    ray_other: float = 0.1
    eik: float = 0.01

    def __post_init__(self):
        for k, v in dataclasses.asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(**{k: c * v for k, v in dataclasses.asdict(self).items()})


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_views: int = 16
    pixels_per_view: int = 1024
    depth_samples: int = 5
    margin: float = 0.01
    depth_range: float = SCENE_MARGIN
    eikonal_samples: int = 1024
    eikonal_roi: float = 1.2
    steps: int = 10
    bisections: int = 10
    iterations: int = 2000
    seed: int = 0
    precision: str = "float32"
    rgb_pixels: str = "interior"
    importance_weighting: bool = True
    sdf_mode: str = "bound"
    log_every: int = 1
    checkpoint_every: int = 500
    divergence_factor: float = 1e3

    def __post_init__(self):
        for k in ("learning_rate", "batch_views", "pixels_per_view", "depth_samples", "margin", "steps"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        if self.eikonal_samples < 0 or self.iterations < 0 or self.bisections < 0:
            raise ValueError("counts must be non-negative")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.rgb_pixels not in ("interior", "all"):
            raise ValueError("rgb_pixels must be 'interior' or 'all'")
        if self.sdf_mode not in ("bound", "occupancy"):
            raise ValueError("sdf_mode must be 'bound' or 'occupancy'")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Batch:
    """Rays and supervision for one training step (numpy, converted lazily)."""

    origins: np.ndarray
    directions: np.ndarray
    z0: np.ndarray
    interior: np.ndarray
    ray_weights: np.ndarray
    colors: np.ndarray
    sdf_points: np.ndarray  # (exterior pixels, M, 3)
    sdf_bounds: np.ndarray  # (exterior pixels, M)
    sdf_weights: np.ndarray  # (exterior pixels,)
    eik_points: np.ndarray

    def tensors(self, dtype) -> dict:
        return {k: torch.as_tensor(v, dtype=torch.bool if v.dtype == bool else dtype) for k, v in vars(self).items()}


def depth_interval(camera, depth_range: float = SCENE_MARGIN) -> tuple[float, float]:
    d = camera.distance
    return max(1.0, d - depth_range), d + depth_range


def sample_batch(views, config: TrainConfig, rng: np.random.Generator) -> Batch:
    n = min(config.batch_views, len(views))
    chosen = rng.choice(len(views), size=n, replace=False)
    parts = {k: [] for k in Batch.__dataclass_fields__ if k != "eik_points"}
    for vi in sorted(chosen):
        view = views[vi]
        sil, cam = view.silhouette, view.camera
        pix = sample_pixels(sil, config.pixels_per_view, rng)
        cols, rows = pix.ix[:, 0], pix.ix[:, 1]
        u = pixel_to_normalized(pix.ix, cam)
        o, d = cam.rays(u)
        dist = sil.side_distance(pix.ix)
        if config.importance_weighting:
            w = np.where(np.isfinite(dist) & (dist > 0), 1.0 / sil.to_normalized(np.maximum(dist, 1.0)), 0.0)
        else:
            w = np.where(np.isfinite(dist), 1.0, 0.0)
        ext = ~pix.interior & np.isfinite(dist)
        lo, hi = depth_interval(cam, config.depth_range)
        z = rng.uniform(lo, hi, size=(int(ext.sum()), config.depth_samples))
        if config.sdf_mode == "bound":
            b = sdf_lower_bound(u[ext][:, None, :], z, sil.to_normalized(dist[ext])[:, None], cam)
        else:
            b = np.zeros_like(z)
        parts["origins"].append(o)
        parts["directions"].append(d)
        parts["z0"].append(np.full(len(u), start_depth(cam)))
        parts["interior"].append(pix.interior)
        parts["ray_weights"].append(w)
        parts["colors"].append(view.image[rows, cols])
        parts["sdf_points"].append(o[ext][:, None, :] + z[..., None] * d[ext][:, None, :])
        parts["sdf_bounds"].append(b)
        parts["sdf_weights"].append(w[ext])
    roi = config.eikonal_roi
    eik = rng.uniform(-roi, roi, size=(config.eikonal_samples, 3))
    return Batch(**{k: np.concatenate(v) for k, v in parts.items()}, eik_points=eik)


def sdf_hinge(f: torch.Tensor, bounds: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted mean over pixels of the summed hinge ``max(0, b - f)`` over depth samples."""
    if weights.numel() == 0 or float(weights.sum()) == 0.0:
        return f.sum() * 0.0
    per_pixel = torch.relu(bounds - f).sum(dim=-1)
    return (weights * per_pixel).sum() / weights.sum()


def ray_hinge(values: torch.Tensor, interior: torch.Tensor, weights: torch.Tensor, margin: float) -> torch.Tensor:
    """Per-step ray penalties, shape ``(N + 1,)``, each a weighted mean over rays.

    The sign is ``+1`` only at the last point of interior rays, so that point is
    pushed inside the shape and every other point is pushed outside.
    """
    alpha = -torch.ones_like(values)
    alpha[:, -1] = torch.where(interior, 1.0, -1.0).to(values.dtype)
    terms = torch.relu(alpha * values + margin)
    total = weights.sum()
    if float(total) == 0.0:
        return terms.sum(dim=0) * 0.0
    return (weights[:, None] * terms).sum(dim=0) / total


def rgb_error(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of the squared color error summed over channels."""
    if rendered.shape[0] == 0:
        return rendered.sum() * 0.0
    return ((rendered - target) ** 2).sum(dim=-1).mean()


def loss_eik(field, points: torch.Tensor) -> torch.Tensor:
    g = grad_sdf(field, points, create_graph=True)
    return ((torch.linalg.norm(g, dim=-1) - 1.0) ** 2).mean()


def loss_sdf(field, view, pixels, depth_samples=5, depth_range=SCENE_MARGIN, rng=None, importance=True):
    """Silhouette lower-bound loss for one view and a :class:`PixelBatch`."""
    rng = np.random.default_rng(rng)
    sil, cam = view.silhouette, view.camera
    ext = ~pixels.interior
    ix = pixels.ix[ext]
    dist = sil.dist_exterior[ix[:, 1], ix[:, 0]]
    keep = np.isfinite(dist)
    ix, dist = ix[keep], dist[keep]
    if len(ix) == 0:
        return torch.zeros(())
    u = pixel_to_normalized(ix, cam)
    o, d = cam.rays(u)
    lo, hi = depth_interval(cam, depth_range)
    z = rng.uniform(lo, hi, size=(len(ix), depth_samples))
    b = sdf_lower_bound(u[:, None, :], z, sil.to_normalized(dist)[:, None], cam)
    w = 1.0 / sil.to_normalized(dist) if importance else np.ones(len(ix))
    dtype = _field_dtype(field)
    x = torch.as_tensor(o[:, None, :] + z[..., None] * d[:, None, :], dtype=dtype)
    return sdf_hinge(field.sdf(x), torch.as_tensor(b, dtype=dtype), torch.as_tensor(w, dtype=dtype))


def loss_ray(trace, interior, weights, margin=0.01, per_step=False):
    """Ray sign loss on a :class:`MarchTrace`; ``per_step`` keeps the ``N + 1`` terms separate."""
    dtype = trace.sdf.dtype
    terms = ray_hinge(
        trace.sdf,
        torch.as_tensor(np.asarray(interior), dtype=torch.bool),
        torch.as_tensor(np.asarray(weights), dtype=dtype),
        margin,
    )
    return terms if per_step else terms.sum()


def loss_rgb(rendered, target, interior=None, all_pixels=False):
    target = torch.as_tensor(np.asarray(target), dtype=rendered.dtype)
    if not all_pixels and interior is not None:
        keep = torch.as_tensor(np.asarray(interior), dtype=torch.bool)
        rendered, target = rendered[keep], target[keep]
    return rgb_error(rendered, target)


def _field_dtype(field) -> torch.dtype:
    return field.dtype if hasattr(field, "dtype") else torch.float64


def batch_losses(net: FieldNet, batch: Batch, config: TrainConfig, weights: LossWeights) -> dict:
    """Every loss term on a fixed batch, as tensors keyed by name (plus ``total``)."""
    t = batch.tensors(net.dtype)
    out = {}
    zero = sum(p.sum() for p in net.parameters()) * 0.0
    need_march = weights.ray_last > 0 or weights.ray_other > 0 or weights.rgb > 0
    if need_march:
        trace = march_rays(net, t["origins"], t["directions"], t["z0"], config.steps)
        steps = ray_hinge(trace.sdf, t["interior"], t["ray_weights"], config.margin)
        out["ray_last"] = steps[-1]
        out["ray_other"] = steps[:-1].sum()
        if weights.rgb > 0:
            z_star = bisection_refine(net, trace, config.bisections)
            keep = t["interior"] if config.rgb_pixels == "interior" else torch.ones_like(t["interior"])
            rendered = net.rgb(trace.points(z_star)[keep])
            out["rgb"] = rgb_error(rendered, t["colors"][keep])
        else:
            out["rgb"] = zero
    else:
        out["ray_last"] = out["ray_other"] = out["rgb"] = zero
    if weights.sdf > 0 and len(batch.sdf_points):
        out["sdf"] = sdf_hinge(net.sdf(t["sdf_points"]), t["sdf_bounds"], t["sdf_weights"])
    else:
        out["sdf"] = zero
    out["eik"] = loss_eik(net, t["eik_points"]) if weights.eik > 0 and len(batch.eik_points) else zero
    out["total"] = (
        weights.sdf * out["sdf"]
        + weights.rgb * out["rgb"]
        + weights.ray_last * out["ray_last"]
        + weights.ray_other * out["ray_other"]
        + weights.eik * out["eik"]
    )
    return out


def total_loss(net, views, weights: LossWeights, config: TrainConfig, rng, tape: Tape | None = None):
    """Sample a batch and return the weighted objective (recorded on ``tape`` if given)."""
    terms = batch_losses(net, sample_batch(views, config, rng), config, weights)
    if not torch.isfinite(terms["total"]):
        raise FloatingPointError(
            "non-finite loss: " + ", ".join(f"{k}={float(v):.4g}" for k, v in terms.items())
        )
    if tape is not None:
        tape.record(terms["total"])
    return terms["total"], terms


class DivergenceError(RuntimeError):
    def __init__(self, message, last_good: dict | None = None):
        super().__init__(message)
        self.last_good = last_good


LOG_FIELDS = ("iteration", "sdf", "rgb", "ray_last", "ray_other", "eik", "total")


@dataclass
class FitResult:
    net: FieldNet
    log: list = field(default_factory=list)
    seconds: float = 0.0

    def log_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for row in self.log:
            writer.writerow([row["iteration"]] + [repr(row[k]) for k in LOG_FIELDS[1:]])
        return buf.getvalue()


def fit_scene(
    views,
    net: FieldNet,
    config: TrainConfig | None = None,
    weights: LossWeights | None = None,
    log_path=None,
    checkpoint_path=None,
    progress=None,
) -> FitResult:
    """Optimize ``net`` directly on one scene's views.

    ``net`` should start from sphere pretraining.  Raises
    :class:`DivergenceError` (with the last good parameters, also written to
    ``checkpoint_path``) when the loss becomes non-finite or exceeds
    ``divergence_factor`` times its first value.
    """
    config = config or TrainConfig()
    weights = weights or LossWeights()
    net = net.to(config.dtype)
    rng = np.random.default_rng(config.seed)
    opt = Adam(lr=config.learning_rate)
    params = dict(net.named_parameters())
    result = FitResult(net)
    first = None
    start = time.perf_counter()
    for it in range(config.iterations):
        last_good = {k: v.detach().clone() for k, v in net.state_dict().items()}
        tape = Tape()
        try:
            _, terms = total_loss(net, views, weights, config, rng, tape)
        except FloatingPointError as e:
            _abort(net, last_good, checkpoint_path, f"iteration {it}: {e}")
        total = float(terms["total"].detach())
        first = total if first is None else first
        if first > 0 and total > config.divergence_factor * first:
            _abort(net, last_good, checkpoint_path, f"iteration {it}: loss {total:.4g} exceeds {config.divergence_factor:g}x initial {first:.4g}")
        grads = backward(tape, net)
        try:
            opt.step(params, grads)
        except FloatingPointError as e:
            _abort(net, last_good, checkpoint_path, f"iteration {it}: {e}")
        if it % config.log_every == 0 or it == config.iterations - 1:
            row = {"iteration": it, **{k: float(terms[k].detach()) for k in LOG_FIELDS[1:]}}
            result.log.append(row)
            if progress:
                progress(row)
        if checkpoint_path and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(net, checkpoint_path)
    result.seconds = time.perf_counter() - start
    if log_path:
        Path(log_path).write_text(result.log_csv())
    if checkpoint_path:
        save_checkpoint(net, checkpoint_path)
    return result


def _abort(net, last_good, checkpoint_path, message):
    net.load_state_dict(last_good)
    if checkpoint_path:
        save_checkpoint(net, checkpoint_path)
    log.error("fit aborted: %s", message)
    raise DivergenceError(message, last_good)
