"""Analytic signed distance primitives and their compositions.

Every node evaluates on torch tensors of shape ``(..., 3)`` so scenes can be
differentiated and plugged into the renderer like a learned field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


def _vec(x, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(x, dtype=like.dtype, device=like.device)


@dataclass
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    exact = True

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        return torch.linalg.norm(x - _vec(self.center, x), dim=-1) - self.radius

    def bounds(self):
        c = np.asarray(self.center, dtype=float)
        return c - self.radius, c + self.radius


@dataclass
class Box:
    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (0.3, 0.3, 0.3)
    exact = True

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        q = torch.abs(x - _vec(self.center, x)) - _vec(self.half_extents, x)
        outside = torch.linalg.norm(torch.clamp(q, min=0.0), dim=-1)
        inside = torch.clamp(q.max(dim=-1).values, max=0.0)
        return outside + inside

    def bounds(self):
        c = np.asarray(self.center, dtype=float)
        h = np.asarray(self.half_extents, dtype=float)
        return c - h, c + h


@dataclass
class Torus:
    """Ring of radius ``major`` in the xy-plane (symmetry axis along z)."""

    center: tuple = (0.0, 0.0, 0.0)
    major: float = 0.5
    minor: float = 0.15
    exact = True

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        p = x - _vec(self.center, x)
        ring = torch.linalg.norm(p[..., :2], dim=-1) - self.major
        return torch.sqrt(ring**2 + p[..., 2] ** 2) - self.minor

    def bounds(self):
        c = np.asarray(self.center, dtype=float)
        e = np.array([self.major + self.minor] * 2 + [self.minor])
        return c - e, c + e


@dataclass
class Union:
    children: list = field(default_factory=list)

    @property
    def exact(self):
        # min of exact SDFs is exact outside and a bound inside
        return all(c.exact for c in self.children)

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        return torch.stack([c.sdf(x) for c in self.children]).min(dim=0).values

    def bounds(self):
        lo, hi = zip(*(c.bounds() for c in self.children))
        return np.min(lo, axis=0), np.max(hi, axis=0)


@dataclass
class SmoothUnion:
    """Polynomial smooth minimum; never above ``min(a, b)``, not an exact SDF."""

    a: object = None
    b: object = None
    k: float = 0.1
    exact = False

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        da, db = self.a.sdf(x), self.b.sdf(x)
        h = torch.clamp(0.5 + 0.5 * (db - da) / self.k, 0.0, 1.0)
        return db + (da - db) * h - self.k * h * (1.0 - h)

    def bounds(self):
        lo, hi = zip(self.a.bounds(), self.b.bounds())
        return np.min(lo, axis=0), np.max(hi, axis=0)


_KINDS = {"sphere": Sphere, "box": Box, "torus": Torus, "union": Union, "smooth_union": SmoothUnion}


def scene_to_dict(node) -> dict:
    name = next(k for k, v in _KINDS.items() if isinstance(node, v))
    if isinstance(node, Union):
        return {"type": name, "children": [scene_to_dict(c) for c in node.children]}
    if isinstance(node, SmoothUnion):
        return {"type": name, "a": scene_to_dict(node.a), "b": scene_to_dict(node.b), "k": node.k}
    d = {"type": name}
    d.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(node).items()})
    return d


def scene_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type")
    if kind == "union":
        return Union([scene_from_dict(c) for c in d["children"]])
    if kind == "smooth_union":
        return SmoothUnion(scene_from_dict(d["a"]), scene_from_dict(d["b"]), d["k"])
    cls = _KINDS[kind]
    return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def eval_scene(scene, x):
    """Evaluate a scene on numpy arrays or torch tensors, returning the same kind."""
    if isinstance(x, torch.Tensor):
        return scene.sdf(x)
    xt = torch.as_tensor(np.asarray(x, dtype=np.float64))
    return scene.sdf(xt).numpy()


PRESETS = {
    "sphere": lambda: Sphere(radius=0.4),
    "torus": lambda: Torus(major=0.33, minor=0.13),
    "box": lambda: Box(half_extents=(0.3, 0.25, 0.2)),
    "blobs": lambda: SmoothUnion(Sphere((-0.18, 0.0, 0.0), 0.25), Sphere((0.2, 0.05, 0.0), 0.22), k=0.1),
}


def preset(name: str):
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown scene {name!r}; choose from {sorted(PRESETS)}") from None
