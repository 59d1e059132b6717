"""Chamfer distances and rigid ICP registration for point clouds."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


def _check(points, name) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError(f"{name} point cloud is empty")
    if not np.isfinite(p).all():
        raise ValueError(f"{name} point cloud has non-finite coordinates")
    return p


def _dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a - b
    return np.sqrt(diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2])


def nearest_distances(query: np.ndarray, ref: np.ndarray, tree: cKDTree | None = None) -> np.ndarray:
    """Exact distance from each query point to its nearest reference point."""
    tree = tree or cKDTree(ref)
    # a few candidates, rescored with the brute-force formula, so near-ties resolve identically
    k = min(4, len(ref))
    _, idx = tree.query(query, k=k)
    idx = idx.reshape(len(query), k)
    return _dist(query[:, None, :], ref[idx]).min(axis=1)


def nearest_distances_bruteforce(query: np.ndarray, ref: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty(len(query))
    for s in range(0, len(query), chunk):
        q = query[s : s + chunk]
        out[s : s + chunk] = _dist(q[:, None, :], ref[None, :, :]).min(axis=1)
    return out


def chamfer(pred, gt, squared: bool = False) -> tuple[float, float]:
    """``(accuracy, coverage)``: mean pred->gt and gt->pred nearest distances."""
    p, g = _check(pred, "pred"), _check(gt, "gt")
    acc = nearest_distances(p, g)
    cov = nearest_distances(g, p)
    if squared:
        acc, cov = acc * acc, cov * cov
    return float(np.mean(acc)), float(np.mean(cov))


def chamfer_bruteforce(pred, gt, squared: bool = False) -> tuple[float, float]:
    p, g = _check(pred, "pred"), _check(gt, "gt")
    acc = nearest_distances_bruteforce(p, g)
    cov = nearest_distances_bruteforce(g, p)
    if squared:
        acc, cov = acc * acc, cov * cov
    return float(np.mean(acc)), float(np.mean(cov))


def rigid_fit(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation with ``R @ src + t ~ dst``."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


@dataclass
class IcpResult:
    R: np.ndarray
    t: np.ndarray
    registered: np.ndarray
    history: list
    history_sq: list


def _degenerate(p: np.ndarray) -> bool:
    if len(p) < 3:
        return True
    s = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    return s[1] <= 1e-9 * max(s[0], 1e-300)


def icp_register(src, dst, iters: int = 50, tol: float = 0.0) -> IcpResult:
    """Rigidly align ``src`` to ``dst`` by iterative closest point.

    ``history`` holds the mean nearest distance (Chamfer accuracy) before the
    first iteration and after each one; ``history_sq`` the mean squared
    distance, which is the quantity each iteration provably does not increase.
    """
    src, dst = _check(src, "source"), _check(dst, "target")
    if _degenerate(src) or _degenerate(dst):
        raise ValueError("ICP needs at least 3 non-collinear points in each cloud")
    tree = cKDTree(dst)
    R, t = np.eye(3), np.zeros(3)
    cur = src.copy()
    history, history_sq = [], []

    def record(pts):
        _, idx = tree.query(pts)
        d = _dist(pts, dst[idx])
        history.append(float(np.mean(d)))
        history_sq.append(float(np.mean(d * d)))
        return idx

    idx = record(cur)
    for _ in range(iters):
        dR, dt = rigid_fit(cur, dst[idx])
        R, t = dR @ R, dR @ t + dt
        cur = src @ R.T + t
        idx = record(cur)
        if tol > 0 and abs(history[-2] - history[-1]) <= tol:
            break
    return IcpResult(R, t, cur, history, history_sq)


def read_points(path) -> np.ndarray:
    """Point cloud from whitespace XYZ text or the vertices of an ASCII PLY."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        from .mesh import read_ply

        return read_ply(path).vertices
    pts = np.loadtxt(path, ndmin=2)
    if pts.shape[1] < 3:
        raise ValueError(f"{path}: expected 3 columns per point")
    return pts[:, :3]


def write_points(points, path):
    np.savetxt(path, np.asarray(points).reshape(-1, 3), fmt="%.9g")
