"""Binary silhouettes, exact Euclidean distance transforms and pixel sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Squared-distance sentinel for "no site on this side"; larger than any
# reachable squared distance on realistic grids.
_NO_SITE = np.iinfo(np.int64).max // 4


def _column_pass(sites: np.ndarray) -> np.ndarray:
    """Squared vertical distance to the nearest site in the same column."""
    h, w = sites.shape
    up = np.full((h, w), _NO_SITE, dtype=np.int64)
    last = np.full(w, -1, dtype=np.int64)
    for r in range(h):
        last = np.where(sites[r], r, last)
        up[r] = np.where(last >= 0, (r - last) ** 2, _NO_SITE)
    out = up
    last = np.full(w, -1, dtype=np.int64)
    for r in range(h - 1, -1, -1):
        last = np.where(sites[r], r, last)
        down = np.where(last >= 0, (last - r) ** 2, _NO_SITE)
        out[r] = np.minimum(out[r], down)
    return out


def _lower_envelope_1d(g: np.ndarray) -> np.ndarray:
    """Exact 1D squared distance transform of sampled function ``g``.

    Lower envelope of parabolas ``(x - q)^2 + g[q]`` over finite sites,
    evaluated with integer arithmetic.
    """
    n = g.shape[0]
    sites = np.flatnonzero(g < _NO_SITE)
    if sites.size == 0:
        return np.full(n, _NO_SITE, dtype=np.int64)
    gi = [int(x) for x in g]
    v = [int(sites[0])]
    # breakpoints kept as exact fractions (num, den) with den > 0
    zs: list[tuple[int, int]] = []
    for q in sites[1:]:
        q = int(q)
        while True:
            p = v[-1]
            num = (gi[q] + q * q) - (gi[p] + p * p)
            den = 2 * (q - p)
            if zs and num * zs[-1][1] <= zs[-1][0] * den:
                v.pop()
                zs.pop()
                continue
            v.append(q)
            zs.append((num, den))
            break
    out = np.empty(n, dtype=np.int64)
    k = 0
    for x in range(n):
        while k < len(zs) and zs[k][0] < x * zs[k][1]:
            k += 1
        p = v[k]
        out[x] = (x - p) ** 2 + gi[p]
    return out


def squared_distance_to_sites(sites: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance (int64) from every pixel to the nearest site."""
    sites = np.asarray(sites, dtype=bool)
    if sites.ndim != 2 or sites.size == 0:
        raise ValueError("mask must be a nonempty 2D grid")
    g = _column_pass(sites)
    return np.stack([_lower_envelope_1d(row) for row in g])


def _root(sq: np.ndarray) -> np.ndarray:
    out = np.sqrt(sq.astype(np.float64))
    out[sq >= _NO_SITE] = np.inf
    return out


@dataclass(frozen=True)
class SilhouetteMap:
    """A binary mask with its two-sided distance transform (pixel units).

    ``dist_exterior`` holds, for exterior pixels, the distance to the nearest
    interior pixel center and is 0 on the interior; ``dist_interior`` is the
    mirror image.  A side with no opposite pixels at all gets ``inf``.
    """

    mask: np.ndarray
    dist_exterior: np.ndarray
    dist_interior: np.ndarray

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def exterior(self) -> np.ndarray:
        return ~self.mask

    def to_normalized(self, dist: np.ndarray) -> np.ndarray:
        """Convert pixel distances into normalized-image units."""
        return dist * (2.0 / self.width)

    def side_distance(self, ix: np.ndarray) -> np.ndarray:
        """Pixel distance to the opposite side for ``(col, row)`` pixels ``ix``."""
        ix = np.asarray(ix)
        rows, cols = ix[..., 1], ix[..., 0]
        return np.where(self.mask[rows, cols], self.dist_interior[rows, cols], self.dist_exterior[rows, cols])


def distance_transform(mask) -> SilhouetteMap:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.size == 0:
        raise ValueError("mask must be a nonempty 2D grid")
    ext = _root(squared_distance_to_sites(mask))
    ext[mask] = 0.0
    inn = _root(squared_distance_to_sites(~mask))
    inn[~mask] = 0.0
    for a in (mask, ext, inn):
        a.setflags(write=False)
    return SilhouetteMap(mask=mask, dist_exterior=ext, dist_interior=inn)


def importance_weights(sil: SilhouetteMap, side: str = "exterior") -> np.ndarray:
    """Per-pixel weight ``1 / D(u)`` on one side, with ``D`` in normalized units."""
    if side == "exterior":
        dist = sil.dist_exterior
    elif side == "interior":
        dist = sil.dist_interior
    else:
        raise ValueError(f"side must be 'exterior' or 'interior', got {side!r}")
    valid = np.isfinite(dist) & (dist > 0)
    if not valid.any():
        raise ValueError(f"silhouette has no {side} pixels")
    w = np.zeros(dist.shape)
    w[valid] = 1.0 / sil.to_normalized(dist[valid])
    return w


@dataclass(frozen=True)
class PixelBatch:
    """Sampled pixel indices ``(col, row)`` and whether each lies inside the mask."""

    ix: np.ndarray
    interior: np.ndarray

    def __len__(self) -> int:
        return len(self.ix)


def sample_pixels(sil: SilhouetteMap, count: int, rng) -> PixelBatch:
    """Uniformly sample pixels without replacement over the whole image."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(rng)
    total = sil.width * sil.height
    flat = rng.permutation(total)[: min(count, total)]
    rows, cols = np.divmod(flat, sil.width)
    return PixelBatch(ix=np.stack([cols, rows], axis=-1), interior=sil.mask[rows, cols])
