"""3D <-> 2D geometry: pinhole projection, depth-tested visibility, box
projection, and the multi-view depth renderer used by the point branch."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from .scene import Box2D, Box3D, PosedFrame, ScenePointCloud

DEFAULT_DEPTH_TOL = 0.05


class ProjectedPoint(NamedTuple):
    u: float
    v: float
    depth: float
    inside: bool


def project_points(points: np.ndarray, frame: PosedFrame):
    """Vectorised projection. Returns ``(u, v, depth, inside)`` arrays."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    ext, k = frame.extrinsics, frame.intrinsics
    cam = pts @ ext.rotation.T + ext.translation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * cam[:, 0] / z + k.cx
        v = k.fy * cam[:, 1] / z + k.cy
    inside = (z > 0) & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    inside &= np.isfinite(u) & np.isfinite(v)
    return u, v, z, inside


def project_point(p, frame: PosedFrame) -> ProjectedPoint:
    u, v, z, inside = project_points(np.asarray(p, dtype=float)[None], frame)
    return ProjectedPoint(float(u[0]), float(v[0]), float(z[0]), bool(inside[0]))


def pixel_index(u: np.ndarray, v: np.ndarray, shape: tuple[int, int]):
    """Nearest-integer pixel (row, col), clamped to the image."""
    h, w = shape
    col = np.clip(np.rint(np.nan_to_num(u)), 0, w - 1).astype(np.int64)
    row = np.clip(np.rint(np.nan_to_num(v)), 0, h - 1).astype(np.int64)
    return row, col


def visibility(points: np.ndarray, frame: PosedFrame, depth_tol: float = DEFAULT_DEPTH_TOL):
    """Depth-tested visibility for many points.

    Returns ``(visible, row, col)``; row/col are only meaningful where visible.
    """
    if depth_tol <= 0:
        raise ValueError("depth_tol must be positive")
    u, v, z, inside = project_points(points, frame)
    row, col = pixel_index(u, v, frame.shape)
    sample = frame.depth[row, col]
    visible = inside & (sample > 0) & (np.abs(z - sample) <= depth_tol)
    return visible, row, col


def is_visible(p, frame: PosedFrame, depth_tol: float = DEFAULT_DEPTH_TOL) -> bool:
    return bool(visibility(np.asarray(p, dtype=float)[None], frame, depth_tol)[0][0])


def project_box(box: Box3D, frame: PosedFrame) -> Optional[Box2D]:
    """Pixel rectangle spanned by the projected corners of ``box``, clipped to the image.

    Corners behind the camera are ignored; returns None when no corner lies in front
    of the camera or the clipped rectangle is empty.
    """
    u, v, z, _ = project_points(box.corners(), frame)
    front = z > 0
    if not np.any(front):
        return None
    k = frame.intrinsics
    u0, u1 = np.clip([u[front].min(), u[front].max()], 0, k.width)
    v0, v1 = np.clip([v[front].min(), v[front].max()], 0, k.height)
    if u1 - u0 <= 0 or v1 - v0 <= 0:
        return None
    return Box2D(float(u0), float(v0), float(u1 - u0), float(v1 - v0))


# multi-view depth rendering for the point branch


@dataclass(frozen=True, eq=False)
class DepthViewSet:
    """Rendered depth maps plus what is needed to map points back onto them.

    ``depth`` is ``(S, H, W)`` in [0, 1] after squeezing; ``raw`` holds the
    z-buffered grid before densify/smooth (0 where empty); ``rotations`` are the
    per-view orthographic world-to-view rotations.
    """

    depth: np.ndarray
    raw: np.ndarray
    valid: np.ndarray
    rotations: np.ndarray
    centers: np.ndarray
    extents: np.ndarray
    H: int
    W: int
    D: int
    scale: float

    @property
    def num_views(self) -> int:
        return len(self.rotations)

    def grid_coords(self, positions: np.ndarray, view: int):
        """Grid (row, col) and normalised depth of each point in ``view``."""
        # elementwise products so a point's cell does not depend on the batch it comes in
        diff = np.asarray(positions, dtype=float) - self.centers[view]
        local = (diff[:, None, :] * self.rotations[view][None]).sum(axis=2)
        norm = local / self.extents[view] + 0.5
        row = np.clip(np.ceil(self.scale * self.H * norm[:, 0]), 0, self.H - 1).astype(np.int64)
        col = np.clip(np.ceil(self.scale * self.W * norm[:, 1]), 0, self.W - 1).astype(np.int64)
        z = np.clip(norm[:, 2], 0.0, 1.0)
        return row, col, z


def view_rotations(num_views: int, elevation_deg: float = 30.0) -> np.ndarray:
    """Orthographic view rotations: evenly spaced azimuths at fixed elevation,
    with the last view looking straight down once ``num_views >= 5``."""
    n_orbit = num_views - 1 if num_views >= 5 else num_views
    el = np.deg2rad(elevation_deg)
    rots = []
    for i in range(n_orbit):
        az = 2 * np.pi * i / n_orbit
        fwd = -np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        right = np.cross(fwd, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rots.append(np.stack([down, right, fwd]))
    if num_views >= 5:
        rots.append(np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, -1.0]]))
    return np.array(rots)


def _zbuffer(row, col, z, H, W):
    flat = row * W + col
    order = np.lexsort((z, flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = order[first]
    grid = np.zeros(H * W)
    grid[flat[winners]] = z[winners]
    valid = np.zeros(H * W, dtype=bool)
    valid[flat[winners]] = True
    return grid.reshape(H, W), valid.reshape(H, W)


def render_depth_views(
    cloud: ScenePointCloud,
    H: int = 128,
    W: int = 128,
    D: int = 64,
    scale: float = 0.9,
    num_views: int = 6,
    kernel: int = 3,
    sigma: float = 1.0,
) -> DepthViewSet:
    if len(cloud) == 0:
        raise ValueError("cannot render an empty cloud")
    if min(H, W, D) < 8 or num_views < 1 or not (0 < scale <= 1):
        raise ValueError("invalid grid parameters")
    pos = cloud.positions
    center = (pos.min(axis=0) + pos.max(axis=0)) / 2
    rots = view_rotations(num_views)
    depth, raw, valid, extents, centers = [], [], [], [], []
    for rot in rots:
        local = (pos - center) @ rot.T
        ext = float(np.max(local.max(axis=0) - local.min(axis=0)))
        extents.append(ext if ext > 0 else 1.0)
        # shift so the view's bounding box centre maps to 0.5 on every axis
        centers.append(center + rot.T @ ((local.max(axis=0) + local.min(axis=0)) / 2))
    views = DepthViewSet(
        depth=np.empty(0), raw=np.empty(0), valid=np.empty(0), rotations=rots,
        centers=np.array(centers), extents=np.array(extents), H=H, W=W, D=D, scale=scale,
    )
    for s in range(len(rots)):
        row, col, z = views.grid_coords(pos, s)
        grid, ok = _zbuffer(row, col, z, H, W)
        raw.append(grid)
        valid.append(ok)
        depth.append(_densify_smooth_squeeze(grid, ok, kernel, sigma))
    return DepthViewSet(
        depth=np.array(depth), raw=np.array(raw), valid=np.array(valid), rotations=rots,
        centers=views.centers, extents=views.extents, H=H, W=W, D=D, scale=scale,
    )


def _densify_smooth_squeeze(grid, valid, kernel, sigma):
    # densify: empty cells take the nearest (smallest) depth within a kernel x kernel window
    closeness = np.where(valid, 2.0 - grid, 0.0)
    dense = ndimage.grey_dilation(closeness, size=(kernel, kernel))
    filled = valid | (dense > 0)
    value = np.where(valid, grid, 2.0 - dense)
    # smooth with validity-normalised Gaussian so empty cells do not drag values to 0
    w = ndimage.gaussian_filter(filled.astype(float), sigma)
    s = ndimage.gaussian_filter(np.where(filled, value, 0.0), sigma)
    smooth = np.where(filled, s / np.maximum(w, 1e-12), 0.0)
    # squeeze to [0, 1]
    if filled.any():
        lo, hi = smooth[filled].min(), smooth[filled].max()
        span = hi - lo if hi > lo else 1.0
        smooth = np.where(filled, (smooth - lo) / span, 0.0)
    return np.clip(smooth, 0.0, 1.0)


def fuse_multiview_logits(
    views: DepthViewSet,
    per_view_scores: np.ndarray,
    cloud: ScenePointCloud,
    depth_tol: float = 0.02,
):
    """Average back-projected per-view scores onto the points.

    A point contributes from a view when its z lies within ``depth_tol`` of the
    z-buffer winner of its cell. Returns ``(logits (N, K), unseen (N,) bool)``;
    unseen points get a uniform logit vector.
    """
    scores = np.asarray(per_view_scores, dtype=float)
    if scores.ndim != 4 or scores.shape[:3] != (views.num_views, views.H, views.W):
        raise ValueError(f"score maps {scores.shape} do not match views "
                         f"({views.num_views}, {views.H}, {views.W}, K)")
    n, k = len(cloud), scores.shape[3]
    acc = np.zeros((n, k))
    count = np.zeros(n)
    for s in range(views.num_views):
        row, col, z = views.grid_coords(cloud.positions, s)
        hit = views.valid[s, row, col] & (np.abs(z - views.raw[s, row, col]) <= depth_tol)
        acc[hit] += scores[s, row[hit], col[hit]]
        count[hit] += 1
    unseen = count == 0
    logits = np.empty((n, k))
    logits[~unseen] = acc[~unseen] / count[~unseen, None]
    logits[unseen] = 1.0 / k
    return logits, unseen
