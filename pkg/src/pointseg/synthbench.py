"""Deterministic synthetic rooms with ground truth, plus oracle backends and
seeded noise decorators standing in for foundation models."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import prompts
from .projection import project_points, render_depth_views, fuse_multiview_logits
from .prompts import BoxBranchOutput, PointBranchOutput, normalize_rows
from .refinement import FramePrompt, Segmenter, register_segmenter
from .scene import (Box3D, CameraExtrinsics, CameraIntrinsics, InstanceLabeling3D, PosedFrame,
                    ScenePointCloud)

SHAPES = ("box", "sphere", "cylinder")


class InfeasibleSceneError(ValueError):
    pass


@dataclass
class SceneSpec:
    num_instances: int = 6
    shapes: tuple[str, ...] = SHAPES
    room_size: tuple[float, float, float] = (5.0, 5.0, 3.0)
    points_per_instance: int = 2000
    clutter_rate: float = 0.2
    size_range: tuple[float, float] = (0.35, 1.0)
    min_gap: float = 0.2
    num_frames: int = 20
    image_size: tuple[int, int] = (200, 150)
    focal: float = 105.0
    camera_height: float = 2.5
    orbit_scale: float = 0.8
    max_retries: int = 500

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for k in ("shapes", "room_size", "size_range", "image_size"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class InstanceInfo:
    shape: str
    center: np.ndarray
    size: np.ndarray

    def to_dict(self) -> dict:
        return {"shape": self.shape, "center": self.center.tolist(), "size": self.size.tolist()}


@dataclass(eq=False)
class SyntheticScene:
    cloud: ScenePointCloud
    gt: InstanceLabeling3D
    frames: list[PosedFrame]
    gt_images: list[np.ndarray]
    instances: list[InstanceInfo]
    seed: int
    spec: SceneSpec

    def truth(self) -> "GroundTruth":
        return GroundTruth(self.gt.labels, {f.frame_id: img for f, img in zip(self.frames, self.gt_images)},
                           self.instances, np.asarray(self.spec.room_size, dtype=float))


@dataclass(eq=False)
class GroundTruth:
    """What the oracle backends are allowed to see."""

    labels: np.ndarray
    images: dict[int, np.ndarray]
    instances: list[InstanceInfo]
    room_size: np.ndarray

    def descriptor(self, center, size, shape: Optional[str]) -> np.ndarray:
        return shape_descriptor(center, size, shape, self.room_size)


def shape_descriptor(center, size, shape: Optional[str], room_size) -> np.ndarray:
    """Unit descriptor: centred normalised position, size, one-hot shape class."""
    room = np.asarray(room_size, dtype=float)
    pos = (np.asarray(center, dtype=float) - room / 2) / (room / 2)
    sz = np.asarray(size, dtype=float) / room.max()
    onehot = np.zeros(len(SHAPES))
    if shape in SHAPES:
        onehot[SHAPES.index(shape)] = 0.5
    v = np.concatenate([pos, 2 * sz, onehot])
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.full_like(v, 1 / np.sqrt(len(v)))


# geometry sampling


def _sample_instance(rng, shape: str, center: np.ndarray, dims: np.ndarray, n: int) -> np.ndarray:
    if shape == "box":
        w, d, h = dims
        faces = np.array([w * d, w * h, w * h, d * h, d * h])  # top, +-y, +-x
        face = rng.choice(5, size=n, p=faces / faces.sum())
        a, b = rng.random(n), rng.random(n)
        pts = np.empty((n, 3))
        lo = center - dims / 2
        x = lo[0] + a * w
        y = lo[1] + b * d
        pts[:, 0], pts[:, 1], pts[:, 2] = x, y, lo[2] + h
        z = lo[2] + rng.random(n) * h
        m = face == 1
        pts[m] = np.stack([lo[0] + a[m] * w, np.full(m.sum(), lo[1]), z[m]], 1)
        m = face == 2
        pts[m] = np.stack([lo[0] + a[m] * w, np.full(m.sum(), lo[1] + d), z[m]], 1)
        m = face == 3
        pts[m] = np.stack([np.full(m.sum(), lo[0]), lo[1] + b[m] * d, z[m]], 1)
        m = face == 4
        pts[m] = np.stack([np.full(m.sum(), lo[0] + w), lo[1] + b[m] * d, z[m]], 1)
        return pts
    if shape == "sphere":
        # the cap around the floor contact is never scanned; uniform z gives uniform area
        r = dims[0] / 2
        z = rng.uniform(-r * np.sqrt(0.5), r, n)
        phi = rng.random(n) * 2 * np.pi
        rho = np.sqrt(r * r - z * z)
        return center + np.stack([rho * np.cos(phi), rho * np.sin(phi), z], 1)
    if shape == "cylinder":
        r, h = dims[0] / 2, dims[2]
        side_area, top_area = 2 * np.pi * r * h, np.pi * r * r
        on_side = rng.random(n) < side_area / (side_area + top_area)
        theta = rng.random(n) * 2 * np.pi
        rad = np.where(on_side, r, r * np.sqrt(rng.random(n)))
        z = np.where(on_side, rng.random(n) * h, h) + center[2] - h / 2
        return np.stack([center[0] + rad * np.cos(theta), center[1] + rad * np.sin(theta), z], 1)
    raise ValueError(f"unknown shape {shape!r}")


def _place_instances(rng, spec: SceneSpec) -> list[InstanceInfo]:
    room = np.asarray(spec.room_size, dtype=float)
    placed: list[tuple[np.ndarray, float]] = []
    out: list[InstanceInfo] = []
    lo_s, hi_s = spec.size_range
    for _ in range(spec.num_instances):
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        for _attempt in range(spec.max_retries):
            if shape == "box":
                dims = rng.uniform(lo_s, hi_s, 3)
            elif shape == "sphere":
                dims = np.full(3, rng.uniform(lo_s, hi_s))
            else:
                diam = rng.uniform(lo_s, hi_s)
                dims = np.array([diam, diam, rng.uniform(lo_s, hi_s)])
            radius = float(np.hypot(dims[0], dims[1]) / 2)
            margin = radius + 0.1
            if 2 * margin >= min(room[0], room[1]):
                continue
            xy = rng.uniform([margin, margin], [room[0] - margin, room[1] - margin])
            if all(np.linalg.norm(xy - c) > radius + r + spec.min_gap for c, r in placed):
                placed.append((xy, radius))
                out.append(InstanceInfo(shape, np.array([xy[0], xy[1], dims[2] / 2]), dims))
                break
        else:
            raise InfeasibleSceneError(
                f"could not place instance {len(out) + 1} of {spec.num_instances} without overlap")
    return out


def _sample_clutter(rng, spec: SceneSpec, instances: Sequence[InstanceInfo], n: int) -> np.ndarray:
    room = np.asarray(spec.room_size, dtype=float)
    pts = np.zeros((0, 3))
    while len(pts) < n:
        cand = np.column_stack([rng.random((2 * n, 2)) * room[:2], np.zeros(2 * n)])
        ok = np.ones(len(cand), dtype=bool)
        for inst in instances:
            half = inst.size[:2] / 2 + 0.02
            if inst.shape == "box":
                ok &= ~np.all(np.abs(cand[:, :2] - inst.center[:2]) <= half, axis=1)
            else:
                ok &= np.linalg.norm(cand[:, :2] - inst.center[:2], axis=1) > half[0]
        pts = np.concatenate([pts, cand[ok]])
    return pts[:n]


def orbit_cameras(spec: SceneSpec) -> list[tuple[CameraIntrinsics, CameraExtrinsics]]:
    """Cameras on a circle just outside the room footprint, all aimed near the room centre."""
    room = np.asarray(spec.room_size, dtype=float)
    w, h = spec.image_size
    k = CameraIntrinsics(spec.focal, spec.focal, w / 2, h / 2, w, h)
    c = np.array([room[0] / 2, room[1] / 2])
    radius = spec.orbit_scale * max(room[0], room[1])
    target = np.array([c[0], c[1], 0.2])
    cams = []
    for i in range(spec.num_frames):
        a = 2 * np.pi * i / spec.num_frames
        # alternate high and low passes so lower object sides are seen too
        height = spec.camera_height if i % 2 == 0 else 0.5 * spec.camera_height
        eye = np.array([*(c + radius * np.array([np.cos(a), np.sin(a)])), height])
        cams.append((k, CameraExtrinsics.look_at(eye, target)))
    return cams


def _first_per_pixel(flat: np.ndarray, *keys: np.ndarray) -> np.ndarray:
    """Index of the entry with the smallest ``keys`` (lexicographic) for every pixel."""
    order = np.lexsort((*keys[::-1], flat))
    f = flat[order]
    first = np.concatenate([[True], f[1:] != f[:-1]]) if len(f) else np.zeros(0, bool)
    return order[first]


def render_frame(positions: np.ndarray, labels: np.ndarray, intr: CameraIntrinsics,
                 extr: CameraExtrinsics, splat: int = 1, band: float = 0.1):
    """Point splatting with a z-buffer.

    Pixels hit directly by projected points take the mean depth of the front
    surface (points within ``band`` of the nearest direct hit) and the label of
    the front point closest to the pixel centre. Pixels without a direct hit are
    filled from the ``(2 splat + 1)^2`` footprints of nearby points, nearest depth
    winning. Returns ``(depth float32, ids int32)``; empty pixels are 0 in both.
    """
    h, w = intr.height, intr.width
    frame = PosedFrame(intr, extr, np.zeros((h, w), np.float32))
    u, v, z, _ = project_points(positions, frame)
    ok = (z > 1e-3) & np.isfinite(u) & np.isfinite(v)
    u, v, z, lab = u[ok], v[ok], z[ok], np.asarray(labels)[ok]
    col0 = np.rint(u).astype(np.int64)
    row0 = np.rint(v).astype(np.int64)
    depth = np.zeros(h * w)
    ids = np.zeros(h * w, np.int32)

    inb = (row0 >= 0) & (row0 < h) & (col0 >= 0) & (col0 < w)
    flat = row0[inb] * w + col0[inb]
    zd, ld = z[inb], lab[inb]
    centre = (u[inb] - col0[inb]) ** 2 + (v[inb] - row0[inb]) ** 2
    zmin = np.full(h * w, np.inf)
    np.minimum.at(zmin, flat, zd)
    front = zd <= zmin[flat] + band
    ff = flat[front]
    sums = np.bincount(ff, weights=zd[front], minlength=h * w)
    counts = np.bincount(ff, minlength=h * w)
    hit = counts > 0
    depth[hit] = sums[hit] / counts[hit]
    win = _first_per_pixel(ff, centre[front])
    ids[ff[win]] = ld[front][win]

    if splat > 0:
        offs = np.arange(-splat, splat + 1)
        dr, dc = np.meshgrid(offs, offs, indexing="ij")
        rows = (row0[:, None] + dr.reshape(1, -1)).reshape(-1)
        cols = (col0[:, None] + dc.reshape(1, -1)).reshape(-1)
        zs = np.repeat(z, dr.size)
        ls = np.repeat(lab, dr.size)
        inb = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        flat = rows[inb] * w + cols[inb]
        zs, ls = zs[inb], ls[inb]
        empty = ~hit[flat]
        flat, zs, ls = flat[empty], zs[empty], ls[empty]
        win = _first_per_pixel(flat, zs)
        depth[flat[win]] = zs[win]
        ids[flat[win]] = ls[win]
    return depth.astype(np.float32).reshape(h, w), ids.reshape(h, w)


def generate_scene(spec: Optional[SceneSpec] = None, seed: int = 0) -> SyntheticScene:
    spec = spec or SceneSpec()
    if spec.num_instances < 0:
        raise ValueError("num_instances must be >= 0")
    rng = np.random.default_rng(seed)
    instances = _place_instances(rng, spec)
    chunks, labels = [], []
    for k, inst in enumerate(instances):
        chunks.append(_sample_instance(rng, inst.shape, inst.center, inst.size, spec.points_per_instance))
        labels.append(np.full(spec.points_per_instance, k + 1))
    n_inst = spec.points_per_instance * len(instances)
    n_clutter = int(round(n_inst * spec.clutter_rate / (1 - spec.clutter_rate))) if instances \
        else max(spec.points_per_instance, 1)
    chunks.append(_sample_clutter(rng, spec, instances, n_clutter))
    labels.append(np.zeros(n_clutter, dtype=np.int64))
    pos = np.concatenate(chunks)
    lab = np.concatenate(labels).astype(np.int64)
    perm = rng.permutation(len(pos))
    pos, lab = pos[perm], lab[perm]
    palette = np.vstack([[0.6, 0.6, 0.6], rng.random((len(instances), 3))])
    cloud = ScenePointCloud(pos, palette[lab])
    frames, images = [], []
    for fid, (intr, extr) in enumerate(orbit_cameras(spec)):
        depth, ids = render_frame(pos, lab, intr, extr)
        frames.append(PosedFrame(intr, extr, depth, frame_id=fid))
        images.append(ids)
    gt = InstanceLabeling3D(lab, len(instances))
    return SyntheticScene(cloud, gt, frames, images, instances, seed, spec)


# oracle backends


def instance_logits(truth: GroundTruth) -> np.ndarray:
    """Per-point descriptor of the point's instance (zeros for unlabelled points)."""
    dim = 3 + 3 + len(SHAPES)
    desc = [truth.descriptor(i.center, i.size, i.shape) for i in truth.instances]
    table = np.vstack([np.zeros((1, dim))] + desc)
    return table[truth.labels]


@prompts.register_point_backend("oracle")
def oracle_point_backend(truth: GroundTruth, seed: int = 0, noise: Sequence = ()):
    def run(cloud: ScenePointCloud) -> PointBranchOutput:
        logits = instance_logits(truth)
        groups = [np.nonzero(truth.labels == k + 1)[0] for k in range(len(truth.instances))]
        out = PointBranchOutput(logits, groups, prompts.group_descriptors(logits, groups))
        return apply_noise(out, noise, seed, cloud)
    return run


@prompts.register_point_backend("multiview")
def multiview_point_backend(truth: GroundTruth, seed: int = 0, noise: Sequence = (), H: int = 128,
                            W: int = 128, D: int = 64, scale: float = 0.9, num_views: int = 6,
                            min_score: float = 0.8):
    """Point branch through rendered depth views: oracle per-view feature maps are
    back-projected and averaged onto the points, then each point joins the
    instance prototype it aligns with best."""

    def run(cloud: ScenePointCloud) -> PointBranchOutput:
        views = render_depth_views(cloud, H, W, D, scale, num_views)
        per_point = instance_logits(truth)
        maps = np.zeros((views.num_views, H, W, per_point.shape[1]))
        for s in range(views.num_views):
            row, col, z = views.grid_coords(cloud.positions, s)
            # the nearest point in each cell paints it
            hit = np.abs(z - views.raw[s, row, col]) <= 1e-12
            maps[s, row[hit], col[hit]] = per_point[hit]
            # cells filled by densification copy their nearest painted neighbour
            painted = np.zeros((H, W), bool)
            painted[row[hit], col[hit]] = True
            if painted.any():
                _, (ri, ci) = ndimage.distance_transform_edt(~painted, return_indices=True)
                maps[s] = maps[s][ri, ci]
        logits, _ = fuse_multiview_logits(views, maps, cloud, depth_tol=0.02)
        protos = np.array([truth.descriptor(i.center, i.size, i.shape) for i in truth.instances])
        groups = []
        if len(protos):
            align = logits @ protos.T
            best = np.argmax(align, axis=1)
            strong = align[np.arange(len(best)), best] >= min_score
            groups = [np.nonzero(strong & (best == k))[0] for k in range(len(protos))]
            groups = [g for g in groups if len(g)]
        out = PointBranchOutput(logits, groups, prompts.group_descriptors(logits, groups) if groups
                                else np.zeros((0, logits.shape[1])))
        return apply_noise(out, noise, seed, cloud)
    return run


@prompts.register_box_backend("oracle")
def oracle_box_backend(truth: GroundTruth, seed: int = 0, noise: Sequence = ()):
    def run(cloud: ScenePointCloud) -> BoxBranchOutput:
        boxes, feats = [], []
        for k, inst in enumerate(truth.instances):
            box = Box3D.from_points(cloud.positions[truth.labels == k + 1])
            boxes.append(Box3D(box.center, box.size, label_hint=SHAPES.index(inst.shape)))
            feats.append(truth.descriptor(box.center, box.size, inst.shape))
        out = BoxBranchOutput(boxes, prompts.per_row(feats, len(boxes)))
        return apply_noise(out, noise, seed, cloud, truth=truth)
    return run


class OracleSegmenter(Segmenter):
    """Answers from the GT id image of the frame.

    A point prompt selects the instance under the pixel; a box-only prompt
    selects the instance covering most of the box. The mask is clipped to the
    box when one is given. A point prompt without a box is ambiguous and yields
    only the part of the instance within ``point_only_radius`` pixels.
    """

    def __init__(self, truth: GroundTruth, point_only_radius: float = 6.0):
        self.truth = truth
        self.point_only_radius = point_only_radius

    def target(self, prompt: FramePrompt, frame: PosedFrame) -> np.ndarray:
        ids = self.truth.images[frame.frame_id]
        h, w = ids.shape
        box_sl = prompt.box2d.pixel_slices((h, w)) if prompt.box2d is not None else None
        if prompt.pixel is not None:
            c = int(np.clip(np.rint(prompt.pixel[0]), 0, w - 1))
            r = int(np.clip(np.rint(prompt.pixel[1]), 0, h - 1))
            inst = int(ids[r, c])
        else:
            inside = ids[box_sl]
            counts = np.bincount(inside[inside > 0].reshape(-1)) if np.any(inside > 0) else np.zeros(1)
            inst = int(np.argmax(counts)) if counts.any() else 0
        if inst == 0:
            return np.zeros((h, w), dtype=bool)
        mask = ids == inst
        if box_sl is not None:
            clip = np.zeros_like(mask)
            clip[box_sl] = True
            mask &= clip
        elif self.point_only_radius is not None:
            rr, cc = np.ogrid[:h, :w]
            mask &= (rr - r) ** 2 + (cc - c) ** 2 <= self.point_only_radius ** 2
        return mask

    def __call__(self, prompt, frame, prior):
        return self.target(prompt, frame)


@register_segmenter("oracle")
def _oracle_segmenter(truth: GroundTruth, noise: Sequence = (), seed: int = 0,
                      point_only_radius: float = 6.0) -> Segmenter:
    seg: Segmenter = OracleSegmenter(truth, point_only_radius)
    for kind, magnitude in noise:
        seg = noise_models(kind, magnitude, seed)(seg)
    return seg


# noise models

POINT_NOISE = ("dropout", "displacement")
BOX_NOISE = ("box_jitter",)
MASK_NOISE = ("dilation", "erosion", "speckle")
NOISE_KINDS = POINT_NOISE + BOX_NOISE + MASK_NOISE


def _rng_for(seed: int, kind: str, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, NOISE_KINDS.index(kind), *key])


def apply_noise(out, noise: Sequence, seed: int, cloud: ScenePointCloud, truth: Optional[GroundTruth] = None):
    for kind, magnitude in noise:
        out = noise_models(kind, magnitude, seed)(out, cloud=cloud, truth=truth)
    return out


class _MaskNoise(Segmenter):
    """Perturbs a segmenter's first answer; with a prior mask, moves half of the
    wrong pixels back toward the clean answer (farthest from the clean mask first)."""

    def __init__(self, inner: Segmenter, kind: str, magnitude: float, seed: int):
        self.inner, self.kind, self.magnitude, self.seed = inner, kind, magnitude, seed
        self.thread_safe = inner.thread_safe

    def perturb(self, clean: np.ndarray, prompt: FramePrompt) -> np.ndarray:
        r = int(round(self.magnitude))
        if self.kind == "dilation":
            return ndimage.binary_dilation(clean, np.ones((3, 3), bool), iterations=r) if r > 0 and clean.any() else clean
        if self.kind == "erosion":
            return ndimage.binary_erosion(clean, np.ones((3, 3), bool), iterations=r) if r > 0 else clean
        rng = _rng_for(self.seed, self.kind, prompt.frame_id, prompt.pair_id)
        flips = rng.random(clean.shape) < self.magnitude
        return clean ^ flips

    def __call__(self, prompt, frame, prior):
        clean = np.asarray(self.inner(prompt, frame, prior), dtype=bool)
        if self.magnitude == 0:
            return clean
        if prior is None:
            return self.perturb(clean, prompt)
        return contract_toward(np.asarray(prior, dtype=bool), clean)


def contract_toward(prior: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Fix the farther half of the pixels where ``prior`` disagrees with ``target``."""
    wrong = prior != target
    n_wrong = int(wrong.sum())
    if n_wrong == 0:
        return prior.copy()
    dist = ndimage.distance_transform_cdt(~target, metric="chessboard") if target.any() \
        else np.full(target.shape, 10 ** 6)
    dist_in = ndimage.distance_transform_cdt(target, metric="chessboard")
    d = np.where(target, dist_in, dist)
    idx = np.flatnonzero(wrong)
    order = np.lexsort((idx, -d.reshape(-1)[idx]))
    fix = idx[order[: n_wrong - n_wrong // 2]]
    out = prior.copy().reshape(-1)
    out[fix] = target.reshape(-1)[fix]
    return out.reshape(prior.shape)


class NoiseModel:
    """Seeded perturbation of one kind; call it on a backend output or segmenter."""

    def __init__(self, kind: str, magnitude: float, seed: int = 0):
        if kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {kind!r}")
        if magnitude < 0:
            raise ValueError("noise magnitude must be >= 0")
        self.kind, self.magnitude, self.seed = kind, float(magnitude), seed

    def __call__(self, target, cloud: Optional[ScenePointCloud] = None, truth: Optional[GroundTruth] = None):
        if isinstance(target, Segmenter):
            if self.kind not in MASK_NOISE:
                raise ValueError(f"{self.kind} does not apply to a segmenter")
            return _MaskNoise(target, self.kind, self.magnitude, self.seed)
        if self.magnitude == 0:
            return target
        if isinstance(target, PointBranchOutput):
            return self._points(target, cloud)
        if isinstance(target, BoxBranchOutput):
            return self._boxes(target, truth)
        raise TypeError(f"cannot apply {self.kind} noise to {type(target).__name__}")

    def _points(self, out: PointBranchOutput, cloud) -> PointBranchOutput:
        if self.kind not in POINT_NOISE:
            raise ValueError(f"{self.kind} does not apply to point groups")
        n = len(out.logits)
        groups = []
        for k, g in enumerate(out.point_groups):
            rng = _rng_for(self.seed, self.kind, k)
            if self.kind == "dropout":
                keep = rng.random(len(g)) >= self.magnitude
                if not keep.any():
                    keep[rng.integers(len(g))] = True
                groups.append(g[keep])
            else:
                m = int(round(self.magnitude * len(g)))
                others = np.setdiff1d(np.arange(n), g, assume_unique=True)
                m = min(m, len(others))
                drop = rng.choice(len(g), size=m, replace=False)
                add = rng.choice(others, size=m, replace=False)
                groups.append(np.concatenate([np.delete(g, drop), add]))
        feats = prompts.group_descriptors(out.logits, groups)
        return PointBranchOutput(out.logits, groups, feats)

    def _boxes(self, out: BoxBranchOutput, truth) -> BoxBranchOutput:
        if self.kind not in BOX_NOISE:
            raise ValueError(f"{self.kind} does not apply to boxes")
        boxes, feats = [], []
        for k, b in enumerate(out.boxes):
            rng = _rng_for(self.seed, self.kind, k)
            center = b.center + rng.normal(0, self.magnitude, 3)
            size = np.maximum(b.size + rng.normal(0, self.magnitude, 3), 0.05)
            nb = Box3D(center, size, b.label_hint)
            boxes.append(nb)
            if truth is not None:
                shape = SHAPES[b.label_hint] if b.label_hint is not None else None
                feats.append(truth.descriptor(center, size, shape))
            else:
                feats.append(out.features[k])
        return BoxBranchOutput(boxes, prompts.per_row(feats, len(boxes)))


def noise_models(kind: str, magnitude: float, seed: int = 0) -> NoiseModel:
    return NoiseModel(kind, magnitude, seed)
