"""Geometric and mask value types shared across the pipeline.

Conventions: world frame is right-handed with +z up; camera frame is
right-handed with +z forward, +x right and +y down in the image. Depth 0
marks a missing measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScenePointCloud:
    positions: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = _frozen(self.positions).reshape(-1, 3)
        object.__setattr__(self, "positions", pos)
        if self.colors is not None:
            object.__setattr__(self, "colors", _frozen(self.colors).reshape(-1, 3))

    def __len__(self) -> int:
        return len(self.positions)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"positions": self.positions.tolist()}
        if self.colors is not None:
            d["colors"] = self.colors.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenePointCloud":
        return cls(np.asarray(d["positions"], dtype=float).reshape(-1, 3), d.get("colors"))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class CameraExtrinsics:
    """World-to-camera rigid transform: ``x_cam = rotation @ x_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation).reshape(3, 3))
        object.__setattr__(self, "translation", _frozen(self.translation).reshape(3))

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m) -> "CameraExtrinsics":
        m = np.asarray(m, dtype=float).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "CameraExtrinsics":
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, (0.0, 1.0, 0.0))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(rot, -rot @ eye)

    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {"world_to_camera": self.matrix.reshape(-1).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraExtrinsics":
        return cls.from_matrix(d["world_to_camera"])


@dataclass(frozen=True, eq=False)
class PosedFrame:
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics
    depth: np.ndarray
    color: Optional[np.ndarray] = None
    frame_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "depth", _frozen(self.depth, np.float32))
        if self.color is not None:
            object.__setattr__(self, "color", _frozen(self.color))

    @property
    def shape(self) -> tuple[int, int]:
        return self.intrinsics.height, self.intrinsics.width


@dataclass(frozen=True, eq=False)
class Box3D:
    center: np.ndarray
    size: np.ndarray
    label_hint: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center).reshape(3))
        object.__setattr__(self, "size", _frozen(self.size).reshape(3))
        if np.any(self.size <= 0):
            raise ValueError(f"box size must be positive, got {self.size}")

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.size / 2

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.size / 2

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.size))

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return self.center + signs * (self.size / 2)

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.all((points >= self.lo - margin) & (points <= self.hi + margin), axis=1)

    @classmethod
    def from_points(cls, points: np.ndarray, margin: float = 0.0, min_size: float = 1e-3) -> "Box3D":
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        lo, hi = points.min(axis=0) - margin, points.max(axis=0) + margin
        size = np.maximum(hi - lo, min_size)
        return cls((lo + hi) / 2, size)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"center": self.center.tolist(), "size": self.size.tolist()}
        if self.label_hint is not None:
            d["label_hint"] = self.label_hint
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(d["center"], d["size"], d.get("label_hint"))


@dataclass(frozen=True)
class Box2D:
    u: float
    v: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extent must be positive, got w={self.w} h={self.h}")

    def pixel_slices(self, shape: tuple[int, int]) -> tuple[slice, slice]:
        """Row/column slices of the pixels covered by the box, clipped to ``shape``."""
        h, w = shape
        u0 = int(np.clip(np.floor(self.u), 0, w))
        v0 = int(np.clip(np.floor(self.v), 0, h))
        u1 = int(np.clip(np.ceil(self.u + self.w), 0, w))
        v1 = int(np.clip(np.ceil(self.v + self.h), 0, h))
        return slice(v0, v1), slice(u0, u1)

    def to_dict(self) -> dict:
        return {"u": self.u, "v": self.v, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d: dict) -> "Box2D":
        return cls(float(d["u"]), float(d["v"]), float(d["w"]), float(d["h"]))


@dataclass(frozen=True, eq=False)
class Mask2D:
    labels: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        labels = _frozen(self.labels, np.int32)
        if labels.ndim != 2 or np.any(labels < 0):
            raise ValueError("mask labels must be a 2D array of non-negative integers")
        object.__setattr__(self, "labels", labels)

    @property
    def foreground(self) -> np.ndarray:
        return self.labels > 0


@dataclass(frozen=True, eq=False)
class InstanceLabeling3D:
    labels: np.ndarray
    num_instances: int
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        labels = _frozen(self.labels, np.int64).reshape(-1)
        object.__setattr__(self, "labels", labels)
        if labels.size and labels.max() > self.num_instances:
            raise ValueError("label exceeds num_instances")
        if self.scores is not None:
            scores = _frozen(self.scores).reshape(-1)
            if len(scores) != self.num_instances:
                raise ValueError("one score per instance required")
            object.__setattr__(self, "scores", scores)

    @classmethod
    def from_labels(cls, labels, scores: Optional[dict[int, float]] = None) -> "InstanceLabeling3D":
        """Compact arbitrary non-negative labels to ``1..K`` (ordered by first appearance)."""
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        out = np.zeros_like(labels)
        nz = labels > 0
        uniq, first = np.unique(labels[nz], return_index=True)
        order = uniq[np.argsort(first)]
        remap = {int(old): i + 1 for i, old in enumerate(order)}
        if len(order):
            lut = np.zeros(int(order.max()) + 1, dtype=np.int64)
            for old, new in remap.items():
                lut[old] = new
            out[nz] = lut[labels[nz]]
        inst_scores = None
        if scores is not None:
            inst_scores = np.array([scores.get(int(old), 0.0) for old in order], dtype=float)
        return cls(out, len(order), inst_scores)

    def instances(self) -> list[np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        bounds = np.searchsorted(self.labels[order], np.arange(1, self.num_instances + 2))
        return [order[bounds[k]:bounds[k + 1]] for k in range(self.num_instances)]

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"labels": self.labels.tolist(), "num_instances": self.num_instances}
        if self.scores is not None:
            d["scores"] = self.scores.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceLabeling3D":
        return cls(np.asarray(d["labels"], dtype=np.int64), int(d["num_instances"]), d.get("scores"))


@dataclass
class ValidationReport:
    problems: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return not self.problems

    def add(self, msg: str) -> None:
        self.problems.append(msg)


def validate_scene(cloud: ScenePointCloud, frames: list[PosedFrame]) -> ValidationReport:
    """Check every invariant of the cloud and frames; an empty report means valid."""
    report = ValidationReport()
    if len(cloud) < 1:
        report.add("cloud is empty")
    if not np.all(np.isfinite(cloud.positions)):
        report.add("cloud has non-finite coordinates")
    if cloud.colors is not None and len(cloud.colors) != len(cloud):
        report.add("colors length does not match positions")
    for fr in frames:
        tag = f"frame {fr.frame_id}"
        k = fr.intrinsics
        if not (k.fx > 0 and k.fy > 0):
            report.add(f"{tag}: focal lengths must be positive")
        if not (k.width > 0 and k.height > 0):
            report.add(f"{tag}: image size must be positive")
        rot = fr.extrinsics.rotation
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            report.add(f"{tag}: extrinsics not orthonormal")
        elif abs(np.linalg.det(rot) - 1.0) > 1e-6:
            report.add(f"{tag}: extrinsics rotation has det != +1")
        if fr.depth.shape != (k.height, k.width):
            report.add(f"{tag}: depth dimension mismatch {fr.depth.shape} vs intrinsics {(k.height, k.width)}")
        if np.any(fr.depth < 0) or not np.all(np.isfinite(fr.depth)):
            report.add(f"{tag}: depth has negative or non-finite values")
    return report
