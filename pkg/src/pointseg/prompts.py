"""Two-branch prompt sources.

The point branch yields per-point logits and point groups (rough 3D masks);
the box branch yields 3D boxes. Both carry unit-norm descriptors so matching
can use plain dot products. Concrete backends live in a registry so test
oracles and out-of-process models plug in the same way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .scene import Box3D, ScenePointCloud


class UnknownBackendError(KeyError):
    pass


def per_row(x, n: int) -> np.ndarray:
    """Reshape to ``n`` rows; an empty input keeps its column count."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return x.reshape(n, x.shape[-1] if x.ndim == 2 else 0)
    return x.reshape(n, -1)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return per_row(x, len(x))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalise a zero descriptor")
    return x / norms


@dataclass(frozen=True, eq=False)
class PointBranchOutput:
    logits: np.ndarray
    point_groups: list[np.ndarray]
    features: np.ndarray

    def __post_init__(self):
        groups = [np.unique(np.asarray(g, dtype=np.int64)) for g in self.point_groups]
        object.__setattr__(self, "point_groups", groups)
        object.__setattr__(self, "features", per_row(self.features, len(groups)))
        n = len(self.logits)
        for g in groups:
            if len(g) == 0:
                raise ValueError("empty point group")
            if g[0] < 0 or g[-1] >= n:
                raise ValueError("point group index out of range")


@dataclass(frozen=True, eq=False)
class BoxBranchOutput:
    boxes: list[Box3D]
    features: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "features", per_row(self.features, len(self.boxes)))


@dataclass
class PromptBackendSpec:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)


PointBackend = Callable[[ScenePointCloud], PointBranchOutput]
BoxBackend = Callable[[ScenePointCloud], BoxBranchOutput]

POINT_BACKENDS: dict[str, Callable[..., PointBackend]] = {}
BOX_BACKENDS: dict[str, Callable[..., BoxBackend]] = {}


def register_point_backend(kind: str):
    def deco(factory):
        POINT_BACKENDS[kind] = factory
        return factory
    return deco


def register_box_backend(kind: str):
    def deco(factory):
        BOX_BACKENDS[kind] = factory
        return factory
    return deco


def group_descriptors(logits: np.ndarray, groups: list[np.ndarray]) -> np.ndarray:
    """Mean per-point logit vector of each group, L2-normalised."""
    if not groups:
        return np.zeros((0, logits.shape[1]))
    return normalize_rows(np.stack([logits[g].mean(axis=0) for g in groups]))


def point_branch(cloud: ScenePointCloud, spec: PromptBackendSpec) -> PointBranchOutput:
    try:
        factory = POINT_BACKENDS[spec.kind]
    except KeyError:
        raise UnknownBackendError(f"unknown point backend {spec.kind!r}") from None
    out = factory(**spec.params)(cloud)
    if out.features.size == 0 and out.point_groups:
        out = PointBranchOutput(out.logits, out.point_groups, group_descriptors(out.logits, out.point_groups))
    return PointBranchOutput(out.logits, out.point_groups, normalize_rows(out.features))


def box_branch(cloud: ScenePointCloud, spec: PromptBackendSpec) -> BoxBranchOutput:
    try:
        factory = BOX_BACKENDS[spec.kind]
    except KeyError:
        raise UnknownBackendError(f"unknown box backend {spec.kind!r}") from None
    out = factory(**spec.params)(cloud)
    return BoxBranchOutput(out.boxes, normalize_rows(out.features))


# file exchange: an external process writes the JSON schema below next to the cloud

def read_exchange(path) -> dict:
    with open(path) as f:
        data = json.load(f)
    for key in ("groups", "group_features", "boxes", "box_features"):
        data.setdefault(key, [])
    return data


def write_exchange(path, points: PointBranchOutput | None = None, boxes: BoxBranchOutput | None = None) -> None:
    data: dict[str, Any] = {}
    if points is not None:
        data["groups"] = [g.tolist() for g in points.point_groups]
        data["group_features"] = points.features.tolist()
    if boxes is not None:
        data["boxes"] = [{"center": b.center.tolist(), "size": b.size.tolist()} for b in boxes.boxes]
        data["box_features"] = boxes.features.tolist()
    Path(path).write_text(json.dumps(data))


@register_point_backend("file")
def _file_points(path, cloud_out=None):
    def run(cloud: ScenePointCloud) -> PointBranchOutput:
        if cloud_out is not None:
            from .io import write_ply
            write_ply(cloud_out, cloud)
        data = read_exchange(path)
        groups = [np.asarray(g, dtype=np.int64) for g in data["groups"]]
        feats = per_row(data["group_features"], len(groups))
        logits = np.zeros((len(cloud), feats.shape[1] if feats.size else 1))
        for g, f in zip(groups, feats):
            logits[g] = f
        return PointBranchOutput(logits, groups, feats)
    return run


@register_box_backend("file")
def _file_boxes(path, cloud_out=None):
    def run(cloud: ScenePointCloud) -> BoxBranchOutput:
        if cloud_out is not None:
            from .io import write_ply
            write_ply(cloud_out, cloud)
        data = read_exchange(path)
        boxes = [Box3D(b["center"], b["size"]) for b in data["boxes"]]
        return BoxBranchOutput(boxes, np.asarray(data["box_features"], dtype=float))
    return run
