"""Promptable 2D segmenter interface and the iterative post-refinement loop."""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
from scipy.spatial.distance import cdist

from .matching import PromptPair
from .projection import DEFAULT_DEPTH_TOL, project_box, project_points, visibility
from .prompts import UnknownBackendError
from .scene import Box2D, Mask2D, PosedFrame, ScenePointCloud

DEFAULT_THETA = 0.05
DEFAULT_MAX_ITER = 10


@dataclass(frozen=True)
class FramePrompt:
    pixel: Optional[tuple[float, float]]
    box2d: Optional[Box2D]
    pair_id: int
    frame_id: int


@dataclass
class SegmenterSpec:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)


class Segmenter:
    """Base class: map a prompt (and optional prior mask) to a boolean H x W mask."""

    thread_safe = True

    def __call__(self, prompt: FramePrompt, frame: PosedFrame, prior: Optional[np.ndarray]) -> np.ndarray:
        raise NotImplementedError


SEGMENTERS: dict[str, Callable[..., Segmenter]] = {}


def register_segmenter(kind: str):
    def deco(factory):
        SEGMENTERS[kind] = factory
        return factory
    return deco


def make_segmenter(spec: SegmenterSpec) -> Segmenter:
    try:
        factory = SEGMENTERS[spec.kind]
    except KeyError:
        raise UnknownBackendError(f"unknown segmenter {spec.kind!r}") from None
    return factory(**spec.params)


def medoid_index(xy: np.ndarray, max_points: int = 512) -> int:
    """Index of the member minimising total Euclidean distance to all members.

    Exact for up to ``max_points`` points; larger sets return the medoid of an
    evenly strided subsample of ``max_points`` members. Ties go to the lowest index.
    """
    xy = np.asarray(xy, dtype=float)
    n = len(xy)
    sub = np.arange(n) if n <= max_points else np.linspace(0, n - 1, max_points).astype(np.int64)
    pts = xy[sub]
    return int(sub[np.argmin(cdist(pts, pts).sum(axis=1))])


def project_prompt_pair(
    pair: PromptPair,
    cloud: ScenePointCloud,
    frame: PosedFrame,
    depth_tol: float = DEFAULT_DEPTH_TOL,
    min_visible: int = 3,
) -> Optional[FramePrompt]:
    pts = cloud.positions[pair.points]
    vis, _, _ = visibility(pts, frame, depth_tol)
    if vis.sum() < min_visible:
        return None
    pixel = None
    if pair.cue != "box":
        u, v, _, _ = project_points(pts[vis], frame)
        m = medoid_index(np.stack([u, v], axis=1))
        pixel = (float(u[m]), float(v[m]))
    box2d = project_box(pair.box, frame) if pair.box is not None else None
    if pixel is None and box2d is None:
        return None
    return FramePrompt(pixel, box2d, pair.pair_id, frame.frame_id)


def segment(prompt: FramePrompt, frame: PosedFrame, prior_mask: Optional[np.ndarray],
            segmenter: Segmenter | SegmenterSpec) -> np.ndarray:
    if isinstance(segmenter, SegmenterSpec):
        segmenter = make_segmenter(segmenter)
    out = np.asarray(segmenter(prompt, frame, prior_mask), dtype=bool)
    if out.shape != frame.shape:
        raise ValueError(f"segmenter returned {out.shape}, frame is {frame.shape}")
    return out


def change_ratio(prev: np.ndarray, cur: np.ndarray) -> float:
    """Changed pixels relative to the previous foreground area (at least 1)."""
    return float(np.count_nonzero(prev != cur)) / max(1, int(np.count_nonzero(prev)))


@dataclass
class RefinementTrace:
    deltas: list[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.deltas)


def iterative_post_refinement(
    prompt: FramePrompt,
    frame: PosedFrame,
    segmenter: Segmenter | SegmenterSpec,
    theta: float = DEFAULT_THETA,
    max_iter: int = DEFAULT_MAX_ITER,
    trace: Optional[RefinementTrace] = None,
) -> Mask2D:
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if isinstance(segmenter, SegmenterSpec):
        segmenter = make_segmenter(segmenter)
    prev = segment(prompt, frame, None, segmenter)
    for _ in range(max_iter):
        cur = segment(prompt, frame, prev, segmenter)
        delta = change_ratio(prev, cur)
        if trace is not None:
            trace.deltas.append(delta)
        prev = cur
        if delta <= theta:
            break
    return Mask2D(prev.astype(np.int32), frame.frame_id)


def fixed_refinement(prompt: FramePrompt, frame: PosedFrame, segmenter: Segmenter | SegmenterSpec,
                     iterations: int) -> Mask2D:
    """Feed the mask back exactly ``iterations`` times (0 = single decoder pass)."""
    if isinstance(segmenter, SegmenterSpec):
        segmenter = make_segmenter(segmenter)
    mask = segment(prompt, frame, None, segmenter)
    for _ in range(iterations):
        mask = segment(prompt, frame, mask, segmenter)
    return Mask2D(mask.astype(np.int32), frame.frame_id)


# run-length encoding for the out-of-process protocol (row-major, starts with a 0-run)

def rle_encode(mask: np.ndarray) -> dict:
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    change = np.nonzero(np.diff(flat.astype(np.int8)))[0] + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": list(mask.shape), "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    vals = np.arange(len(rle["counts"])) % 2 == 1
    flat = np.repeat(vals, rle["counts"])
    if flat.size != h * w:
        raise ValueError("RLE counts do not cover the mask")
    return flat.reshape(h, w)


def write_request(path, prompt: FramePrompt, prior: Optional[np.ndarray]) -> None:
    req = {
        "frame_id": prompt.frame_id,
        "pair_id": prompt.pair_id,
        "pixel": None if prompt.pixel is None else list(prompt.pixel),
        "box": None if prompt.box2d is None else prompt.box2d.to_dict(),
        "prior": None if prior is None else rle_encode(prior),
    }
    Path(path).write_text(json.dumps(req))


def read_request(path) -> dict:
    req = json.loads(Path(path).read_text())
    if req.get("prior") is not None:
        req["prior"] = rle_decode(req["prior"])
    return req


@register_segmenter("exchange")
class ExchangeSegmenter(Segmenter):
    """Talks to an external segmenter through request/response JSON files.

    ``command`` is run with two extra arguments, the request path and the
    response path; the response holds ``{"mask": <rle>}``.
    """

    thread_safe = False

    def __init__(self, command: list[str], workdir: str):
        self.command = list(command)
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)

    def __call__(self, prompt, frame, prior):
        req = self.workdir / "request.json"
        resp = self.workdir / "response.json"
        write_request(req, prompt, prior)
        subprocess.run(self.command + [str(req), str(resp)], check=True)
        return rle_decode(json.loads(resp.read_text())["mask"])
