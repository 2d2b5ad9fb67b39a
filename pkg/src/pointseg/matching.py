"""Point-group / box matching and the pair filter.

Modes:

- ``bidirectional``: forward assignment groups -> boxes, reverse assignment
  matched boxes -> groups, then keep mask points inside the detector box and
  refit the box around the forward points whose reverse partner agrees.
- ``forward``: forward assignment only; mask points are filtered by the
  detector box, the detector box is kept as is.
- ``reverse``: reverse assignment boxes -> groups only; the box is refit to the
  matched mask, mask points are kept unfiltered.
- ``none``: no matching; every group and every box becomes its own prompt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .prompts import BoxBranchOutput, PointBranchOutput
from .scene import Box3D, ScenePointCloud

MATCH_MODES = ("none", "forward", "reverse", "bidirectional")


@dataclass(frozen=True, eq=False)
class PromptPair:
    points: np.ndarray
    box: Optional[Box3D]
    pair_id: int
    score: float
    # "point" / "box" for single-cue prompts produced without matching
    cue: str = "both"

    def to_dict(self) -> dict:
        return {
            "points": np.asarray(self.points).tolist(),
            "box": None if self.box is None else self.box.to_dict(),
            "pair_id": self.pair_id,
            "score": self.score,
            "cue": self.cue,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptPair":
        box = None if d["box"] is None else Box3D.from_dict(d["box"])
        return cls(np.asarray(d["points"], dtype=np.int64), box, int(d["pair_id"]), float(d["score"]),
                   d.get("cue", "both"))


@dataclass
class MatchConfig:
    mode: str = "bidirectional"
    margin: float = 0.02
    s_min: float = 0.3


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _min_cost_assignment(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian for ``n <= m``; returns column per row.

    Columns are scanned in index order with strict comparisons, so among
    equal-cost alternatives lower indices win.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            assign[p[j] - 1] = j - 1
    return assign


def bipartite_match(sim) -> list[tuple[int, int]]:
    """Maximum-total-similarity one-to-one assignment of rows to columns.

    Returns ``min(G, B)`` ``(row, col)`` pairs sorted by row.
    """
    sim = np.asarray(sim, dtype=float)
    if sim.ndim != 2 or sim.size == 0:
        raise ValueError("similarity matrix must be a non-empty 2D array")
    if not np.all(np.isfinite(sim)):
        raise ValueError("similarity matrix must be finite")
    g, b = sim.shape
    if g <= b:
        cols = _min_cost_assignment(-sim)
        return [(r, int(c)) for r, c in enumerate(cols)]
    rows = _min_cost_assignment(-sim.T)
    return sorted((int(r), c) for c, r in enumerate(rows))


def assignment_total(sim, pairs) -> float:
    return math.fsum(float(sim[r, c]) for r, c in pairs)


def _fit_box(positions: np.ndarray, margin: float) -> Box3D:
    tight = Box3D.from_points(positions)
    return Box3D.from_points(positions, margin=margin * tight.diagonal)


def bidirectional_match(
    pb: PointBranchOutput,
    bb: BoxBranchOutput,
    cloud: ScenePointCloud,
    cfg: Optional[MatchConfig] = None,
) -> list[PromptPair]:
    cfg = cfg or MatchConfig()
    if cfg.mode not in MATCH_MODES:
        raise ValueError(f"unknown matching mode {cfg.mode!r}")
    pos = cloud.positions
    groups = pb.point_groups
    boxes = bb.boxes
    if cfg.mode == "none":
        return _independent_prompts(groups, boxes, pos, cfg)
    if not groups:
        return []
    if not boxes:
        return [PromptPair(g, _fit_box(pos[g], cfg.margin), k, 0.0) for k, g in enumerate(groups)]

    sim = pb.features @ bb.features.T
    pairs: list[PromptPair] = []
    used_groups: set[int] = set()

    def margin_of(box: Box3D) -> float:
        return cfg.margin * box.diagonal

    if cfg.mode == "reverse":
        for b, g in bipartite_match(sim.T):
            used_groups.add(g)
            score = float(sim[g, b])
            if score < cfg.s_min:
                continue
            pts = groups[g]
            pairs.append(PromptPair(pts, _fit_box(pos[pts], cfg.margin), len(pairs), score))
    else:
        forward = bipartite_match(sim)
        if cfg.mode == "bidirectional":
            fwd_boxes = [b for _, b in forward]
            reverse = bipartite_match(sim[:, fwd_boxes].T)
            partner = {fwd_boxes[r]: g for r, g in reverse}
        for g, b in forward:
            used_groups.add(g)
            box = boxes[b]
            if cfg.mode == "forward":
                score = float(sim[g, b])
                pts = groups[g][box.contains(pos[groups[g]], margin_of(box))]
                if score < cfg.s_min or len(pts) == 0:
                    continue
                pairs.append(PromptPair(pts, box, len(pairs), score))
                continue
            g_rev = partner[b]
            score = 0.5 * (float(sim[g, b]) + float(sim[g_rev, b]))
            # forward points whose reverse partner mask agrees: refit the box around them
            kept_fwd = np.intersect1d(groups[g], groups[g_rev], assume_unique=True)
            # reverse (mask) points whose forward partner box contains them
            rev = groups[g_rev]
            kept_rev = rev[box.contains(pos[rev], margin_of(box))]
            if score < cfg.s_min or len(kept_fwd) == 0 or len(kept_rev) == 0:
                continue
            new_box = _fit_box(pos[kept_fwd], cfg.margin)
            kept_rev = kept_rev[new_box.contains(pos[kept_rev])]
            if len(kept_rev) == 0:
                continue
            pairs.append(PromptPair(kept_rev, new_box, len(pairs), score))

    # groups left over when there are more groups than boxes become point-led pairs
    for g, pts in enumerate(groups):
        if g in used_groups:
            continue
        score = float(sim[g].max())
        pairs.append(PromptPair(pts, _fit_box(pos[pts], cfg.margin), len(pairs), score))
    return pairs


def _independent_prompts(groups, boxes, pos, cfg: MatchConfig) -> list[PromptPair]:
    pairs: list[PromptPair] = []
    for g in groups:
        pairs.append(PromptPair(g, None, len(pairs), 1.0, cue="point"))
    for box in boxes:
        inside = np.nonzero(box.contains(pos, cfg.margin * box.diagonal))[0]
        if len(inside) == 0:
            continue
        pairs.append(PromptPair(inside, box, len(pairs), 1.0, cue="box"))
    return pairs
