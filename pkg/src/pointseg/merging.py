"""Mask-label affinities between prompt points and affinity-driven region growing."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .matching import PromptPair
from .projection import DEFAULT_DEPTH_TOL, visibility
from .refinement import medoid_index
from .scene import InstanceLabeling3D, Mask2D, PosedFrame, ScenePointCloud

DEFAULT_TAU = 0.7
DEFAULT_PATCH = 5


class PointNotVisibleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabelDistribution:
    labels: np.ndarray
    probs: np.ndarray
    point_id: int
    frame_id: int

    @property
    def valid(self) -> bool:
        return len(self.labels) > 0

    def as_dict(self) -> dict[int, float]:
        return {int(l): float(p) for l, p in zip(self.labels, self.probs)}


def patch_histograms(labels: np.ndarray, rows: np.ndarray, cols: np.ndarray, patch: int, num_labels: int):
    """Counts of each nonzero label in a ``patch x patch`` window per (row, col).

    Window pixels outside the image are ignored. Returns ``(len(rows), num_labels)``
    counts; column 0 (background) is always zero.
    """
    if patch < 1 or patch % 2 == 0:
        raise ValueError("patch must be a positive odd integer")
    h, w = labels.shape
    r = patch // 2
    offs = np.arange(-r, r + 1)
    rr = rows[:, None, None] + offs[None, :, None]
    cc = cols[:, None, None] + offs[None, None, :]
    inb = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    lab = labels[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
    lab = np.where(inb, lab, 0).reshape(len(rows), -1)
    owner = np.repeat(np.arange(len(rows)), lab.shape[1])
    counts = np.bincount(owner * num_labels + lab.reshape(-1), minlength=len(rows) * num_labels)
    counts = counts.reshape(len(rows), num_labels).astype(float)
    counts[:, 0] = 0.0
    return counts


def label_distribution(point_idx: int, cloud: ScenePointCloud, frame: PosedFrame, mask: Mask2D,
                       patch: int = DEFAULT_PATCH, depth_tol: float = DEFAULT_DEPTH_TOL) -> LabelDistribution:
    vis, row, col = visibility(cloud.positions[[point_idx]], frame, depth_tol)
    if not vis[0]:
        raise PointNotVisibleError(f"point {point_idx} is not visible in frame {frame.frame_id}")
    num_labels = int(mask.labels.max()) + 1
    counts = patch_histograms(mask.labels, row, col, patch, num_labels)[0]
    nz = np.nonzero(counts)[0]
    probs = counts[nz] / counts[nz].sum() if len(nz) else counts[nz]
    return LabelDistribution(nz, probs, point_idx, frame.frame_id)


def frame_affinity(di: LabelDistribution, dj: LabelDistribution) -> float:
    if not (di.valid and dj.valid):
        raise ValueError("affinity needs two valid label distributions")
    if di.frame_id != dj.frame_id:
        raise ValueError("distributions come from different frames")
    a, b = di.as_dict(), dj.as_dict()
    dot = sum(p * b.get(l, 0.0) for l, p in a.items())
    return dot / (np.linalg.norm(di.probs) * np.linalg.norm(dj.probs))


@dataclass(frozen=True, eq=False)
class AffinityMatrix:
    """Sparse symmetric affinities in CSR form (both directions stored).

    Only pairs with evidence are stored; the diagonal is implicitly 1.
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    evidence: np.ndarray

    def row(self, i: int):
        s, e = self.indptr[i], self.indptr[i + 1]
        return self.indices[s:e], self.values[s:e], self.evidence[s:e]

    def get(self, i: int, j: int) -> Optional[float]:
        if i == j:
            return 1.0
        idx, val, _ = self.row(i)
        k = np.searchsorted(idx, j)
        if k < len(idx) and idx[k] == j:
            return float(val[k])
        return None

    def get_evidence(self, i: int, j: int) -> float:
        idx, _, ev = self.row(i)
        k = np.searchsorted(idx, j)
        if k < len(idx) and idx[k] == j:
            return float(ev[k])
        return 0.0

    @property
    def nnz(self) -> int:
        return len(self.indices)

    @classmethod
    def from_entries(cls, n: int, i, j, values, evidence) -> "AffinityMatrix":
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        values = np.asarray(values, dtype=float)
        evidence = np.asarray(evidence, dtype=float)
        off = i != j
        i, j, values, evidence = i[off], j[off], values[off], evidence[off]
        rows = np.concatenate([i, j])
        cols = np.concatenate([j, i])
        vals = np.concatenate([values, values])
        evs = np.concatenate([evidence, evidence])
        order = np.lexsort((cols, rows))
        rows, cols, vals, evs = rows[order], cols[order], vals[order], evs[order]
        keep = np.ones(len(rows), dtype=bool)
        keep[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        rows, cols, vals, evs = rows[keep], cols[keep], vals[keep], evs[keep]
        indptr = np.searchsorted(rows, np.arange(n + 1))
        return cls(n, indptr, cols, vals, evs)

    @classmethod
    def from_dense(cls, dense, evidence=None) -> "AffinityMatrix":
        """Dense input; NaN marks an absent entry. Upper triangle is used."""
        dense = np.asarray(dense, dtype=float)
        n = len(dense)
        iu, ju = np.triu_indices(n, 1)
        vals = dense[iu, ju]
        ev = np.ones_like(vals) if evidence is None else np.asarray(evidence, dtype=float)[iu, ju]
        present = ~np.isnan(vals) & (ev > 0)
        return cls.from_entries(n, iu[present], ju[present], vals[present], ev[present])


@dataclass(frozen=True, eq=False)
class FrameEvidence:
    """Per-frame affinities on point pairs ``(i, j)`` with visibility weights."""

    i: np.ndarray
    j: np.ndarray
    scores: np.ndarray
    alpha: np.ndarray


def aggregate_affinity(per_frame: Sequence[FrameEvidence], n: int) -> AffinityMatrix:
    """Visibility-weighted mean of per-frame scores; pairs with zero weight are absent.

    Contributions for each pair are summed in value order so the result does not
    depend on frame order.
    """
    if not per_frame:
        return AffinityMatrix.from_entries(n, [], [], [], [])
    i = np.concatenate([f.i for f in per_frame]).astype(np.int64)
    j = np.concatenate([f.j for f in per_frame]).astype(np.int64)
    s = np.concatenate([f.scores for f in per_frame]).astype(float)
    a = np.concatenate([f.alpha for f in per_frame]).astype(float)
    if len(i) == 0:
        return AffinityMatrix.from_entries(n, [], [], [], [])
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    key = lo * n + hi
    w = a * s
    order = np.lexsort((a, w, key))
    key, w, a = key[order], w[order], a[order]
    starts = np.nonzero(np.concatenate([[True], key[1:] != key[:-1]]))[0]
    num = np.add.reduceat(w, starts)
    den = np.add.reduceat(a, starts)
    ukey = key[starts]
    present = den > 0
    vals = num[present] / den[present]
    return AffinityMatrix.from_entries(n, ukey[present] // n, ukey[present] % n, vals, den[present])


def frame_evidence(positions: np.ndarray, edges: np.ndarray, frame: PosedFrame, labels: np.ndarray,
                   patch: int = DEFAULT_PATCH, depth_tol: float = DEFAULT_DEPTH_TOL) -> FrameEvidence:
    """Affinity evidence from one labelled frame for the given point pairs.

    A co-visible pair counts (alpha = 1) when at least one of the two points has a
    valid label distribution; if only one does, the masks disagree and the
    score is 0. Pairs where neither point is labelled carry no evidence.
    """
    vis, row, col = visibility(positions, frame, depth_tol)
    num_labels = int(labels.max()) + 1
    vis_idx = np.nonzero(vis)[0]
    slot = np.full(len(positions), -1)
    slot[vis_idx] = np.arange(len(vis_idx))
    counts = patch_histograms(labels, row[vis_idx], col[vis_idx], patch, num_labels)
    norms = np.linalg.norm(counts, axis=1)
    valid = norms > 0
    unit = np.divide(counts, norms[:, None], out=np.zeros_like(counts), where=valid[:, None])
    ei, ej = edges[:, 0], edges[:, 1]
    both = vis[ei] & vis[ej]
    ei, ej = ei[both], ej[both]
    si, sj = slot[ei], slot[ej]
    vi, vj = valid[si], valid[sj]
    alpha = (vi | vj).astype(float)
    scores = np.where(vi & vj, np.einsum("ij,ij->i", unit[si], unit[sj]), 0.0)
    keep = alpha > 0
    return FrameEvidence(ei[keep], ej[keep], np.clip(scores[keep], 0.0, 1.0), alpha[keep])


def knn_edges(positions: np.ndarray, k: int = 8) -> np.ndarray:
    """Undirected k-nearest-neighbour edges ``(i < j)``, sorted and unique."""
    n = len(positions)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    kk = min(k + 1, n)
    _, nn = cKDTree(positions).query(positions, k=kk)
    i = np.repeat(np.arange(n), kk - 1)
    j = nn[:, 1:].reshape(-1)
    e = np.stack([np.minimum(i, j), np.maximum(i, j)], axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def region_point_score(region: Iterable[int], j: int, A: AffinityMatrix) -> Optional[float]:
    """Evidence-weighted mean affinity between ``j`` and region members; None without evidence."""
    num = den = 0.0
    for k in region:
        if k == j:
            continue
        v = A.get(k, j)
        if v is None:
            continue
        ev = A.get_evidence(k, j)
        num += ev * v
        den += ev
    if den == 0:
        return None
    return num / den


def _adjacency(A: AffinityMatrix, neighbors) -> list[np.ndarray]:
    if neighbors is None:
        return [A.row(i)[0] for i in range(A.n)]
    if isinstance(neighbors, np.ndarray) and neighbors.ndim == 2:
        adj: list[list[int]] = [[] for _ in range(A.n)]
        for a, b in neighbors:
            adj[a].append(int(b))
            adj[b].append(int(a))
        return [np.unique(np.concatenate([np.asarray(x, dtype=np.int64), A.row(i)[0]])) for i, x in enumerate(adj)]
    return [np.unique(np.concatenate([np.asarray(x, dtype=np.int64), A.row(i)[0]])) for i, x in enumerate(neighbors)]


def affinity_merge(A: AffinityMatrix, neighbors=None, tau: float = DEFAULT_TAU,
                   linkage: str = "frontier") -> np.ndarray:
    """Region growing over prompt points; returns labels ``1..K`` in seed order.

    Points are scanned in index order; an unlabelled point seeds a new region that
    grows breadth-first through ``neighbors`` (edge list, adjacency lists, or
    None for the stored affinity structure). A neighbour ``j`` reached from the
    point ``i`` being expanded joins when its score exceeds ``tau``:

    - ``frontier``: the region-point score of the singleton ``{i}``, i.e. ``A(i, j)``.
    - ``region``: the evidence-weighted mean over every region member (order
      dependent; a rejected point is re-tested when another member reaches it).
    """
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    if linkage not in ("frontier", "region"):
        raise ValueError(f"unknown linkage {linkage!r}")
    adj = _adjacency(A, neighbors)
    labels = np.zeros(A.n, dtype=np.int64)
    rid = 0
    for seed in range(A.n):
        if labels[seed]:
            continue
        rid += 1
        labels[seed] = rid
        queue = deque([seed])
        num: dict[int, float] = {}
        den: dict[int, float] = {}

        def absorb(k: int) -> None:
            idx, val, ev = A.row(k)
            for j, v, e in zip(idx.tolist(), val.tolist(), ev.tolist()):
                if not labels[j]:
                    num[j] = num.get(j, 0.0) + e * v
                    den[j] = den.get(j, 0.0) + e

        if linkage == "region":
            absorb(seed)
        while queue:
            i = queue.popleft()
            for j in adj[i].tolist():
                if labels[j]:
                    continue
                if linkage == "frontier":
                    score = A.get(i, j)
                else:
                    score = num[j] / den[j] if den.get(j) else None
                if score is not None and score > tau:
                    labels[j] = rid
                    queue.append(j)
                    if linkage == "region":
                        absorb(j)
    return labels


def threshold_components(A: AffinityMatrix, tau: float) -> np.ndarray:
    """Connected components of the graph of entries strictly above ``tau``."""
    parent = list(range(A.n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(A.n):
        idx, val, _ = A.row(i)
        for j, v in zip(idx.tolist(), val.tolist()):
            if v > tau:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    roots = [find(i) for i in range(A.n)]
    remap: dict[int, int] = {}
    return np.array([remap.setdefault(r, len(remap) + 1) for r in roots], dtype=np.int64)


def pair_medoids(pairs: Sequence[PromptPair], cloud: ScenePointCloud) -> np.ndarray:
    return np.array([cloud.positions[p.points[medoid_index(cloud.positions[p.points], 256)]] for p in pairs])


def propagate_labels(prompt_labeling, pairs: Sequence[PromptPair], cloud: ScenePointCloud,
                     scores: Optional[dict[int, float]] = None) -> InstanceLabeling3D:
    """Spread per-pair region labels onto the scene.

    Points claimed by pairs of different regions go to the region whose pair
    medoid is nearest; unclaimed points stay 0.
    """
    region = np.asarray(prompt_labeling, dtype=np.int64)
    if len(region) != len(pairs):
        raise ValueError("one region label per pair required")
    n = len(cloud)
    out = np.zeros(n, dtype=np.int64)
    best = np.full(n, np.inf)
    medoids = pair_medoids(pairs, cloud) if pairs else np.zeros((0, 3))
    for k, pair in enumerate(pairs):
        idx = np.asarray(pair.points, dtype=np.int64)
        d = np.linalg.norm(cloud.positions[idx] - medoids[k], axis=1)
        closer = d < best[idx]
        out[idx[closer]] = region[k]
        best[idx[closer]] = d[closer]
    return InstanceLabeling3D.from_labels(out, scores)
