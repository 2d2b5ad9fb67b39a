"""End-to-end orchestration: prompts, matching, per-frame refinement, merging,
evaluation, plus the ablation suites."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import synthbench
from .evaluation import EvalResult, evaluate, mean_results
from .io import LoadedScene, load_scene, save_scene, write_colored_ply, write_labels
from .matching import MATCH_MODES, MatchConfig, PromptPair, bidirectional_match
from .merging import (aggregate_affinity, affinity_merge, frame_evidence, knn_edges,
                      propagate_labels)
from .projection import visibility
from .prompts import (BoxBranchOutput, PointBranchOutput, PromptBackendSpec, box_branch, per_row,
                      point_branch)
from .refinement import (FramePrompt, SegmenterSpec, fixed_refinement, iterative_post_refinement,
                         make_segmenter, project_prompt_pair)
from .scene import Box3D, InstanceLabeling3D, PosedFrame, ScenePointCloud

ORACLE_KINDS = ("oracle", "multiview")


class ConfigError(ValueError):
    pass


class BackendError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage


def _backend(kind: str = "oracle", **params) -> dict:
    return {"kind": kind, "params": params}


@dataclass
class PipelineConfig:
    theta: float = 0.05
    tau: float = 0.7
    patch: int = 5
    depth_tol: float = 0.05
    margin: float = 0.02
    s_min: float = 0.3
    views: int = 6
    grid_h: int = 128
    grid_w: int = 128
    grid_d: int = 64
    scale: float = 0.9
    max_iter: int = 10
    knn: int = 8
    point_backend: dict = field(default_factory=_backend)
    box_backend: dict = field(default_factory=_backend)
    segmenter: dict = field(default_factory=_backend)
    noise: dict = field(default_factory=dict)
    threads: int = 1
    seed: int = 0
    # ablation switches
    matching: str = "bidirectional"
    refinement: str = "adaptive"
    fixed_iters: int = 0
    merging: str = "affinity"
    linkage: str = "frontier"
    voxel: float = 0.05
    fill_radius: float = 0.1
    min_points: int = 30

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(ok: bool, msg: str):
            if not ok:
                raise ConfigError(msg)

        need(0 < self.theta < 1, f"theta must lie in (0, 1), got {self.theta}")
        need(0 < self.tau < 1, f"tau must lie in (0, 1), got {self.tau}")
        need(self.patch >= 1 and self.patch % 2 == 1, "patch must be a positive odd integer")
        need(self.depth_tol > 0, "depth_tol must be > 0")
        need(0 <= self.margin < 1, "margin must lie in [0, 1)")
        need(-1 <= self.s_min <= 1, "s_min must lie in [-1, 1]")
        need(self.views >= 1, "views must be >= 1")
        need(min(self.grid_h, self.grid_w, self.grid_d) >= 8, "grid dimensions must be >= 8")
        need(0 < self.scale <= 1, "scale must lie in (0, 1]")
        need(self.max_iter >= 1, "max_iter must be >= 1")
        need(self.knn >= 1, "knn must be >= 1")
        need(self.threads >= 1, "threads must be >= 1")
        need(self.matching in MATCH_MODES, f"matching must be one of {MATCH_MODES}")
        need(self.refinement in ("adaptive", "fixed"), "refinement must be 'adaptive' or 'fixed'")
        need(self.fixed_iters >= 0, "fixed_iters must be >= 0")
        need(self.merging in ("affinity", "vote"), "merging must be 'affinity' or 'vote'")
        need(self.linkage in ("frontier", "region"), "linkage must be 'frontier' or 'region'")
        need(self.voxel > 0, "voxel must be > 0")
        need(self.fill_radius >= 0, "fill_radius must be >= 0")
        need(self.min_points >= 0, "min_points must be >= 0")
        for name in ("point_backend", "box_backend", "segmenter"):
            spec = getattr(self, name)
            need(isinstance(spec, dict) and isinstance(spec.get("kind"), str)
                 and set(spec) <= {"kind", "params"}, f"{name} must be {{'kind': str, 'params': {{...}}}}")
        for kind, mag in self.noise.items():
            need(kind in synthbench.NOISE_KINDS, f"unknown noise kind {kind!r}")
            need(isinstance(mag, (int, float)) and mag >= 0, f"noise {kind} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def replace(self, **changes) -> "PipelineConfig":
        d = self.to_dict()
        d.update(changes)
        return PipelineConfig.from_dict(d)


NOISE_PRESETS = {
    "none": {},
    "standard": {"dropout": 0.15, "box_jitter": 0.05, "dilation": 2},
    "boundary": {"dilation": 3},
}


# scene inputs


@dataclass(eq=False)
class SceneData:
    cloud: ScenePointCloud
    frames: list[PosedFrame]
    gt: Optional[InstanceLabeling3D] = None
    truth: Optional[synthbench.GroundTruth] = None
    name: str = ""


def save_synthetic(scene: synthbench.SyntheticScene, root, depth_format: str = "bin") -> Path:
    extra = {"seed": scene.seed, "spec": scene.spec.to_dict(),
             "instances": [i.to_dict() for i in scene.instances],
             "room_size": list(scene.spec.room_size)}
    return save_scene(root, scene.cloud, scene.frames, scene.gt.labels, scene.gt_images,
                      depth_format=depth_format, extra=extra)


def as_scene_data(scene) -> SceneData:
    if isinstance(scene, SceneData):
        return scene
    if isinstance(scene, synthbench.SyntheticScene):
        return SceneData(scene.cloud, scene.frames, scene.gt, scene.truth(), f"seed{scene.seed}")
    if isinstance(scene, (str, Path)):
        scene = load_scene(scene)
    if isinstance(scene, LoadedScene):
        truth = None
        ex = scene.extra or {}
        if scene.gt is not None and scene.gt_images is not None and "instances" in ex:
            insts = [synthbench.InstanceInfo(i["shape"], np.asarray(i["center"]), np.asarray(i["size"]))
                     for i in ex["instances"]]
            truth = synthbench.GroundTruth(scene.gt.labels, {f.frame_id: im for f, im in
                                                             zip(scene.frames, scene.gt_images)},
                                           insts, np.asarray(ex["room_size"], dtype=float))
        return SceneData(scene.cloud, scene.frames, scene.gt, truth, scene.root.name)
    raise TypeError(f"cannot run on {type(scene).__name__}")


# backend construction


def _route_noise(cfg: PipelineConfig, allowed: Sequence[str]) -> list[tuple[str, float]]:
    return [(k, float(cfg.noise[k])) for k in synthbench.NOISE_KINDS if k in allowed and cfg.noise.get(k)]


def _oracle_params(spec: dict, data: SceneData, cfg: PipelineConfig, allowed) -> dict:
    params = dict(spec.get("params", {}))
    if spec["kind"] in ORACLE_KINDS:
        if data.truth is None:
            raise ConfigError(f"backend {spec['kind']!r} needs a scene with ground truth")
        params.setdefault("truth", data.truth)
        params.setdefault("seed", cfg.seed)
        params.setdefault("noise", _route_noise(cfg, allowed))
    if spec["kind"] == "multiview":
        params.setdefault("H", cfg.grid_h)
        params.setdefault("W", cfg.grid_w)
        params.setdefault("D", cfg.grid_d)
        params.setdefault("scale", cfg.scale)
        params.setdefault("num_views", cfg.views)
    return params


# stage helpers


def _prompts_to_json(pb: PointBranchOutput, bb: BoxBranchOutput) -> dict:
    return {"groups": [g.tolist() for g in pb.point_groups], "group_features": pb.features.tolist(),
            "boxes": [b.to_dict() for b in bb.boxes], "box_features": bb.features.tolist()}


def _prompts_from_json(d: dict, n: int):
    groups = [np.asarray(g, dtype=np.int64) for g in d["groups"]]
    gf = per_row(d["group_features"], len(groups))
    boxes = [Box3D.from_dict(b) for b in d["boxes"]]
    bf = per_row(d["box_features"], len(boxes))
    logits = np.zeros((n, gf.shape[1] if gf.size else 1))
    return PointBranchOutput(logits, groups, gf), BoxBranchOutput(boxes, bf)


def frame_masks(pairs: Sequence[PromptPair], data: SceneData, frame: PosedFrame, segmenter,
                cfg: PipelineConfig) -> np.ndarray:
    """Refined masks of every pair in one frame, painted into one label image.

    Label ``k + 1`` marks pair ``k``. Where masks overlap the smaller mask wins
    (ties to the lower pair id).
    """
    masks = []
    for pair in pairs:
        fp = project_prompt_pair(pair, data.cloud, frame, cfg.depth_tol)
        if fp is None:
            continue
        if cfg.refinement == "adaptive":
            m = iterative_post_refinement(fp, frame, segmenter, cfg.theta, cfg.max_iter)
        else:
            m = fixed_refinement(fp, frame, segmenter, cfg.fixed_iters)
        fg = m.foreground
        if fg.any():
            masks.append((int(fg.sum()), pair.pair_id, fg))
    out = np.zeros(frame.shape, dtype=np.int32)
    for _, pid, fg in sorted(masks, key=lambda t: (-t[0], -t[1])):
        out[fg] = pid + 1
    return out


def observe(positions: np.ndarray, frames: Sequence[PosedFrame], label_images: Sequence[np.ndarray],
            num_labels: int, depth_tol: float):
    """Per point: frames where visible, and votes for each label at its own pixel."""
    obs = np.zeros(len(positions), dtype=np.int64)
    votes = np.zeros((len(positions), num_labels), dtype=np.int64)
    for frame, img in zip(frames, label_images):
        vis, row, col = visibility(positions, frame, depth_tol)
        idx = np.nonzero(vis)[0]
        obs[idx] += 1
        np.add.at(votes, (idx, img[row[idx], col[idx]]), 1)
    return obs, votes


def voxel_representatives(positions: np.ndarray, voxel: float):
    """One actual point per occupied voxel (the one nearest the voxel centroid).

    Returns ``(rep_index, cell_of_point)``; reps are ordered by voxel key.
    """
    keys = np.floor((positions - positions.min(axis=0)) / voxel).astype(np.int64)
    _, cell, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    cell = cell.reshape(-1)
    cent = np.zeros((len(counts), 3))
    np.add.at(cent, cell, positions)
    cent /= counts[:, None]
    d = np.linalg.norm(positions - cent[cell], axis=1)
    order = np.lexsort((np.arange(len(positions)), d, cell))
    first = np.concatenate([[True], cell[order][1:] != cell[order][:-1]])
    return order[first], cell


def _fill_unobserved(positions: np.ndarray, labels: np.ndarray, settled: np.ndarray, radius: float) -> np.ndarray:
    """Unsettled entries copy the nearest settled one within ``radius`` (else keep their label)."""
    out = labels.copy()
    miss = np.nonzero(~settled)[0]
    if radius <= 0 or len(miss) == 0 or not settled.any():
        return out
    seen = np.nonzero(settled)[0]
    d, nn = cKDTree(positions[seen]).query(positions[miss], k=1)
    ok = d <= radius
    out[miss[ok]] = labels[seen[nn[ok]]]
    return out


def merge_affinity(data: SceneData, pairs, label_images, cfg: PipelineConfig, pool=None) -> InstanceLabeling3D:
    """Group voxel representatives by mask-label affinity, then label every point by its voxel.

    Representatives that masks cover in at least half their observations are the
    merge points; the rest are background. Unobserved representatives and
    fragments below ``min_points`` take the label of the nearest settled one.
    """
    pos = data.cloud.positions
    reps, cell = voxel_representatives(pos, cfg.voxel)
    rp = pos[reps]
    obs, votes = observe(rp, data.frames, label_images, len(pairs) + 1, cfg.depth_tol)
    covered = votes[:, 1:].sum(axis=1)
    fg_idx = np.nonzero((covered > 0) & (2 * covered >= obs))[0]
    fp = rp[fg_idx]
    edges = knn_edges(fp, cfg.knn)

    def one(k):
        return frame_evidence(fp, edges, data.frames[k], label_images[k], cfg.patch, cfg.depth_tol)

    ks = range(len(data.frames))
    per_frame = list(pool.map(one, ks)) if pool else [one(k) for k in ks]
    A = aggregate_affinity(per_frame, len(fp))
    region = affinity_merge(A, edges, cfg.tau, cfg.linkage)
    nreg = int(region.max()) if len(region) else 0
    reg_votes = np.zeros((nreg + 1, len(pairs) + 1))
    np.add.at(reg_votes, region, votes[fg_idx])
    per_rep_points = np.bincount(cell, minlength=len(rp))
    reg_points = np.bincount(region, weights=per_rep_points[fg_idx], minlength=nreg + 1)
    instance = reg_points >= cfg.min_points
    instance[0] = False
    dominant = np.argmax(reg_votes[:, 1:], axis=1)
    rep_label = np.zeros(len(rp), dtype=np.int64)
    rep_label[fg_idx] = np.where(instance[region], region, 0)
    settled = obs > 0
    settled[fg_idx[~instance[region]]] = False
    rep_label = _fill_unobserved(rp, rep_label, settled, cfg.fill_radius)
    return _finalize(rep_label[cell], {int(r): pairs[dominant[r]].score for r in range(1, nreg + 1)
                                       if instance[r]}, cfg)


def merge_vote(data: SceneData, pairs, label_images, cfg: PipelineConfig) -> InstanceLabeling3D:
    """Per-point plurality of pair labels over the frames where the point is seen."""
    pos = data.cloud.positions
    obs, votes = observe(pos, data.frames, label_images, len(pairs) + 1, cfg.depth_tol)
    fg = votes[:, 1:]
    covered = fg.sum(axis=1)
    best = np.argmax(fg, axis=1) + 1
    labels = np.where((covered > 0) & (2 * covered >= obs), best, 0)
    labels = _fill_unobserved(pos, labels, obs > 0, cfg.fill_radius)
    return _finalize(labels, {k + 1: p.score for k, p in enumerate(pairs)}, cfg)


def _finalize(labels: np.ndarray, scores: dict, cfg: PipelineConfig) -> InstanceLabeling3D:
    counts = np.bincount(labels)
    small = counts < cfg.min_points
    small[0] = False
    labels = np.where(small[labels], 0, labels)
    return InstanceLabeling3D.from_labels(labels, scores)


# driver


STAGES = ("prompts", "matching", "masks", "merge")


@dataclass
class RunResult:
    labeling: InstanceLabeling3D
    pairs: list[PromptPair]
    eval: Optional[EvalResult]
    timings: dict[str, float]

    def report(self) -> str:
        total = sum(self.timings.values())
        lines = [f"{k:<12}{v:>10.3f} s" for k, v in self.timings.items()]
        lines.append(f"{'total':<12}{total:>10.3f} s")
        if self.eval is not None:
            lines += ["", self.eval.table()]
        return "\n".join(lines)


def _stage(name: str, fn: Callable, *args):
    try:
        return fn(*args)
    except (ConfigError, FileNotFoundError, OSError):
        raise
    except Exception as e:  # backend failures surface with the stage they came from
        raise BackendError(name, e) from e


def run_pipeline(scene, config: Optional[PipelineConfig] = None, out_dir=None,
                 checkpoint_dir=None) -> RunResult:
    """Run every stage; with ``checkpoint_dir`` each stage's output is saved there
    and reused when already present."""
    cfg = config or PipelineConfig()
    timings: dict[str, float] = {}
    t = time.perf_counter()
    data = as_scene_data(scene)
    timings["load"] = time.perf_counter() - t
    ck = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ck is not None:
        ck.mkdir(parents=True, exist_ok=True)
    n = len(data.cloud)

    # prompts
    t = time.perf_counter()
    path = ck / "prompts.json" if ck else None
    if path is not None and path.exists():
        pb, bb = _prompts_from_json(json.loads(path.read_text()), n)
    else:
        pspec = PromptBackendSpec(cfg.point_backend["kind"],
                                  _oracle_params(cfg.point_backend, data, cfg, synthbench.POINT_NOISE))
        bspec = PromptBackendSpec(cfg.box_backend["kind"],
                                  _oracle_params(cfg.box_backend, data, cfg, synthbench.BOX_NOISE))
        pb = _stage("prompts", point_branch, data.cloud, pspec)
        bb = _stage("prompts", box_branch, data.cloud, bspec)
        if path is not None:
            path.write_text(json.dumps(_prompts_to_json(pb, bb)))
    timings["prompts"] = time.perf_counter() - t

    # matching
    t = time.perf_counter()
    path = ck / "pairs.json" if ck else None
    if path is not None and path.exists():
        pairs = [PromptPair.from_dict(d) for d in json.loads(path.read_text())]
    else:
        mcfg = MatchConfig(cfg.matching, cfg.margin, cfg.s_min)
        pairs = _stage("matching", bidirectional_match, pb, bb, data.cloud, mcfg)
        if path is not None:
            path.write_text(json.dumps([p.to_dict() for p in pairs]))
    timings["matching"] = time.perf_counter() - t

    # masks
    t = time.perf_counter()
    path = ck / "masks.npz" if ck else None
    segmenter = _stage("masks", make_segmenter, SegmenterSpec(
        cfg.segmenter["kind"], _oracle_params(cfg.segmenter, data, cfg, synthbench.MASK_NOISE)))
    workers = cfg.threads if getattr(segmenter, "thread_safe", False) else 1
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        if path is not None and path.exists():
            with np.load(path) as z:
                label_images = [z[f"f{k}"] for k in range(len(data.frames))]
        else:
            def one(frame):
                return frame_masks(pairs, data, frame, segmenter, cfg)
            if workers > 1:
                label_images = _stage("masks", lambda: list(pool.map(one, data.frames)))
            else:
                label_images = _stage("masks", lambda: [one(f) for f in data.frames])
            if path is not None:
                np.savez_compressed(path, **{f"f{k}": im for k, im in enumerate(label_images)})
        timings["masks"] = time.perf_counter() - t

        # merge
        t = time.perf_counter()
        if cfg.merging == "affinity":
            labeling = merge_affinity(data, pairs, label_images, cfg, pool if cfg.threads > 1 else None)
        else:
            labeling = merge_vote(data, pairs, label_images, cfg)
        timings["merge"] = time.perf_counter() - t

    t = time.perf_counter()
    result = evaluate(labeling, data.gt) if data.gt is not None and data.gt.num_instances > 0 else None
    timings["evaluate"] = time.perf_counter() - t
    run = RunResult(labeling, pairs, result, timings)
    if out_dir is not None:
        t = time.perf_counter()
        write_outputs(out_dir, data, run)
        timings["write"] = time.perf_counter() - t
        (Path(out_dir) / "report.txt").write_text(run.report() + "\n")
    return run


def write_outputs(out_dir, data: SceneData, run: RunResult) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prov = [{"pair_id": p.pair_id, "score": p.score, "cue": p.cue, "num_points": int(len(p.points)),
             "box": None if p.box is None else p.box.to_dict()} for p in run.pairs]
    write_labels(out, run.labeling, prov)
    if run.eval is not None:
        (out / "eval.json").write_text(run.eval.to_json())
    write_colored_ply(out / "colored.ply", data.cloud, run.labeling)


# ablations


def benchmark_spec(seed: int) -> synthbench.SceneSpec:
    """5-10 instances and about 50k points per scene."""
    k = 5 + seed % 6
    return synthbench.SceneSpec(num_instances=k, points_per_instance=40000 // k)


def benchmark_scenes(seeds: Sequence[int], threads: int = 1) -> list[synthbench.SyntheticScene]:
    def gen(s):
        return synthbench.generate_scene(benchmark_spec(s), seed=s)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(gen, seeds))
    return [gen(s) for s in seeds]


def _components(on: dict) -> dict:
    return {"matching": "bidirectional" if on["BMP"] else "none",
            "refinement": "adaptive" if on["IPR"] else "fixed", "fixed_iters": 0,
            "merging": "affinity" if on["AM"] else "vote"}


def suite_variants(suite: str) -> tuple[str, list[tuple[str, dict]]]:
    """Noise preset and ``(row name, config overrides)`` for each variant."""
    if suite == "components":
        rows = []
        for bits in range(8):
            on = {"BMP": bool(bits & 4), "IPR": bool(bits & 2), "AM": bool(bits & 1)}
            name = "+".join(k for k, v in on.items() if v) or "baseline"
            rows.append((name, _components(on)))
        return "standard", rows
    if suite == "matching-direction":
        return "standard", [(m, {"matching": m}) for m in MATCH_MODES]
    if suite == "iteration-strategy":
        rows = [(f"fixed-{k}", {"refinement": "fixed", "fixed_iters": k}) for k in range(6)]
        return "boundary", rows + [("adaptive", {"refinement": "adaptive"})]
    if suite == "change-ratio":
        return "boundary", [(f"ratio-{r}%", {"theta": r / 100}) for r in (1, 3, 5, 8, 10, 15)]
    raise ConfigError(f"unknown ablation suite {suite!r}")


SUITES = ("components", "matching-direction", "iteration-strategy", "change-ratio")


@dataclass
class AblationReport:
    suite: str
    rows: dict[str, EvalResult]
    checks: dict[str, bool] = field(default_factory=dict)

    def table(self) -> str:
        lines = [f"{'variant':<16}{'mAP':>8}{'AP50':>8}{'AP25':>8}"]
        for name, r in self.rows.items():
            lines.append(f"{name:<16}{r.mAP:>8.3f}{r.AP50:>8.3f}{r.AP25:>8.3f}")
        for name, ok in self.checks.items():
            lines.append(f"check {name}: {'pass' if ok else 'FAIL'}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({"suite": self.suite, "checks": self.checks,
                           "rows": {k: asdict(v) for k, v in self.rows.items()}}, indent=2)


def ordering_checks(suite: str, rows: dict[str, EvalResult], gap: float = 0.01) -> dict[str, bool]:
    m = {k: v.mAP for k, v in rows.items()}
    if suite == "matching-direction":
        seq = ["none", "forward", "reverse", "bidirectional"]
        return {"bidirectional > reverse > forward > none":
                all(m[b] - m[a] > gap for a, b in zip(seq, seq[1:]))}
    if suite == "iteration-strategy":
        return {"adaptive >= best fixed": all(m["adaptive"] >= m[f"fixed-{k}"] for k in range(6))}
    if suite == "components":
        base = m["baseline"]
        out = {f"{c} alone > baseline": m[c] > base for c in ("BMP", "IPR", "AM")}
        out["all on is maximum"] = all(m["BMP+IPR+AM"] >= v for v in m.values())
        return out
    return {}


def run_ablation(suite: str, seeds: Sequence[int], config: Optional[PipelineConfig] = None,
                 scenes: Optional[Sequence] = None, noise: Optional[dict] = None) -> AblationReport:
    preset, variants = suite_variants(suite)
    base = config or PipelineConfig()
    noise = NOISE_PRESETS[preset] if noise is None else noise
    scenes = list(scenes) if scenes is not None else benchmark_scenes(seeds, base.threads)
    data = [as_scene_data(s) for s in scenes]
    rows = {}
    with ThreadPoolExecutor(max_workers=base.threads) as pool:
        for name, over in variants:
            # scene-level parallelism; each run is single-threaded and seeded by its position
            cfgs = [base.replace(noise=dict(noise), threads=1, seed=base.seed + k, **over)
                    for k in range(len(data))]
            results = [r.eval for r in pool.map(run_pipeline, data, cfgs)]
            rows[name] = mean_results(results, [d.name for d in data])
    return AblationReport(suite, rows, ordering_checks(suite, rows))
