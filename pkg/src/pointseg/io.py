"""On-disk formats: PLY clouds, posed RGB-D scene directories, label files.

Scene directory layout::

    manifest.json     intrinsics + 4x4 row-major world-to-camera per frame
    cloud.ply
    depth/NNNNNN.png  16-bit depth in millimetres (or .bin, raw float32 metres)
    gt/labels.bin     optional per-point GT instance ids (int32 LE)
    gt/NNNNNN.bin     optional per-pixel GT instance ids (int32 LE)
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .scene import CameraExtrinsics, CameraIntrinsics, InstanceLabeling3D, PosedFrame, ScenePointCloud

MANIFEST = "manifest.json"
DEPTH_PNG_SCALE = 1000.0

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class SceneFormatError(ValueError):
    pass


# PLY


def write_ply(path, cloud: ScenePointCloud, binary: bool = True, colors: Optional[np.ndarray] = None) -> None:
    """Write positions (double) and optional colors (uchar, from [0,1] floats)."""
    cols = cloud.colors if colors is None else np.asarray(colors, dtype=float).reshape(-1, 3)
    n = len(cloud)
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if cols is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(n, dtype=fields)
    rec["x"], rec["y"], rec["z"] = cloud.positions.T
    if cols is not None:
        rgb = np.clip(np.rint(np.asarray(cols) * 255), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = rgb.T
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}", "property double x", "property double y", "property double z"]
    if cols is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(rec.tobytes())
        else:
            for r in rec:
                vals = [repr(float(r[k])) for k in ("x", "y", "z")]
                if cols is not None:
                    vals += [str(int(r[k])) for k in ("red", "green", "blue")]
                f.write((" ".join(vals) + "\n").encode("ascii"))


def _parse_header(f):
    if f.readline().strip() != b"ply":
        raise SceneFormatError("not a PLY file")
    fmt, elements = None, []
    while True:
        line = f.readline()
        if not line:
            raise SceneFormatError("PLY header not terminated")
        tok = line.decode("ascii").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise SceneFormatError("property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], None))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise SceneFormatError(f"unknown PLY type {tok[1]!r}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise SceneFormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply(path) -> ScenePointCloud:
    with open(path, "rb") as f:
        fmt, elements = _parse_header(f)
        for name, count, props in elements:
            if name == "vertex":
                break
            # elements before the vertex block would have to be skipped; none of the writers we target do that
            raise SceneFormatError(f"element {name!r} before vertex is not supported")
        else:
            raise SceneFormatError("PLY has no vertex element")
        if any(t is None for _, t in props):
            raise SceneFormatError("list properties on vertices are not supported")
        if fmt == "ascii":
            rows = [f.readline().split() for _ in range(count)]
            if any(len(r) < len(props) for r in rows):
                raise SceneFormatError("truncated ASCII PLY")
            table = {p: np.array([float(r[k]) for r in rows]) for k, (p, _) in enumerate(props)}
        else:
            dtype = np.dtype([(p, "<" + t) for p, t in props])
            buf = f.read(dtype.itemsize * count)
            if len(buf) < dtype.itemsize * count:
                raise SceneFormatError("truncated binary PLY")
            rec = np.frombuffer(buf, dtype=dtype, count=count)
            table = {p: rec[p].astype(float) for p, _ in props}
    types = dict(props)
    try:
        pos = np.stack([table["x"], table["y"], table["z"]], axis=1)
    except KeyError:
        raise SceneFormatError("PLY vertices lack x/y/z") from None
    colors = None
    if all(k in table for k in ("red", "green", "blue")):
        colors = np.stack([table["red"], table["green"], table["blue"]], axis=1)
        if types["red"] in ("u1", "i1"):
            colors = colors / 255.0
        elif types["red"] in ("u2", "i2"):
            colors = colors / 65535.0
    return ScenePointCloud(pos, colors)


# depth maps


def write_depth(path, depth: np.ndarray) -> None:
    path = Path(path)
    if path.suffix == ".png":
        mm = np.clip(np.rint(np.asarray(depth) * DEPTH_PNG_SCALE), 0, 65535).astype(np.uint16)
        Image.fromarray(mm).save(path)
    else:
        np.asarray(depth, dtype="<f4").tofile(path)


def read_depth(path, shape: tuple[int, int]) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".png":
        arr = np.asarray(Image.open(path)).astype(np.float32) / DEPTH_PNG_SCALE
    else:
        arr = np.fromfile(path, dtype="<f4")
        if arr.size != shape[0] * shape[1]:
            raise SceneFormatError(f"{path.name}: {arr.size} values, expected {shape[0] * shape[1]}")
        arr = arr.reshape(shape)
    if arr.shape != tuple(shape):
        raise SceneFormatError(f"{path.name}: shape {arr.shape}, expected {tuple(shape)}")
    return arr


# scene directories


def save_scene(root, cloud: ScenePointCloud, frames, gt_labels: Optional[np.ndarray] = None,
               gt_images=None, depth_format: str = "bin", extra: Optional[dict] = None) -> Path:
    if depth_format not in ("png", "bin"):
        raise ValueError("depth_format must be 'png' or 'bin'")
    root = Path(root)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    write_ply(root / "cloud.ply", cloud)
    entries = []
    for k, fr in enumerate(frames):
        name = f"depth/{fr.frame_id:06d}.{depth_format}"
        write_depth(root / name, fr.depth)
        e = {"frame_id": fr.frame_id, "intrinsics": fr.intrinsics.to_dict(),
             "world_to_camera": fr.extrinsics.matrix.reshape(-1).tolist(), "depth": name}
        if gt_images is not None:
            (root / "gt").mkdir(exist_ok=True)
            gname = f"gt/{fr.frame_id:06d}.bin"
            np.asarray(gt_images[k], dtype="<i4").tofile(root / gname)
            e["gt_ids"] = gname
        entries.append(e)
    manifest = {"cloud": "cloud.ply", "frames": entries}
    if gt_labels is not None:
        (root / "gt").mkdir(exist_ok=True)
        np.asarray(gt_labels, dtype="<i4").tofile(root / "gt/labels.bin")
        manifest["gt_labels"] = "gt/labels.bin"
    if extra:
        manifest["extra"] = extra
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return root


class LoadedScene:
    def __init__(self, root: Path, cloud, frames, gt: Optional[InstanceLabeling3D], gt_images, extra):
        self.root, self.cloud, self.frames, self.gt = root, cloud, frames, gt
        self.gt_images, self.extra = gt_images, extra


def load_scene(root) -> LoadedScene:
    root = Path(root)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"{root}: no {MANIFEST}") from None
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"{root / MANIFEST}: {e}") from None
    try:
        cloud = read_ply(root / manifest["cloud"])
        frames, images = [], []
        for e in manifest["frames"]:
            intr = CameraIntrinsics.from_dict(e["intrinsics"])
            extr = CameraExtrinsics.from_matrix(np.asarray(e["world_to_camera"], dtype=float).reshape(4, 4))
            depth = read_depth(root / e["depth"], (intr.height, intr.width))
            frames.append(PosedFrame(intr, extr, depth, frame_id=int(e["frame_id"])))
            if "gt_ids" in e:
                ids = np.fromfile(root / e["gt_ids"], dtype="<i4").reshape(intr.height, intr.width)
                images.append(ids.astype(np.int32))
        gt = None
        if "gt_labels" in manifest:
            labels = np.fromfile(root / manifest["gt_labels"], dtype="<i4").astype(np.int64)
            if len(labels) != len(cloud):
                raise SceneFormatError("GT label count does not match cloud")
            gt = InstanceLabeling3D(labels, int(labels.max()) if labels.size else 0)
    except KeyError as e:
        raise SceneFormatError(f"manifest missing {e}") from None
    return LoadedScene(root, cloud, frames, gt, images if len(images) == len(frames) else None,
                       manifest.get("extra", {}))


# labelings


def write_labels(out_dir, labeling: InstanceLabeling3D, provenance: Optional[list] = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labeling.labels.astype("<i4").tofile(out_dir / "labels.bin")
    side = {"num_points": len(labeling.labels), "num_instances": labeling.num_instances, "dtype": "int32-le",
            "scores": None if labeling.scores is None else labeling.scores.tolist(),
            "pairs": provenance or []}
    (out_dir / "labels.json").write_text(json.dumps(side, indent=1))


def read_labels(out_dir) -> InstanceLabeling3D:
    out_dir = Path(out_dir)
    side = json.loads((out_dir / "labels.json").read_text())
    labels = np.fromfile(out_dir / "labels.bin", dtype="<i4").astype(np.int64)
    if len(labels) != side["num_points"]:
        raise SceneFormatError("labels.bin length does not match labels.json")
    return InstanceLabeling3D(labels, int(side["num_instances"]), side.get("scores"))


def label_palette(num_instances: int, seed: int = 0) -> np.ndarray:
    """Row 0 is grey for unlabelled points."""
    rng = np.random.default_rng(seed)
    return np.vstack([[0.5, 0.5, 0.5], 0.2 + 0.8 * rng.random((num_instances, 3))])


def write_colored_ply(path, cloud: ScenePointCloud, labeling: InstanceLabeling3D) -> None:
    write_ply(path, cloud, colors=label_palette(labeling.num_instances)[labeling.labels])
