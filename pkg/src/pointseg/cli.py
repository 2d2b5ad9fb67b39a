"""Command-line entry point: gen, run, ablate, eval, export-ply.

Exit codes: 0 success, 2 config error, 3 backend error, 4 IO error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

from . import synthbench
from .evaluation import evaluate
from .io import SceneFormatError, load_scene, read_labels, write_colored_ply
from .pipeline import (NOISE_PRESETS, SUITES, BackendError, ConfigError, PipelineConfig,
                       benchmark_spec, run_ablation, run_pipeline, save_synthetic)
from .prompts import UnknownBackendError

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_IO = 0, 2, 3, 4

_DICT_FIELDS = ("point_backend", "box_backend", "segmenter", "noise")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with PipelineConfig fields")
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in _DICT_FIELDS:
            p.add_argument(flag, dest=f.name, type=json.loads, metavar="JSON")
        else:
            kind = type(f.default) if not callable(f.default) else str
            p.add_argument(flag, dest=f.name, type=kind)


def build_config(args: argparse.Namespace) -> PipelineConfig:
    data: dict = {}
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    for f in fields(PipelineConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            data[f.name] = val
    if getattr(args, "preset", None):
        data["noise"] = dict(NOISE_PRESETS[args.preset])
    return PipelineConfig.from_dict(data)


def cmd_gen(args) -> int:
    out = Path(args.out)
    for seed in range(args.seed, args.seed + args.count):
        spec = benchmark_spec(seed)
        if args.instances is not None:
            spec.num_instances = args.instances
        if args.frames is not None:
            spec.num_frames = args.frames
        scene = synthbench.generate_scene(spec, seed)
        root = out / f"scene_{seed:04d}" if args.count > 1 else out
        save_synthetic(scene, root, depth_format=args.depth_format)
        print(f"{root}: {len(scene.cloud)} points, {scene.gt.num_instances} instances, {len(scene.frames)} frames")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = build_config(args)
    run = run_pipeline(args.scene, cfg, out_dir=args.out, checkpoint_dir=args.checkpoint)
    print(run.report())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    report = run_ablation(args.suite, range(cfg.seed, cfg.seed + args.seeds), cfg)
    print(report.table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json())
    return EXIT_OK


def cmd_eval(args) -> int:
    scene = load_scene(args.scene)
    if scene.gt is None:
        raise SceneFormatError(f"{args.scene}: no ground-truth labels")
    result = evaluate(read_labels(args.pred), scene.gt)
    print(result.to_json() if args.json else result.table())
    return EXIT_OK


def cmd_export(args) -> int:
    scene = load_scene(args.scene)
    write_colored_ply(args.out, scene.cloud, read_labels(args.pred))
    print(args.out)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write synthetic scenes with ground truth")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--instances", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--depth-format", choices=("bin", "png"), default="bin")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="segment one scene directory")
    p.add_argument("scene")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="directory for stage outputs; existing ones are reused")
    p.add_argument("--preset", choices=sorted(NOISE_PRESETS), help="oracle noise preset")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run an ablation suite over seeded synthetic scenes")
    p.add_argument("suite", choices=SUITES)
    p.add_argument("--seeds", type=int, default=20, help="number of scenes")
    p.add_argument("--out", help="write the report as JSON")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="score a labels.bin against a scene's ground truth")
    p.add_argument("scene")
    p.add_argument("pred", help="directory holding labels.bin and labels.json")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-ply", help="write a PLY coloured by instance")
    p.add_argument("scene")
    p.add_argument("pred")
    p.add_argument("out")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (BackendError, UnknownBackendError) as e:
        print(f"backend error: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except (OSError, SceneFormatError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
