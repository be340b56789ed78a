"""``affmap`` command line: synth, extract-labels, postprocess, build-map, evaluate, plan.

Every subcommand accepts ``--config file.json``. Keys may sit at the top
level or under a section named after the subcommand; explicit flags win
over both. Exit codes: 0 ok, 1 usage/config, 2 data, 3 invariant.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import AffMapError, ConfigError, InvariantViolation
from .losses import LossConfig
from .mapping import OccupancyConfig
from .multilabel import HEURISTICS
from .tensorio import dumps, read_json

logger = logging.getLogger("affmap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with the config code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pair(kind):
    def parse(text: str):
        try:
            a, b = (kind(v) for v in str(text).split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
        return a, b
    return parse


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config; flags override its values")
    p.add_argument("--workers", type=int, help="worker pool size (AFFMAP_THREADS overrides)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="affmap", description="Grounded affordance labels, maps and navigation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic scene bundle with ground truth")
    _common(p)
    p.add_argument("--spec", help="scene JSON (default: built-in kitchen)")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("extract-labels", help="narrations + detections -> multi-label masks")
    _common(p)
    p.add_argument("--bundle", help="directory holding the default input file names")
    for name in ("camera", "poses", "frames", "sparse", "narrations", "detections"):
        p.add_argument(f"--{name}")
    p.add_argument("--vocab", help="vocabulary JSON or preset name (easy, complex)")
    p.add_argument("--out")
    p.add_argument("--sigma", type=float, help="Gaussian std in px (default 3%% of the diagonal)")
    p.add_argument("--tau", type=float)
    p.add_argument("--scale-method", choices=("ratio_of_medians", "median_of_ratios"))
    p.add_argument("--occlusion-margin", type=float)
    p.add_argument("--environment")

    p = sub.add_parser("postprocess", help="probability fields -> label fields")
    _common(p)
    p.add_argument("inputs", nargs="*")
    p.add_argument("--out")
    p.add_argument("--heuristic", choices=HEURISTICS)
    p.add_argument("--k", type=int)
    p.add_argument("--theta", type=float)
    p.add_argument("--theta-d", type=float)
    p.add_argument("--floor", choices=("total", "selection"))
    p.add_argument("--gap-rule", choices=("last", "first"))

    p = sub.add_parser("build-map", help="lift masks into a 3-D map and an occupancy grid")
    _common(p)
    p.add_argument("--bundle")
    for name in ("camera", "poses", "frames", "sparse", "cloud"):
        p.add_argument(f"--{name}")
    p.add_argument("--vocab")
    p.add_argument("--masks", help="mask file or directory of *.bin masks")
    p.add_argument("--history", help="interaction history JSONL; adds object-tagged points")
    p.add_argument("--out")
    p.add_argument("--stride", type=int)
    p.add_argument("--cell-size", type=float)
    p.add_argument("--band", type=_pair(float), help="height band 'low,high' in metres")
    p.add_argument("--min-points", type=int)
    p.add_argument("--up-axis", choices=("z", "-z", "y", "-y"))
    p.add_argument("--reference", choices=("floor", "camera"))
    p.add_argument("--environment")

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    _common(p)
    p.add_argument("--manifest", help="JSONL lines {frame_id, pred, gt[, scores]}")
    p.add_argument("--out")
    p.add_argument("--loss", action="store_true", default=None,
                   help="also report the asymmetric loss of the score planes")
    p.add_argument("--gamma-plus", type=float)
    p.add_argument("--gamma-minus", type=float)

    p = sub.add_parser("plan", help="path to where an affordance was exercised")
    _common(p)
    p.add_argument("--grid", help="occupancy JSON from build-map")
    p.add_argument("--map", help="PLY map; recomputes cell affordances on the grid")
    p.add_argument("--verb")
    p.add_argument("--object")
    p.add_argument("--start", type=_pair(float), help="ground-plane start 'x,y' in metres")
    p.add_argument("--start-cell", type=_pair(int), help="start cell 'row,col'")
    p.add_argument("--inflation", type=int)
    p.add_argument("--out")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge config file values under explicit flags."""
    merged: dict = {}
    if args.config:
        cfg = read_json(args.config)
        if not isinstance(cfg, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        section = cfg.get(args.command, {})
        for key, value in list(cfg.items()) + list(section.items()):
            if not isinstance(value, dict):
                merged[key.replace("-", "_")] = value
    for key, value in vars(args).items():
        if value is not None and key not in ("config", "command"):
            merged[key] = value
    return merged


def _require(cfg: dict, *keys: str) -> None:
    for key in keys:
        if cfg.get(key) in (None, [], ""):
            raise ConfigError(f"--{key.replace('_', '-')} is required")


def _as_pair(v, kind):
    return None if v is None else tuple(kind(x) for x in v)


def cmd_synth(cfg: dict) -> dict:
    from .synth import SceneSpec, default_scene, load_scene, render, write_bundle

    _require(cfg, "out")
    spec = load_scene(cfg["spec"]) if cfg.get("spec") else default_scene()
    if cfg.get("seed") is not None:
        spec = SceneSpec.from_dict({**spec.to_dict(), "seed": int(cfg["seed"])})
    bundle = render(spec)
    write_bundle(bundle, cfg["out"])
    return {"frames": len(bundle.frames), "interactions": len(bundle.gt_history),
            "out": str(cfg["out"])}


def cmd_extract_labels(cfg: dict) -> dict:
    _require(cfg, "out")
    keys = ("camera", "poses", "frames", "sparse", "narrations", "detections", "vocab")
    if cfg.get("bundle"):
        paths = pipeline.InputPaths.from_bundle(cfg["bundle"], **{k: cfg.get(k) for k in keys})
    else:
        _require(cfg, *keys[:-1])
        paths = pipeline.InputPaths(*(Path(cfg[k]) for k in keys[:-1]), vocab=cfg.get("vocab"))
    summary = pipeline.extract_labels(
        paths, cfg["out"], sigma=cfg.get("sigma"), tau=cfg.get("tau", 0.25),
        scale_method=cfg.get("scale_method", "ratio_of_medians"),
        occlusion_margin=cfg.get("occlusion_margin"),
        environment_id=cfg.get("environment", "env"), workers=cfg.get("workers"))
    return {"history": summary["history"], "extraction": summary["extraction"],
            "frame_errors": summary["frame_errors"]}


def cmd_postprocess(cfg: dict) -> dict:
    _require(cfg, "inputs", "out", "heuristic")
    if cfg["heuristic"] not in HEURISTICS:
        raise ConfigError(f"unknown heuristic {cfg['heuristic']!r}")
    params = {k: cfg[k] for k in ("k", "theta", "theta_d", "floor", "gap_rule") if k in cfg}
    written = pipeline.postprocess(cfg["inputs"], cfg["out"], cfg["heuristic"], **params)
    return {"written": [str(w) for w in written]}


def cmd_build_map(cfg: dict) -> dict:
    _require(cfg, "masks", "out")
    keys = ("camera", "poses", "frames", "sparse", "cloud", "vocab")
    if cfg.get("bundle"):
        paths = pipeline.InputPaths.from_bundle(cfg["bundle"], **{k: cfg.get(k) for k in keys})
        if cfg.get("vocab") is None and not Path(paths.vocab).exists():
            paths.vocab = None
    else:
        _require(cfg, *keys[:-1])
        paths = pipeline.InputPaths(Path(cfg["camera"]), Path(cfg["poses"]), Path(cfg["frames"]),
                                    Path(cfg["sparse"]), cloud=Path(cfg["cloud"]),
                                    vocab=cfg.get("vocab"))
    base = OccupancyConfig()
    occ = OccupancyConfig(cell_size=float(cfg.get("cell_size", base.cell_size)),
                          height_band=_as_pair(cfg.get("band"), float) or base.height_band,
                          min_points=int(cfg.get("min_points", base.min_points)),
                          up_axis=cfg.get("up_axis", base.up_axis))
    return pipeline.build_map(paths, cfg["masks"], cfg["out"], stride=int(cfg.get("stride", 4)),
                              occupancy=occ, reference=cfg.get("reference", "floor"),
                              environment_id=cfg.get("environment", "env"),
                              workers=cfg.get("workers"), history=cfg.get("history"))


def cmd_evaluate(cfg: dict) -> dict:
    _require(cfg, "manifest")
    base = LossConfig()
    loss_cfg = LossConfig(gamma_plus=float(cfg.get("gamma_plus", base.gamma_plus)),
                          gamma_minus=float(cfg.get("gamma_minus", base.gamma_minus)))
    result = pipeline.evaluate(cfg["manifest"], cfg.get("out"), bool(cfg.get("loss")), loss_cfg)
    print(result.pop("_table"), end="")
    if "loss" in result:
        print(f"asymmetric loss: {result['loss']['asym']:.6f}")
    return result


def cmd_plan(cfg: dict) -> dict:
    _require(cfg, "grid", "verb", "out")
    return pipeline.plan(cfg["grid"], cfg["verb"], cfg["out"], map_path=cfg.get("map"),
                         start_xy=_as_pair(cfg.get("start"), float),
                         start_cell=_as_pair(cfg.get("start_cell"), int),
                         object_name=cfg.get("object"), inflation=int(cfg.get("inflation", 0)))


COMMANDS = {
    "synth": cmd_synth,
    "extract-labels": cmd_extract_labels,
    "postprocess": cmd_postprocess,
    "build-map": cmd_build_map,
    "evaluate": cmd_evaluate,
    "plan": cmd_plan,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        result = COMMANDS[args.command](cfg)
    except InvariantViolation as exc:
        print(f"affmap {args.command}: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except AffMapError as exc:
        print(f"affmap {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    if args.command != "evaluate":
        print(dumps(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
