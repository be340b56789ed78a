"""File-level pipelines behind the CLI subcommands.

Each function reads its inputs from disk, runs the in-memory operations
and writes deterministic outputs, returning a JSON-ready summary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeMismatch
from .geometry import DepthFrame, FrameContext, load_camera, load_depth, load_poses, load_sparse
from .interaction import extract_events, load_detections, load_narrations, save_events
from .labelgen import (DEFAULT_TAU, build_history, default_sigma, generate_labels,
                       load_history, load_mask, save_history, save_mask)
from .losses import LossConfig, asym_loss
from .mapping import (AffordanceMap3D, OccupancyConfig, accumulate, attach_affordances,
                      ground_coords, history_to_map, lift_mask,
                      load_cloud, load_occupancy, load_ply, occupancy_image, save_occupancy,
                      save_ply, to_occupancy, write_pgm)
from .metrics import evaluate as evaluate_frames
from .multilabel import apply_heuristic, load_probabilities, save_labels
from .parallel import ordered_map
from .planner import NavQuery, navigate, overlay_image
from .tensorio import read_jsonl, read_tensor, write_json
from .vocab import load_vocabulary

logger = logging.getLogger(__name__)


@dataclass
class InputPaths:
    camera: Path
    poses: Path
    frames: Path
    sparse: Path
    narrations: Path | None = None
    detections: Path | None = None
    vocab: Path | str | None = None
    cloud: Path | None = None

    @classmethod
    def from_bundle(cls, root: str | Path, **overrides) -> "InputPaths":
        root = Path(root)
        paths = cls(root / "camera.json", root / "poses.jsonl", root / "frames.jsonl",
                    root / "sparse.jsonl", root / "narrations.jsonl", root / "detections.jsonl",
                    root / "vocab.json", root / "cloud.ply")
        for k, v in overrides.items():
            if v is not None:
                setattr(paths, k, v if k == "vocab" else Path(v))
        return paths

    def check(self, *names: str) -> None:
        """Fail fast, naming the first required input file that is missing."""
        for name in names:
            p = getattr(self, name)
            if p is None or not Path(p).exists():
                raise ConfigError(f"missing {name} file: {p}")


def load_contexts(paths: InputPaths, scale_method: str = "ratio_of_medians") -> list[FrameContext]:
    K = load_camera(paths.camera)
    poses = load_poses(paths.poses)
    sparse = load_sparse(paths.sparse)
    base = Path(paths.frames).parent
    out = []
    for rec in read_jsonl(paths.frames, ("frame_id", "depth")):
        fid = str(rec["frame_id"])
        if fid not in poses:
            raise DataError(f"{paths.frames}: frame {fid} has no pose in {paths.poses}")
        dense = load_depth(base / rec["depth"])
        if dense.shape != K.shape:
            raise ShapeMismatch(f"frame {fid}: depth {dense.shape} vs camera {K.shape}")
        uv, d = sparse.get(fid, (np.zeros((0, 2)), np.zeros(0)))
        out.append(FrameContext(fid, K, poses[fid], DepthFrame(dense, uv, d),
                                scale_method=scale_method))
    return out


def extract_labels(paths: InputPaths, out: str | Path, sigma: float | None = None,
                   tau: float = DEFAULT_TAU, scale_method: str = "ratio_of_medians",
                   occlusion_margin: float | None = None, environment_id: str = "env",
                   workers: int | None = None) -> dict:
    paths.check("camera", "poses", "frames", "sparse", "narrations", "detections")
    classes = load_vocabulary(paths.vocab)
    contexts = load_contexts(paths, scale_method)
    by_id = {c.frame_id: c for c in contexts}
    narrations = load_narrations(paths.narrations)
    detections = load_detections(paths.detections)
    events, ex_summary = extract_events(narrations, detections, verbs=classes)
    history, lift_errors = build_history(events, by_id, environment_id)

    if sigma is None and contexts:
        sigma = default_sigma(contexts[0].K.width, contexts[0].K.height)
    frames = [(c, {d.cls for d in detections.get(c.frame_id, ())}) for c in contexts]
    labels = generate_labels(history, frames, classes, sigma, tau, occlusion_margin, workers)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_events(out / "events.jsonl", events)
    save_history(out / "history.jsonl", history)
    for lab in labels:
        if lab.mask is not None:
            save_mask(out / "masks" / f"{lab.frame_id}.bin", lab.mask)
    summary = {
        "narrations": len(narrations),
        "extraction": ex_summary.to_dict(),
        "history": len(history),
        "lift_errors": {k: lift_errors[k] for k in sorted(lift_errors)},
        "sigma": sigma, "tau": tau,
        "frames": [lab.summary() for lab in labels],
        "frame_errors": sum(1 for lab in labels if lab.error),
    }
    write_json(out / "summary.json", summary)
    return summary


def _mask_files(masks: str | Path | Sequence) -> list[Path]:
    if isinstance(masks, (list, tuple)):
        return [Path(m) for m in masks]
    root = Path(masks)
    if root.is_dir():
        return sorted(root.glob("*.bin"))
    if root.exists():
        return [root]
    raise ConfigError(f"no such mask file or directory: {root}")


def build_map(paths: InputPaths, masks, out: str | Path, stride: int = 4,
              occupancy: OccupancyConfig = OccupancyConfig(), reference: str = "floor",
              environment_id: str = "env", workers: int | None = None,
              history: str | Path | None = None) -> dict:
    """Lift every mask into the world, accumulate, and grid the SfM cloud.

    ``reference`` picks the height origin of the occupancy band: ``floor``
    (lowest cloud point) or ``camera`` (lowest camera center). An optional
    interaction ``history`` adds one point per recorded interaction, tagged
    with its object so plans can filter by object.
    """
    paths.check("camera", "poses", "frames", "sparse", "cloud")
    contexts = {c.frame_id: c for c in load_contexts(paths)}
    files = _mask_files(masks)
    classes = load_vocabulary(paths.vocab) if paths.vocab is not None else None
    loaded = [load_mask(f) for f in files]
    if classes is None and loaded:
        classes = loaded[0].classes
    for m in loaded:
        if m.classes != classes:
            raise DataError(f"mask {m.frame_id}: vocabulary differs from {paths.vocab}")
        if m.frame_id not in contexts:
            raise DataError(f"mask {m.frame_id}: no matching frame in {paths.frames}")

    def lift(m):
        return lift_mask(m, contexts[m.frame_id], stride, classes)

    amap = AffordanceMap3D(classes or (), environment_id=environment_id)
    skipped = 0
    for batch, stats in ordered_map(lift, loaded, workers):
        amap = accumulate(amap, batch)
        skipped += stats.invalid_depth
    lifted = len(amap)
    if history is not None:
        amap = accumulate(amap, history_to_map(load_history(history, environment_id),
                                               classes or ()))
    cloud = load_cloud(paths.cloud)
    ref = None
    if reference == "camera":
        centers = np.array([c.pose.center for c in contexts.values()])
        ref = float(ground_coords(centers, occupancy.up_axis)[1].min())
    elif reference != "floor":
        raise ConfigError(f"unknown height reference {reference!r}")
    grid = to_occupancy(amap, cloud, occupancy, ref)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_ply(out / "map.ply", amap)
    save_occupancy(out / "occupancy.json", grid)
    write_pgm(out / "occupancy.pgm", occupancy_image(grid))
    summary = {"masks": len(loaded), "points": len(amap), "lifted_points": lifted,
               "skipped_invalid_depth": skipped,
               "stride": stride, "grid": {"rows": grid.rows, "cols": grid.cols,
                                          "cell_size": grid.cell_size,
                                          "occupied": int((grid.state == 1).sum()),
                                          "free": int((grid.state == 0).sum())}}
    write_json(out / "summary.json", summary)
    return summary


def postprocess(inputs: Iterable[str | Path], out: str | Path, heuristic: str, **params) -> list[Path]:
    out = Path(out)
    written = []
    for path in inputs:
        path = Path(path)
        p, header = load_probabilities(path)
        labels = apply_heuristic(p, heuristic, **params)
        dest = out / path.name
        save_labels(dest, labels, p.classes, header.get("frame_id"), header.get("mode"))
        written.append(dest)
    return written


def _load_planes(path: Path) -> tuple[dict, np.ndarray]:
    header, arr = read_tensor(path)
    if "classes" not in header:
        raise DataError(f"{path}: header lacks 'classes'")
    return header, arr


def evaluate(manifest: str | Path, out: str | Path | None = None, loss: bool = False,
             loss_cfg: LossConfig | None = None) -> dict:
    """Score predictions listed in a JSONL manifest ``{frame_id, pred, gt[, scores]}``.

    Relative paths resolve against the manifest's directory.
    """
    manifest = Path(manifest)
    base = manifest.parent
    preds, gts, scores = [], [], []
    classes = None
    have_scores = True
    for rec in read_jsonl(manifest, ("pred", "gt")):
        hp, p = _load_planes(base / rec["pred"])
        hg, g = _load_planes(base / rec["gt"])
        if hp["classes"] != hg["classes"]:
            raise ConfigError(f"frame {rec.get('frame_id')}: prediction and ground-truth "
                              "vocabularies differ")
        if classes is None:
            classes = tuple(hg["classes"])
        elif tuple(hg["classes"]) != classes:
            raise ConfigError("vocabulary changes between frames")
        preds.append((p > 0).astype(np.uint8))
        gts.append((g > 0).astype(np.uint8))
        if "scores" in rec:
            hs, s = _load_planes(base / rec["scores"])
            if tuple(hs["classes"]) != classes:
                raise ConfigError("score and ground-truth vocabularies differ")
            scores.append(s.astype(float))
        else:
            have_scores = False
    if not preds:
        raise DataError(f"{manifest}: no frames listed")
    report = evaluate_frames(preds, gts, classes, scores if have_scores else None)
    if loss:
        if not have_scores:
            raise ConfigError("--loss needs 'scores' (bernoulli probabilities) for every frame")
        cfg = loss_cfg or LossConfig()
        P = np.concatenate([s.reshape(len(classes), -1) for s in scores], axis=1)
        Y = np.concatenate([g.reshape(len(classes), -1) for g in gts], axis=1)
        report.extra["loss"] = {"asym": asym_loss(P, Y, cfg), "gamma_plus": cfg.gamma_plus,
                                "gamma_minus": cfg.gamma_minus}
    result = report.to_dict()
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "report.json", result)
        (out / "report.txt").write_text(report.table())
    result["_table"] = report.table()
    return result


def plan(grid_path: str | Path, verb: str, out: str | Path, map_path: str | Path | None = None,
         start_xy: tuple[float, float] | None = None, start_cell: tuple[int, int] | None = None,
         object_name: str | None = None, inflation: int = 0) -> dict:
    grid = load_occupancy(grid_path)
    if map_path is not None:
        amap = load_ply(map_path)
        if amap.classes and grid.classes and amap.classes != grid.classes:
            raise ConfigError("map and grid vocabularies differ")
        # recompute cell affordances from the map onto the stored grid geometry
        grid = attach_affordances(grid, amap)
    if verb not in grid.classes:
        raise ConfigError(f"verb {verb!r} is not in the vocabulary")
    if start_cell is None and start_xy is None:
        raise ConfigError("a start position is required")
    query = NavQuery(verb, start=start_cell, start_xy=start_xy, object=object_name)
    path = navigate(grid, query, inflation)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "path.json", path.to_dict())
    write_json(out / "trace.json", path.trace)
    write_pgm(out / "overlay.pgm", overlay_image(grid, path.cells, occupancy_image(grid)))
    return path.trace
