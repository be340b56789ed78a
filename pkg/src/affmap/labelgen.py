"""World-frame interaction history and per-frame multi-label affordance masks.

Past interactions are lifted to 3D once, then every frame gets a label by
reprojecting the whole history into it, keeping interactions whose object
is visible, splatting a Gaussian per interaction into its verb's plane,
max-normalizing each plane and thresholding.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import AffMapError, DataError, InvalidDepth
from .geometry import FrameContext, pixel_index, project_points, unproject
from .interaction import InteractionEvent
from .parallel import ordered_map
from .tensorio import (parse_jsonl, read_json, read_tensor, rle_decode, rle_encode, write_json,
                       write_jsonl, write_tensor)

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.25
TRUNCATE_SIGMAS = 4.0


def default_sigma(width: int, height: int) -> float:
    """3% of the image diagonal, in pixels."""
    return 0.03 * math.hypot(width, height)


@dataclass(frozen=True)
class Interaction3D:
    world_point: tuple[float, float, float]
    verb: str
    object: str
    source_frame: str

    def __post_init__(self):
        if not all(math.isfinite(c) for c in self.world_point):
            raise DataError(f"non-finite interaction point {self.world_point}")

    def to_record(self) -> dict:
        x, y, z = self.world_point
        return {"x": x, "y": y, "z": z, "verb": self.verb, "object": self.object,
                "source_frame": self.source_frame}


@dataclass
class AffordanceHistory:
    environment_id: str
    interactions: list[Interaction3D] = field(default_factory=list)

    def append(self, item: Interaction3D) -> None:
        self.interactions.append(item)

    def __len__(self) -> int:
        return len(self.interactions)

    def snapshot(self) -> "AffordanceHistory":
        return AffordanceHistory(self.environment_id, list(self.interactions))

    def points(self) -> np.ndarray:
        return np.array([i.world_point for i in self.interactions], dtype=float).reshape(-1, 3)


class Projected(NamedTuple):
    pixel: tuple[float, float]
    verb: str
    object: str
    depth: float


@dataclass(frozen=True, eq=False)
class Heatmap:
    values: np.ndarray  # K x H x W
    classes: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class MultiLabelMask:
    planes: np.ndarray  # K x H x W uint8
    classes: tuple[str, ...]
    frame_id: str | None = None

    def __post_init__(self):
        planes = np.asarray(self.planes)
        if planes.ndim != 3 or planes.shape[0] != len(self.classes):
            raise DataError(f"mask shape {planes.shape} does not fit {len(self.classes)} classes")
        if planes.dtype != np.uint8:
            if not np.isin(planes, (0, 1)).all():
                raise DataError("mask planes must be binary")
            planes = planes.astype(np.uint8)
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def shape(self) -> tuple[int, int]:
        return self.planes.shape[1:]

    def plane(self, cls: str) -> np.ndarray:
        return self.planes[self.classes.index(cls)]

    def equals(self, other: "MultiLabelMask") -> bool:
        return self.classes == other.classes and np.array_equal(self.planes, other.planes)


# -- operations ----------------------------------------------------------------

def lift_event(event: InteractionEvent, ctx: FrameContext) -> Interaction3D:
    uv = np.asarray(event.center, dtype=float)
    if ctx.depth is None:
        raise InvalidDepth(f"frame {ctx.frame_id}: no depth")
    d_net = float(ctx.depth.dense_at(uv.reshape(1, 2))[0])
    if not (np.isfinite(d_net) and d_net > 0):
        raise InvalidDepth(f"frame {ctx.frame_id}: invalid depth {d_net} at pixel {tuple(uv)}")
    xw = unproject(uv, ctx.metric_scale * d_net, ctx.pose, ctx.K)
    return Interaction3D(tuple(float(c) for c in xw), event.verb, event.object, event.frame_id)


def build_history(events: Iterable[InteractionEvent], contexts: Mapping[str, FrameContext],
                  environment_id: str = "env") -> tuple[AffordanceHistory, Counter]:
    history = AffordanceHistory(environment_id)
    errors: Counter = Counter()
    for ev in events:
        ctx = contexts.get(ev.frame_id)
        if ctx is None:
            errors["missing_frame"] += 1
            continue
        try:
            history.append(lift_event(ev, ctx))
        except AffMapError as exc:
            errors[type(exc).__name__] += 1
            logger.warning("dropping event in frame %s: %s", ev.frame_id, exc)
    return history, errors


def reproject_history(history: AffordanceHistory, ctx: FrameContext) -> tuple[list[Projected], int]:
    """Project every interaction into ``ctx``; returns (visible, filtered count)."""
    if not history.interactions:
        return [], 0
    uv, z = project_points(history.points(), ctx.pose, ctx.K)
    out = []
    for item, (u, v), depth in zip(history.interactions, uv, z):
        if not depth > 0:
            continue
        col, row = pixel_index(np.array([u, v]))
        if 0 <= col < ctx.K.width and 0 <= row < ctx.K.height:
            out.append(Projected((float(u), float(v)), item.verb, item.object, float(depth)))
    return out, len(history) - len(out)


def build_heatmap(projected: Iterable[Projected | tuple], sigma: float, shape: tuple[int, int],
                  classes: Sequence[str], normalize: bool = True) -> Heatmap:
    """Additive per-verb Gaussian heatmap, optionally max-normalized per class.

    Each Gaussian is evaluated only within ``4 * sigma`` of its center.
    """
    if not sigma > 0:
        raise DataError(f"sigma must be > 0, got {sigma}")
    classes = tuple(classes)
    index = {c: k for k, c in enumerate(classes)}
    h, w = shape
    values = np.zeros((len(classes), h, w))
    radius = TRUNCATE_SIGMAS * sigma
    for item in projected:
        (u, v), verb = item[0], item[1]
        k = index.get(verb)
        if k is None:
            logger.warning("verb %r is not in the vocabulary; ignored", verb)
            continue
        c0, c1 = max(0, math.ceil(u - radius)), min(w - 1, math.floor(u + radius))
        r0, r1 = max(0, math.ceil(v - radius)), min(h - 1, math.floor(v + radius))
        if c0 > c1 or r0 > r1:
            continue
        cols = np.arange(c0, c1 + 1) - u
        rows = np.arange(r0, r1 + 1) - v
        d2 = rows[:, None] ** 2 + cols[None, :] ** 2
        g = np.exp(-d2 / (2.0 * sigma * sigma))
        g[d2 > radius * radius] = 0.0
        values[k, r0:r1 + 1, c0:c1 + 1] += g
    if normalize:
        peaks = values.reshape(len(classes), -1).max(axis=1, initial=0.0)
        for k, peak in enumerate(peaks):
            if peak > 0:
                values[k] /= peak
    return Heatmap(values, classes)


def threshold_mask(heatmap: Heatmap, tau: float = DEFAULT_TAU,
                   frame_id: str | None = None) -> MultiLabelMask:
    if not 0 < tau < 1:
        raise DataError(f"tau must lie in (0, 1), got {tau}")
    return MultiLabelMask((heatmap.values > tau).astype(np.uint8), heatmap.classes, frame_id)


def filter_by_presence(mask: MultiLabelMask, projected: Sequence[Projected],
                       present_objects: Iterable[str], sigma: float,
                       tau: float = DEFAULT_TAU) -> MultiLabelMask:
    """Drop interactions whose object is absent and rebuild the mask.

    The heatmap is rebuilt (not masked) because removing a point changes
    its class plane's normalization.
    """
    present = set(present_objects)
    kept = [p for p in projected if p.object in present]
    if len(kept) == len(projected):
        return mask
    heat = build_heatmap(kept, sigma, mask.shape, mask.classes)
    return threshold_mask(heat, tau, mask.frame_id)


def presence_filter(projected: Sequence[Projected], present_objects: Iterable[str]) -> list[Projected]:
    present = set(present_objects)
    return [p for p in projected if p.object in present]


@dataclass
class FrameLabel:
    frame_id: str
    mask: MultiLabelMask | None
    visible: int = 0
    out_of_view: int = 0
    absent_object: int = 0
    occluded: int = 0
    error: str | None = None

    def summary(self) -> dict:
        d = {"frame_id": self.frame_id, "visible": self.visible, "out_of_view": self.out_of_view,
             "absent_object": self.absent_object, "occluded": self.occluded}
        if self.error:
            d["error"] = self.error
        return d


def label_frame(history: AffordanceHistory, ctx: FrameContext, present_objects: Iterable[str],
                classes: Sequence[str], sigma: float | None = None, tau: float = DEFAULT_TAU,
                occlusion_margin: float | None = None) -> FrameLabel:
    if sigma is None:
        sigma = default_sigma(ctx.K.width, ctx.K.height)
    projected, out_of_view = reproject_history(history, ctx)
    kept = presence_filter(projected, present_objects)
    occluded = 0
    if occlusion_margin is not None and kept and ctx.depth is not None:
        uv = np.array([p.pixel for p in kept])
        seen = ctx.metric_depth_at(uv)
        occluded = int(np.sum(np.abs(seen - np.array([p.depth for p in kept])) > occlusion_margin))
    heat = build_heatmap(kept, sigma, ctx.K.shape, classes)
    mask = threshold_mask(heat, tau, ctx.frame_id)
    return FrameLabel(ctx.frame_id, mask, len(projected), out_of_view,
                      len(projected) - len(kept), occluded)


def generate_labels(history: AffordanceHistory,
                    frames: Sequence[tuple[FrameContext, Iterable[str]]],
                    classes: Sequence[str], sigma: float | None = None,
                    tau: float = DEFAULT_TAU, occlusion_margin: float | None = None,
                    workers: int | None = None) -> list[FrameLabel]:
    """Label every frame against a frozen snapshot of ``history``.

    Per-frame failures are reported in the result; they never stop the run.
    """
    snap = history.snapshot()

    def one(item):
        ctx, present = item
        try:
            return label_frame(snap, ctx, present, classes, sigma, tau, occlusion_margin)
        except AffMapError as exc:
            logger.warning("frame %s: %s", ctx.frame_id, exc)
            return FrameLabel(ctx.frame_id, None, error=f"{type(exc).__name__}: {exc}")

    return ordered_map(one, frames, workers)


# -- file formats -----------------------------------------------------------

def save_history(path: str | Path, history: AffordanceHistory) -> None:
    write_jsonl(path, (i.to_record() for i in history.interactions))


def load_history(path: str | Path, environment_id: str = "env") -> AffordanceHistory:
    items = parse_jsonl(path, lambda r: Interaction3D(
        (float(r["x"]), float(r["y"]), float(r["z"])), str(r["verb"]), str(r["object"]),
        str(r["source_frame"])), ("x", "y", "z", "verb", "object", "source_frame"))
    return AffordanceHistory(environment_id, items)


def save_mask(path: str | Path, mask: MultiLabelMask) -> None:
    h, w = mask.shape
    header = {"frame_id": mask.frame_id, "classes": list(mask.classes), "height": h, "width": w,
              "dtype": "u8"}
    write_tensor(path, mask.planes, header)


def load_mask(path: str | Path) -> MultiLabelMask:
    header, planes = read_tensor(path)
    if "classes" not in header:
        raise DataError(f"{path}: mask header lacks 'classes'")
    frame_id = header.get("frame_id") or Path(path).stem
    return MultiLabelMask(planes.astype(np.uint8), tuple(header["classes"]), frame_id)


def save_mask_rle(path: str | Path, mask: MultiLabelMask) -> None:
    h, w = mask.shape
    write_json(path, {"frame_id": mask.frame_id, "classes": list(mask.classes), "height": h,
                      "width": w, "rle": {c: rle_encode(mask.planes[k])
                                          for k, c in enumerate(mask.classes)}}, indent=None)


def load_mask_rle(path: str | Path) -> MultiLabelMask:
    d = read_json(path)
    h, w = int(d["height"]), int(d["width"])
    classes = tuple(d["classes"])
    planes = np.stack([rle_decode(d["rle"].get(c, []), (h, w)) for c in classes]) \
        if classes else np.zeros((0, h, w), np.uint8)
    return MultiLabelMask(planes, classes, d.get("frame_id"))
