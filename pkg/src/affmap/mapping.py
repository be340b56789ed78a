"""World-frame affordance map and its 2-D occupancy grid.

Map points keep their full class set as a bitmask (bit ``k`` = class
``k``); nothing is fused, so one location can carry several affordances.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, EmptyCloud
from .geometry import FrameContext, unproject_pixels
from .tensorio import dumps, read_json, write_json
from .vocab import class_color

logger = logging.getLogger(__name__)

FREE, OCCUPIED, UNKNOWN = 0, 1, -1
STATE_NAMES = {FREE: "free", OCCUPIED: "occupied", UNKNOWN: "unknown"}
MAX_CLASSES = 64


def bits_from_planes(planes: np.ndarray) -> np.ndarray:
    """Pack a ``K x ...`` binary stack into per-pixel uint64 class bitmasks."""
    K = planes.shape[0]
    if K > MAX_CLASSES:
        raise DataError(f"at most {MAX_CLASSES} classes fit a bitmask, got {K}")
    out = np.zeros(planes.shape[1:], dtype=np.uint64)
    for k in range(K):
        out |= planes[k].astype(np.uint64) << np.uint64(k)
    return out


def classes_in(bits: int, K: int) -> list[int]:
    return [k for k in range(K) if (int(bits) >> k) & 1]


@dataclass(frozen=True, eq=False)
class AffordanceMap3D:
    classes: tuple[str, ...]
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    bits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))
    frame_ids: tuple[str, ...] = ()
    objects: tuple[str | None, ...] | None = None
    environment_id: str = "env"

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        bits = np.asarray(self.bits, dtype=np.uint64).reshape(-1)
        if len(pos) != len(bits) or len(self.frame_ids) != len(pos):
            raise DataError("map arrays differ in length")
        if not np.all(np.isfinite(pos)):
            raise DataError("map positions must be finite")
        objects = self.objects
        if objects is None:
            objects = (None,) * len(pos)
        if len(objects) != len(pos):
            raise DataError("object labels differ in length")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "frame_ids", tuple(self.frame_ids))
        object.__setattr__(self, "objects", tuple(objects))
        object.__setattr__(self, "classes", tuple(self.classes))

    def __len__(self) -> int:
        return len(self.positions)

    def class_points(self, cls: str) -> np.ndarray:
        k = self.classes.index(cls)
        sel = (self.bits >> np.uint64(k)) & np.uint64(1)
        return self.positions[sel.astype(bool)]


PointBatch = AffordanceMap3D


@dataclass
class LiftStats:
    lifted: int = 0
    invalid_depth: int = 0


def lift_mask(mask, ctx: FrameContext, stride: int = 4,
              classes: Sequence[str] | None = None) -> tuple[AffordanceMap3D, LiftStats]:
    """Unproject active pixels on a ``stride`` grid to world points.

    ``mask`` is a MultiLabelMask, a LabelField or a ``K x H x W`` array.
    Pixels with non-positive or non-finite depth are skipped and counted.
    """
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    planes = np.asarray(getattr(mask, "planes", getattr(mask, "values", mask)))
    if classes is None:
        classes = getattr(mask, "classes", None) or tuple(str(i) for i in range(planes.shape[0]))
    classes = tuple(classes)
    sub = planes[:, ::stride, ::stride]
    bits = bits_from_planes(sub)
    rows, cols = np.nonzero(bits)
    stats = LiftStats()
    if len(rows) == 0:
        return AffordanceMap3D(classes), stats
    uv = np.stack([cols * stride, rows * stride], axis=1).astype(float)
    depth = ctx.metric_depth_at(uv)
    ok = np.isfinite(depth) & (depth > 0)
    stats.invalid_depth = int((~ok).sum())
    stats.lifted = int(ok.sum())
    pts = unproject_pixels(uv[ok], depth[ok], ctx.pose, ctx.K) if ok.any() else np.zeros((0, 3))
    pb = bits[rows, cols][ok]
    return AffordanceMap3D(classes, pts, pb, (ctx.frame_id,) * len(pts)), stats


def accumulate(amap: AffordanceMap3D, batch: AffordanceMap3D) -> AffordanceMap3D:
    if amap.classes != batch.classes:
        raise DataError("cannot merge maps with different vocabularies")
    return AffordanceMap3D(
        amap.classes,
        np.concatenate([amap.positions, batch.positions]),
        np.concatenate([amap.bits, batch.bits]),
        amap.frame_ids + batch.frame_ids,
        amap.objects + batch.objects,
        amap.environment_id,
    )


def history_to_map(history, classes: Sequence[str]) -> AffordanceMap3D:
    """One single-class point per recorded interaction (verbs outside ``classes`` dropped)."""
    classes = tuple(classes)
    idx = {c: k for k, c in enumerate(classes)}
    items = [i for i in history.interactions if i.verb in idx]
    return AffordanceMap3D(
        classes,
        np.array([i.world_point for i in items], dtype=float).reshape(-1, 3),
        np.array([1 << idx[i.verb] for i in items], dtype=np.uint64),
        tuple(i.source_frame for i in items),
        tuple(i.object for i in items),
        history.environment_id,
    )


# -- occupancy grid -------------------------------------------------------------

_AXES = {"z": (0, 1, 2, 1.0), "-z": (0, 1, 2, -1.0), "y": (0, 2, 1, 1.0), "-y": (0, 2, 1, -1.0)}


@dataclass(frozen=True)
class OccupancyConfig:
    cell_size: float = 0.10
    height_band: tuple[float, float] = (0.1, 2.0)
    min_points: int = 3
    up_axis: str = "z"
    padding: int = 1

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ConfigError("cell_size must be > 0")
        if self.up_axis not in _AXES:
            raise ConfigError(f"up_axis must be one of {sorted(_AXES)}")
        if self.min_points < 1:
            raise ConfigError("min_points must be >= 1")
        lo, hi = self.height_band
        if not lo <= hi:
            raise ConfigError("height band must satisfy low <= high")


def ground_coords(points: np.ndarray, up_axis: str) -> tuple[np.ndarray, np.ndarray]:
    """Split world points into ground-plane (a, b) coordinates and height."""
    a, b, up, sign = _AXES[up_axis]
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    return p[:, [a, b]], sign * p[:, up]


@dataclass(eq=False)
class OccupancyGrid:
    origin: np.ndarray          # world point of the (0, 0) cell corner
    cell_size: float
    state: np.ndarray           # rows x cols, FREE / OCCUPIED / UNKNOWN
    classes: tuple[str, ...]
    class_counts: np.ndarray    # rows x cols x K
    objects: dict = field(default_factory=dict)  # (row, col) -> set of object names
    up_axis: str = "z"

    @property
    def rows(self) -> int:
        return self.state.shape[0]

    @property
    def cols(self) -> int:
        return self.state.shape[1]

    @property
    def ground_origin(self) -> np.ndarray:
        return ground_coords(self.origin, self.up_axis)[0][0]

    def cell_of(self, ground_xy) -> tuple[int, int]:
        """Cell holding a ground-plane point; columns run along the first axis."""
        g = np.asarray(ground_xy, dtype=float) - self.ground_origin
        col, row = np.floor(g / self.cell_size).astype(int)
        return int(row), int(col)

    def cell_center(self, cell) -> np.ndarray:
        r, c = cell
        return self.ground_origin + (np.array([c, r], dtype=float) + 0.5) * self.cell_size

    def in_bounds(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.rows and 0 <= c < self.cols

    def is_free(self, cell) -> bool:
        return self.in_bounds(cell) and self.state[cell] == FREE

    def cell_bits(self, cell) -> int:
        counts = self.class_counts[cell]
        return sum(1 << k for k in np.flatnonzero(counts))


def to_occupancy(amap: AffordanceMap3D, cloud: np.ndarray, cfg: OccupancyConfig = OccupancyConfig(),
                 reference_height: float | None = None) -> OccupancyGrid:
    """Threshold-rule occupancy from an SfM cloud plus map affordances.

    Heights are measured from ``reference_height`` (default: the lowest
    cloud point). Cells inside the cloud's ground bounding rectangle are
    occupied when at least ``min_points`` in-band cloud points fall in them
    and free otherwise; every other cell is unknown.
    """
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(cloud) == 0:
        raise EmptyCloud("occupancy needs a nonempty point cloud")
    g, h = ground_coords(cloud, cfg.up_axis)
    ref = float(h.min()) if reference_height is None else float(reference_height)
    lo, hi = cfg.height_band
    band = (h >= ref + lo) & (h <= ref + hi)

    mg, _ = ground_coords(amap.positions, cfg.up_axis)
    extent_pts = np.concatenate([g, mg]) if len(mg) else g
    cs = cfg.cell_size
    start = np.floor(extent_pts.min(axis=0) / cs) - cfg.padding
    stop = np.floor(extent_pts.max(axis=0) / cs) + cfg.padding
    cols, rows = (stop - start + 1).astype(int)
    ground_origin = start * cs

    def cells(points):
        idx = np.floor(points / cs).astype(np.int64) - start.astype(np.int64)
        return idx[:, 1], idx[:, 0]  # row, col

    counts = np.zeros((rows, cols), dtype=np.int64)
    br, bc = cells(g[band])
    np.add.at(counts, (br, bc), 1)

    state = np.full((rows, cols), UNKNOWN, dtype=np.int8)
    (r0,), (c0,) = [np.atleast_1d(x) for x in cells(g.min(axis=0, keepdims=True))]
    (r1,), (c1,) = [np.atleast_1d(x) for x in cells(g.max(axis=0, keepdims=True))]
    inside = np.zeros_like(state, dtype=bool)
    inside[r0:r1 + 1, c0:c1 + 1] = True
    state[inside] = FREE
    state[inside & (counts >= cfg.min_points)] = OCCUPIED

    a_ax, b_ax, up, sign = _AXES[cfg.up_axis]
    origin = np.zeros(3)
    origin[a_ax], origin[b_ax] = ground_origin
    origin[up] = sign * ref
    empty = np.zeros((rows, cols, len(amap.classes)), dtype=np.int64)
    grid = OccupancyGrid(origin, cs, state, amap.classes, empty, {}, cfg.up_axis)
    return attach_affordances(grid, amap)


def attach_affordances(grid: OccupancyGrid, amap: AffordanceMap3D) -> OccupancyGrid:
    """Copy of ``grid`` whose per-cell class counts and objects come from ``amap``.

    Map points falling outside the grid are dropped with a warning.
    """
    K = len(amap.classes)
    class_counts = np.zeros((grid.rows, grid.cols, K), dtype=np.int64)
    objects: dict = {}
    if len(amap):
        mg, _ = ground_coords(amap.positions, grid.up_axis)
        idx = np.floor((mg - grid.ground_origin) / grid.cell_size).astype(np.int64)
        mr, mc = idx[:, 1], idx[:, 0]
        ok = (mr >= 0) & (mr < grid.rows) & (mc >= 0) & (mc < grid.cols)
        if not ok.all():
            logger.warning("%d map points fall outside the grid", int((~ok).sum()))
        for k in range(K):
            sel = ok & ((amap.bits >> np.uint64(k)) & np.uint64(1)).astype(bool)
            np.add.at(class_counts[:, :, k], (mr[sel], mc[sel]), 1)
        for r, c, obj, b, good in zip(mr, mc, amap.objects, amap.bits, ok):
            if good and obj is not None and b:
                objects.setdefault((int(r), int(c)), set()).add(obj)
    return OccupancyGrid(grid.origin, grid.cell_size, grid.state, amap.classes, class_counts,
                         objects, grid.up_axis)


# -- file formats ---------------------------------------------------------------

def _rle_states(state: np.ndarray) -> list[list[int]]:
    flat = state.ravel()
    runs: list[list[int]] = []
    for v in flat.tolist():
        if runs and runs[-1][0] == v:
            runs[-1][1] += 1
        else:
            runs.append([v, 1])
    return runs


def save_occupancy(path: str | Path, grid: OccupancyGrid) -> None:
    aff = []
    for r, c in zip(*np.nonzero(grid.class_counts.sum(axis=2))):
        counts = grid.class_counts[r, c]
        aff.append({"row": int(r), "col": int(c),
                    "counts": {grid.classes[k]: int(counts[k]) for k in np.flatnonzero(counts)},
                    "objects": sorted(grid.objects.get((int(r), int(c)), ()))})
    write_json(path, {
        "origin": [float(v) for v in grid.origin], "cell_size": grid.cell_size,
        "rows": grid.rows, "cols": grid.cols, "up_axis": grid.up_axis,
        "legend": {"0": "free", "1": "occupied", "-1": "unknown"},
        "cells": _rle_states(grid.state), "classes": list(grid.classes), "affordances": aff,
    }, indent=None)


def load_occupancy(path: str | Path) -> OccupancyGrid:
    d = read_json(path)
    rows, cols = int(d["rows"]), int(d["cols"])
    flat = []
    for v, n in d["cells"]:
        flat.extend([int(v)] * int(n))
    if len(flat) != rows * cols:
        raise DataError(f"{path}: cell runs cover {len(flat)} cells, expected {rows * cols}")
    classes = tuple(d.get("classes", ()))
    counts = np.zeros((rows, cols, len(classes)), dtype=np.int64)
    objects = {}
    for a in d.get("affordances", ()):
        for cls, n in a["counts"].items():
            counts[a["row"], a["col"], classes.index(cls)] = n
        if a.get("objects"):
            objects[(a["row"], a["col"])] = set(a["objects"])
    return OccupancyGrid(np.array(d["origin"], dtype=float), float(d["cell_size"]),
                         np.array(flat, dtype=np.int8).reshape(rows, cols), classes, counts,
                         objects, d.get("up_axis", "z"))


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def occupancy_image(grid: OccupancyGrid) -> np.ndarray:
    """Grayscale view: free 254, occupied 0, unknown 205; image row = grid row."""
    img = np.full(grid.state.shape, 205, dtype=np.uint8)
    img[grid.state == FREE] = 254
    img[grid.state == OCCUPIED] = 0
    return img


def _fmt(x: float) -> str:
    return repr(float(x))


def save_ply(path: str | Path, amap: AffordanceMap3D) -> None:
    """ASCII PLY: position, dominant-class RGB, class bitmask, frame and object index.

    Class names, frame ids and object names travel as JSON lists in
    ``comment`` lines; index -1 means no object.
    """
    frames = sorted(set(amap.frame_ids))
    findex = {f: i for i, f in enumerate(frames)}
    objects = sorted({o for o in amap.objects if o is not None})
    oindex = {o: i for i, o in enumerate(objects)}
    bits_type = "uint" if len(amap.classes) <= 32 else "uint64"
    lines = ["ply", "format ascii 1.0",
             f"comment environment {amap.environment_id}",
             "comment classes " + dumps(list(amap.classes)),
             "comment frames " + dumps(frames),
             "comment objects " + dumps(objects),
             f"element vertex {len(amap)}",
             "property double x", "property double y", "property double z",
             "property uchar red", "property uchar green", "property uchar blue",
             f"property {bits_type} class_bits", "property int frame", "property int object",
             "end_header"]
    for p, b, f, o in zip(amap.positions, amap.bits, amap.frame_ids, amap.objects):
        b = int(b)
        color = class_color((b & -b).bit_length() - 1) if b else (128, 128, 128)
        lines.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {color[0]} {color[1]} {color[2]} "
                     f"{b} {findex[f]} {oindex.get(o, -1)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def _read_ply(path: str | Path) -> tuple[dict, list[str], list[list[str]]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    text = path.read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise DataError(f"{path}: not a PLY file")
    comments, props, n = {}, [], 0
    i = 1
    while i < len(text) and text[i].strip() != "end_header":
        parts = text[i].split()
        if not parts:
            i += 1
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise DataError(f"{path}: only ASCII PLY is supported")
        if parts[0] == "comment" and len(parts) >= 2:
            rest = text[i].split(None, 2)
            comments[parts[1]] = rest[2].strip() if len(rest) > 2 else ""
        elif parts[0] == "element" and parts[1] == "vertex":
            n = int(parts[2])
        elif parts[0] == "property":
            props.append(parts[-1])
        i += 1
    if i == len(text):
        raise DataError(f"{path}: header has no end_header line")
    rows = [line.split() for line in text[i + 1:i + 1 + n]]
    if len(rows) != n:
        raise DataError(f"{path}: expected {n} vertices, found {len(rows)}")
    bad = next((j for j, r in enumerate(rows) if len(r) != len(props)), None)
    if bad is not None:
        raise DataError(f"{path}:{i + 2 + bad}: expected {len(props)} values")
    return comments, props, rows


def _comment_list(path, comments: dict, key: str) -> list[str]:
    raw = comments.get(key, "")
    if not raw:
        return []
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        raise DataError(f"{path}: comment {key!r} is not a JSON list") from None
    if not isinstance(value, list):
        raise DataError(f"{path}: comment {key!r} is not a JSON list")
    return [str(v) for v in value]


def load_ply(path: str | Path) -> AffordanceMap3D:
    comments, props, rows = _read_ply(path)
    classes = tuple(_comment_list(path, comments, "classes"))
    frames = _comment_list(path, comments, "frames")
    objects = _comment_list(path, comments, "objects")
    ix = {p: props.index(p) for p in ("x", "y", "z", "class_bits", "frame", "object")
          if p in props}
    for p in ("x", "y", "z"):
        if p not in ix:
            raise DataError(f"{path}: vertex lacks {p}")
    try:
        pos = np.array([[float(r[ix["x"]]), float(r[ix["y"]]), float(r[ix["z"]])] for r in rows])
        bits = np.array([int(r[ix["class_bits"]]) if "class_bits" in ix else 0 for r in rows],
                        dtype=np.uint64)
        fids = tuple(frames[int(r[ix["frame"]])] if "frame" in ix and frames else ""
                     for r in rows)
        objs = tuple(objects[int(r[ix["object"]])]
                     if "object" in ix and int(r[ix["object"]]) >= 0 else None for r in rows)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: bad vertex record: {exc}") from None
    if classes and len(classes) < 64 and np.any(bits >> np.uint64(len(classes))):
        raise DataError(f"{path}: class bits exceed the {len(classes)}-class vocabulary")
    return AffordanceMap3D(classes, pos.reshape(-1, 3), bits, fids, objs,
                           environment_id=comments.get("environment", "env"))


def save_cloud(path: str | Path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property double x", "property double y", "property double z", "end_header"]
    lines += [f"{_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in pts]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def load_cloud(path: str | Path) -> np.ndarray:
    _, props, rows = _read_ply(path)
    try:
        ix = [props.index(p) for p in ("x", "y", "z")]
    except ValueError:
        raise DataError(f"{path}: vertex lacks x/y/z") from None
    return np.array([[float(r[i]) for i in ix] for r in rows], dtype=float).reshape(-1, 3)


def map_centroid(points: np.ndarray) -> np.ndarray:
    if len(points) == 0:
        raise DataError("no points")
    return np.array([math.fsum(points[:, i]) / len(points) for i in range(3)])
