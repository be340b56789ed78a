"""Synthetic box-world kitchens with exact ground truth.

A scene is a room (the inside of an axis-aligned box, z up) with
axis-aligned furniture boxes, a camera trajectory and scripted
interactions on furniture surfaces. ``render`` ray-casts exact depth,
derives SfM-style sparse depths, detections and narrations, and computes
ground-truth masks with a direct rasterizer that shares no code with the
label-generation path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidSpec
from .geometry import CameraIntrinsics, Pose, save_camera, save_depth, save_poses, sparse_records
from .interaction import HAND, BBox, Detection, detection_record
from .labelgen import AffordanceHistory, Interaction3D, MultiLabelMask, default_sigma, save_history, save_mask
from .mapping import history_to_map, save_cloud, save_ply
from .tensorio import read_json, write_json, write_jsonl
from .vocab import load_vocabulary

logger = logging.getLogger(__name__)

HAND_BOX_PX = 40.0
SURFACE_TOL = 1e-6


@dataclass(frozen=True)
class Furniture:
    name: str
    min: tuple[float, float, float]
    max: tuple[float, float, float]


@dataclass(frozen=True)
class ScriptedInteraction:
    frame: int
    verb: str
    object: str
    point: tuple[float, float, float]


@dataclass(frozen=True)
class Waypoint:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]


@dataclass(frozen=True)
class Noise:
    pose_rot: float = 0.0     # rad, std of a random rotation angle
    pose_trans: float = 0.0   # m, per-axis std
    depth: float = 0.0        # multiplicative std on network depth
    bbox: float = 0.0         # px, per-coordinate std


@dataclass(frozen=True)
class SceneSpec:
    room: tuple[float, float, float]
    furniture: tuple[Furniture, ...]
    interactions: tuple[ScriptedInteraction, ...]
    trajectory: tuple[Waypoint, ...]
    camera: CameraIntrinsics
    scale: tuple[float, ...] | float = 2.5
    noise: Noise = field(default_factory=Noise)
    sparse_points: int = 200
    cloud_spacing: float = 0.05
    vocabulary: str | tuple[str, ...] = "easy"
    sigma: float | None = None
    tau: float = 0.25
    environment_id: str = "kitchen"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        try:
            vocab = d.get("vocabulary", "easy")
            return cls(
                room=tuple(d["room"]),
                furniture=tuple(Furniture(f["name"], tuple(f["min"]), tuple(f["max"]))
                                for f in d["furniture"]),
                interactions=tuple(ScriptedInteraction(int(i["frame"]), i["verb"], i["object"],
                                                       tuple(i["point"]))
                                   for i in d.get("interactions", ())),
                trajectory=tuple(Waypoint(tuple(w["position"]), tuple(w["look_at"]))
                                 for w in d.get("trajectory", ())),
                camera=CameraIntrinsics.from_dict(d["camera"]),
                scale=tuple(d["scale"]) if isinstance(d.get("scale"), list) else d.get("scale", 2.5),
                noise=Noise(**d.get("noise", {})),
                sparse_points=int(d.get("sparse_points", 200)),
                cloud_spacing=float(d.get("cloud_spacing", 0.05)),
                vocabulary=tuple(vocab) if isinstance(vocab, list) else vocab,
                sigma=d.get("sigma"),
                tau=float(d.get("tau", 0.25)),
                environment_id=str(d.get("environment_id", "kitchen")),
                seed=int(d.get("seed", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidSpec(f"bad scene spec: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "room": list(self.room),
            "furniture": [{"name": f.name, "min": list(f.min), "max": list(f.max)}
                          for f in self.furniture],
            "interactions": [{"frame": i.frame, "verb": i.verb, "object": i.object,
                              "point": list(i.point)} for i in self.interactions],
            "trajectory": [{"position": list(w.position), "look_at": list(w.look_at)}
                           for w in self.trajectory],
            "camera": self.camera.to_dict(),
            "scale": list(self.scale) if isinstance(self.scale, tuple) else self.scale,
            "noise": vars(self.noise).copy(),
            "sparse_points": self.sparse_points, "cloud_spacing": self.cloud_spacing,
            "vocabulary": list(self.vocabulary) if isinstance(self.vocabulary, tuple)
            else self.vocabulary,
            "sigma": self.sigma, "tau": self.tau, "environment_id": self.environment_id,
            "seed": self.seed,
        }

    def frame_ids(self) -> list[str]:
        return [f"frame_{i:04d}" for i in range(len(self.trajectory))]

    def frame_scale(self, i: int) -> float:
        if isinstance(self.scale, tuple):
            return float(self.scale[i])
        return float(self.scale)


def load_scene(path: str | Path) -> SceneSpec:
    return SceneSpec.from_dict(read_json(path))


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-from-camera pose looking from ``position`` towards ``target``."""
    p = np.asarray(position, dtype=float)
    f = np.asarray(target, dtype=float) - p
    f /= np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=float))
    if np.linalg.norm(r) < 1e-9:
        raise InvalidSpec("viewing direction is parallel to the up vector")
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    return Pose.from_matrix(np.stack([r, d, f], axis=1), p)


def _axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    a = axis / np.linalg.norm(axis)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def _slab(origin: np.ndarray, dirs: np.ndarray, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (np.asarray(lo) - origin) * inv
        t2 = (np.asarray(hi) - origin) * inv
    tmin = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf)
    tmax = np.nan_to_num(np.maximum(t1, t2), nan=np.inf)
    return tmin.max(axis=1), tmax.min(axis=1)


@dataclass
class FrameRender:
    frame_id: str
    true_pose: Pose
    pose: Pose                  # as written (with pose noise)
    depth_true: np.ndarray      # metric z, H x W
    dense: np.ndarray           # network depth, H x W
    ids: np.ndarray             # -1 room, k furniture index
    scale: float
    sparse_uv: np.ndarray
    sparse_depth: np.ndarray
    detections: list[Detection]


@dataclass
class Bundle:
    spec: SceneSpec
    classes: tuple[str, ...]
    frames: list[FrameRender]
    narrations: list[dict]
    cloud: np.ndarray
    gt_history: AffordanceHistory
    gt_events: list[dict]
    gt_masks: list[MultiLabelMask]
    sigma: float


def render_depth(spec: SceneSpec, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Exact z-depth and hit ids (-1 for room surfaces) for every pixel."""
    K = spec.camera
    v, u = np.mgrid[0:K.height, 0:K.width].astype(float)
    dirs_c = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    dirs = dirs_c @ pose.rotation.T
    o = pose.translation
    _, room_exit = _slab(o, dirs, (0.0, 0.0, 0.0), spec.room)
    best = room_exit.copy()
    ids = np.full(len(dirs), -1, dtype=np.int64)
    for k, f in enumerate(spec.furniture):
        tn, tf = _slab(o, dirs, f.min, f.max)
        hit = (tn <= tf) & (tn > 0) & (tn < best)
        best[hit] = tn[hit]
        ids[hit] = k
    if not np.all(np.isfinite(best) & (best > 0)):
        raise InvalidSpec("camera must sit inside the room and outside all furniture")
    # z-depth equals the ray parameter because camera-frame directions have z = 1
    return best.reshape(K.height, K.width), ids.reshape(K.height, K.width)


def _on_box_surface(p, f: Furniture) -> bool:
    p = np.asarray(p, dtype=float)
    lo, hi = np.asarray(f.min), np.asarray(f.max)
    inside = np.all(p >= lo - SURFACE_TOL) and np.all(p <= hi + SURFACE_TOL)
    on_face = np.any(np.abs(p - lo) <= SURFACE_TOL) or np.any(np.abs(p - hi) <= SURFACE_TOL)
    return bool(inside and on_face)


def _surface_samples(lo, hi, spacing: float) -> np.ndarray:
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    axes = [np.linspace(lo[i], hi[i], max(2, int(round((hi[i] - lo[i]) / spacing)) + 1))
            for i in range(3)]
    pts = []
    for fixed in range(3):
        a, b = [i for i in range(3) if i != fixed]
        ga, gb = np.meshgrid(axes[a], axes[b], indexing="ij")
        for val in (lo[fixed], hi[fixed]):
            p = np.zeros((ga.size, 3))
            p[:, a], p[:, b], p[:, fixed] = ga.ravel(), gb.ravel(), val
            pts.append(p)
    return np.unique(np.concatenate(pts), axis=0)


def rasterize_truth(points: np.ndarray, verbs: Sequence[str], objects: Sequence[str],
                    pose: Pose, K: CameraIntrinsics, present: set, classes: Sequence[str],
                    sigma: float, tau: float) -> np.ndarray:
    """Ground-truth planes straight from 3-D points via the full 3x4 camera matrix.

    Untruncated Gaussians, per-class peak normalization, strict threshold.
    """
    P = K.matrix @ np.hstack([pose.rotation.T, (-pose.rotation.T @ pose.translation)[:, None]])
    planes = np.zeros((len(classes), K.height, K.width))
    yy, xx = np.mgrid[0:K.height, 0:K.width].astype(float)
    for X, verb, obj in zip(points, verbs, objects):
        if obj not in present or verb not in classes:
            continue
        x, y, w = P @ np.append(X, 1.0)
        if w <= 0:
            continue
        u, v = x / w, y / w
        if not (-0.5 <= u < K.width - 0.5 and -0.5 <= v < K.height - 0.5):
            continue
        planes[list(classes).index(verb)] += np.exp(-((xx - u) ** 2 + (yy - v) ** 2) / (2 * sigma ** 2))
    out = np.zeros(planes.shape, dtype=np.uint8)
    for k in range(len(classes)):
        m = planes[k].max()
        if m > 0:
            out[k] = planes[k] / m > tau
    return out


def render(spec: SceneSpec) -> Bundle:
    if not spec.trajectory:
        raise InvalidSpec("trajectory is empty")
    classes = load_vocabulary(spec.vocabulary)
    names = [f.name for f in spec.furniture]
    if len(set(names)) != len(names):
        raise InvalidSpec("furniture names must be unique")
    if HAND in names:
        raise InvalidSpec(f"{HAND!r} is reserved")
    K = spec.camera
    rng = np.random.default_rng(spec.seed)
    noise = spec.noise
    sigma = spec.sigma if spec.sigma is not None else default_sigma(K.width, K.height)
    fids = spec.frame_ids()

    frames: list[FrameRender] = []
    for i, (fid, wp) in enumerate(zip(fids, spec.trajectory)):
        true_pose = look_at_pose(wp.position, wp.look_at)
        depth, ids = render_depth(spec, true_pose)
        s = spec.frame_scale(i)
        if not s > 0:
            raise InvalidSpec("scale must be positive")
        dense = depth / s
        if noise.depth > 0:
            dense = dense * np.clip(1.0 + noise.depth * rng.standard_normal(dense.shape), 0.05, None)
        pose = true_pose
        if noise.pose_rot > 0 or noise.pose_trans > 0:
            axis = rng.standard_normal(3)
            rot = _axis_angle(axis, noise.pose_rot * rng.standard_normal()) @ true_pose.rotation
            pose = Pose.from_matrix(rot, true_pose.translation
                                    + noise.pose_trans * rng.standard_normal(3))
        n = min(spec.sparse_points, K.width * K.height)
        flat = rng.choice(K.width * K.height, size=n, replace=False)
        flat.sort()
        rows, cols = np.divmod(flat, K.width)
        sparse_uv = np.stack([cols, rows], axis=1).astype(float)
        dets = []
        for k, name in enumerate(names):
            rr, cc = np.nonzero(ids == k)
            if len(rr) == 0:
                continue
            box = np.array([cc.min(), rr.min(), cc.max(), rr.max()], dtype=float)
            if noise.bbox > 0:
                box = box + noise.bbox * rng.standard_normal(4)
                box = np.array([min(box[0], box[2]), min(box[1], box[3]),
                                max(box[0], box[2]), max(box[1], box[3])])
            dets.append(Detection(name, BBox(*box).clamp(K.width, K.height)))
        frames.append(FrameRender(fid, true_pose, pose, depth, dense, ids, s, sparse_uv,
                                  depth[rows, cols], dets))

    history = AffordanceHistory(spec.environment_id)
    narrations, gt_events = [], []
    for it in spec.interactions:
        if it.object not in names:
            raise InvalidSpec(f"interaction object {it.object!r} is not a furniture box")
        if it.verb not in classes:
            raise InvalidSpec(f"verb {it.verb!r} is not in the vocabulary")
        if not 0 <= it.frame < len(frames):
            raise InvalidSpec(f"interaction frame {it.frame} is outside the trajectory")
        k = names.index(it.object)
        if not _on_box_surface(it.point, spec.furniture[k]):
            raise InvalidSpec(f"interaction point {it.point} is off the {it.object!r} surface")
        fr = frames[it.frame]
        pc = fr.true_pose.to_camera(np.asarray(it.point, dtype=float))
        if pc[2] <= 0:
            raise InvalidSpec(f"interaction {it.verb} {it.object} is behind frame {it.frame}")
        col = int(math.floor(K.fx * pc[0] / pc[2] + K.cx + 0.5))
        row = int(math.floor(K.fy * pc[1] / pc[2] + K.cy + 0.5))
        if not (0 <= col < K.width and 0 <= row < K.height) or fr.ids[row, col] != k:
            raise InvalidSpec(f"interaction {it.verb} {it.object} is not visible in frame {it.frame}")
        # snap onto the pixel-center ray so the planted point is pixel exact
        z = fr.depth_true[row, col]
        snapped = fr.true_pose.apply(np.array([(col - K.cx) / K.fx * z, (row - K.cy) / K.fy * z, z]))
        history.append(Interaction3D(tuple(float(c) for c in snapped), it.verb, it.object, fr.frame_id))
        gt_events.append({"frame_id": fr.frame_id, "verb": it.verb, "object": it.object,
                          "u": float(col), "v": float(row)})
        narrations.append({"frame_id": fr.frame_id, "verb": it.verb, "object": it.object})
        half = HAND_BOX_PX / 2
        hand = np.array([col - half, row - half, col + half, row + half])
        if noise.bbox > 0:
            hand = hand + noise.bbox * rng.standard_normal(4)
        hbox = BBox(*hand).clamp(K.width, K.height)
        obox = next(d.box for d in fr.detections if d.cls == it.object)
        if hbox.intersection(obox) != hbox:
            logger.warning("frame %s: hand box for %s %s is not inside the object box",
                           fr.frame_id, it.verb, it.object)
        fr.detections.append(Detection(HAND, hbox))

    pts = history.points()
    verbs = [i.verb for i in history.interactions]
    objs = [i.object for i in history.interactions]
    gt_masks = []
    for fr in frames:
        present = {names[k] for k in np.unique(fr.ids) if k >= 0}
        planes = rasterize_truth(pts, verbs, objs, fr.true_pose, K, present, classes, sigma, spec.tau)
        gt_masks.append(MultiLabelMask(planes, classes, fr.frame_id))

    cloud = [_surface_samples(f.min, f.max, spec.cloud_spacing) for f in spec.furniture]
    cloud.append(_surface_samples((0.0, 0.0, 0.0), spec.room, spec.cloud_spacing * 2))
    return Bundle(spec, classes, frames, narrations, np.concatenate(cloud), history, gt_events,
                  gt_masks, sigma)


def write_bundle(bundle: Bundle, out: str | Path) -> None:
    """Write inputs at the top of ``out`` and ground truth under ``out/gt``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    K = bundle.spec.camera
    write_json(out / "scene.json", bundle.spec.to_dict())
    write_json(out / "vocab.json", {"classes": list(bundle.classes)})
    save_camera(out / "camera.json", K)
    save_poses(out / "poses.jsonl", {f.frame_id: f.pose for f in bundle.frames})
    frames = []
    for f in bundle.frames:
        rel = f"depth/{f.frame_id}.bin"
        save_depth(out / rel, f.dense)
        frames.append({"frame_id": f.frame_id, "depth": rel})
    write_jsonl(out / "frames.jsonl", frames)
    write_jsonl(out / "sparse.jsonl", [r for f in bundle.frames
                                      for r in sparse_records(f.frame_id, f.sparse_uv, f.sparse_depth)])
    write_jsonl(out / "detections.jsonl", [detection_record(f.frame_id, d)
                                          for f in bundle.frames for d in f.detections])
    write_jsonl(out / "narrations.jsonl", bundle.narrations)
    save_cloud(out / "cloud.ply", bundle.cloud)

    gt = out / "gt"
    save_history(gt / "history.jsonl", bundle.gt_history)
    write_jsonl(gt / "events.jsonl", bundle.gt_events)
    write_jsonl(gt / "scales.jsonl", [{"frame_id": f.frame_id, "scale": f.scale}
                                     for f in bundle.frames])
    write_jsonl(gt / "poses.jsonl", [f.true_pose.to_record(f.frame_id) for f in bundle.frames])
    for m in bundle.gt_masks:
        save_mask(gt / "masks" / f"{m.frame_id}.bin", m)
    save_ply(gt / "map.ply", history_to_map(bundle.gt_history, bundle.classes))
    write_json(gt / "params.json", {"sigma": bundle.sigma, "tau": bundle.spec.tau})


def default_scene(**overrides) -> SceneSpec:
    """A small kitchen: counter with sink along one wall, a table, three views."""
    base = dict(
        room=(4.0, 3.0, 2.5),
        furniture=(
            Furniture("counter", (0.0, 2.4, 0.0), (3.0, 3.0, 0.9)),
            Furniture("sink", (1.0, 2.5, 0.9), (1.6, 2.95, 0.95)),
            Furniture("table", (1.8, 0.8, 0.0), (2.8, 1.6, 0.75)),
            Furniture("fridge", (3.3, 2.3, 0.0), (4.0, 3.0, 1.9)),
        ),
        interactions=(
            ScriptedInteraction(0, "wash", "sink", (1.3, 2.72, 0.95)),
            ScriptedInteraction(1, "cut", "table", (2.3, 1.2, 0.75)),
        ),
        trajectory=(
            Waypoint((1.3, 1.9, 1.7), (1.3, 2.72, 0.95)),
            Waypoint((2.3, 0.2, 1.6), (2.3, 1.2, 0.75)),
            Waypoint((1.8, 0.4, 1.7), (1.8, 2.0, 0.8)),
        ),
        camera=CameraIntrinsics(250.0, 250.0, 160.0, 120.0, 320, 240),
        scale=2.5,
        vocabulary="easy",
    )
    base.update(overrides)
    return SceneSpec(**base)
