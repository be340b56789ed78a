"""Pinhole cameras, rigid poses, (un)projection and depth scale correction.

Conventions: camera frame has x right, y down, z forward; a pixel ``(u, v)``
is continuous with integer values at pixel centers (``u`` is the column).
Poses are stored world-from-camera, ``X_w = R @ X_c + t``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (BehindCamera, ConfigError, DataError, EmptySparseSet, InvalidDepth,
                     NonPositiveDepth, ZeroMedian)
from .tensorio import (parse_jsonl, read_json, read_tensor, write_json, write_jsonl,
                       write_tensor)

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-9
REORTHO_WARN = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DataError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DataError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CameraIntrinsics":
        try:
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       int(d["width"]), int(d["height"]))
        except KeyError as exc:
            raise DataError(f"camera record lacks {exc.args[0]!r}") from None


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Nearest proper rotation (SVD projection onto SO(3))."""
    u, _, vt = np.linalg.svd(np.asarray(rotation, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def quaternion_to_matrix(qw: float, qx: float, qy: float, qz: float) -> np.ndarray:
    q = np.array([qw, qx, qy, qz], dtype=float)
    n = np.linalg.norm(q)
    if n == 0 or not np.isfinite(n):
        raise DataError("quaternion has zero or non-finite norm")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quaternion(r: np.ndarray) -> tuple[float, float, float, float]:
    """Shepperd's method; returns (qw, qx, qy, qz) with qw >= 0."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = (0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s)
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = ((r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s)
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = ((r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s)
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = ((r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s)
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return tuple(float(v) for v in q)


@dataclass(frozen=True, eq=False)
class Pose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise DataError("pose has non-finite entries")
        if np.abs(r @ r.T - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(r) - 1) > ORTHO_TOL:
            raise DataError("rotation is not orthonormal with det +1; use Pose.from_matrix")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, rotation, translation) -> "Pose":
        """Build from a possibly noisy rotation, re-orthonormalizing it."""
        r = np.asarray(rotation, dtype=float)
        fixed = orthonormalize(r)
        dev = float(np.abs(fixed - r).max())
        if dev > REORTHO_WARN:
            logger.warning("rotation re-orthonormalized (max deviation %.3g)", dev)
        return cls(fixed, translation)

    @classmethod
    def from_quaternion(cls, qw, qx, qy, qz, translation) -> "Pose":
        return cls.from_matrix(quaternion_to_matrix(qw, qx, qy, qz), translation)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self @ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame points (..., 3) to world."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def to_camera(self, points_world: np.ndarray) -> np.ndarray:
        return (np.asarray(points_world, dtype=float) - self.translation) @ self.rotation

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def to_record(self, frame_id: str) -> dict:
        qw, qx, qy, qz = matrix_to_quaternion(self.rotation)
        tx, ty, tz = (float(v) for v in self.translation)
        return {"frame_id": frame_id, "qw": qw, "qx": qx, "qy": qy, "qz": qz,
                "tx": tx, "ty": ty, "tz": tz}


def project_points(points_world: np.ndarray, pose: Pose, K: CameraIntrinsics):
    """Vectorized projection; returns ``(uv (N, 2), z (N,))`` without checks.

    Points with ``z <= 0`` get NaN pixels.
    """
    pc = pose.to_camera(np.atleast_2d(points_world))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * pc[:, 0] / z + K.cx
        v = K.fy * pc[:, 1] / z + K.cy
    uv = np.stack([u, v], axis=1)
    uv[z <= 0] = np.nan
    return uv, z


def project(point_world, pose: Pose, K: CameraIntrinsics) -> tuple[np.ndarray, float]:
    pc = pose.to_camera(np.asarray(point_world, dtype=float).reshape(1, 3))[0]
    z = pc[2]
    if not z > 0:
        raise BehindCamera(f"camera-frame z = {z:.6g} <= 0")
    return np.array([K.fx * pc[0] / z + K.cx, K.fy * pc[1] / z + K.cy]), float(z)


def unproject_pixels(uv: np.ndarray, depth: np.ndarray, pose: Pose,
                     K: CameraIntrinsics) -> np.ndarray:
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    d = np.asarray(depth, dtype=float).reshape(-1)
    xc = np.stack([(uv[:, 0] - K.cx) / K.fx * d, (uv[:, 1] - K.cy) / K.fy * d, d], axis=1)
    return pose.apply(xc)


def unproject(pixel, depth: float, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    if not depth > 0:
        raise NonPositiveDepth(f"depth must be > 0, got {depth}")
    return unproject_pixels(np.asarray(pixel, dtype=float).reshape(1, 2),
                            np.array([depth]), pose, K)[0]


def pixel_index(uv: np.ndarray) -> np.ndarray:
    """Round continuous pixel coordinates to integer (col, row), halves up."""
    return np.floor(np.asarray(uv, dtype=float) + 0.5).astype(np.int64)


@dataclass(frozen=True, eq=False)
class DepthFrame:
    dense: np.ndarray
    sparse_uv: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    sparse_depth: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        dense = np.asarray(self.dense)
        if dense.ndim != 2:
            raise DataError(f"dense depth must be H x W, got shape {dense.shape}")
        if np.any(dense < 0):
            raise DataError("dense depth has negative values")
        uv = np.asarray(self.sparse_uv, dtype=float).reshape(-1, 2)
        d = np.asarray(self.sparse_depth, dtype=float).reshape(-1)
        if len(uv) != len(d):
            raise DataError("sparse pixels and depths differ in length")
        object.__setattr__(self, "dense", dense)
        object.__setattr__(self, "sparse_uv", uv)
        object.__setattr__(self, "sparse_depth", d)

    def dense_at(self, uv: np.ndarray) -> np.ndarray:
        """Nearest-pixel lookup of network depth; NaN outside the image."""
        idx = pixel_index(np.atleast_2d(uv))
        h, w = self.dense.shape
        inside = (idx[:, 0] >= 0) & (idx[:, 0] < w) & (idx[:, 1] >= 0) & (idx[:, 1] < h)
        out = np.full(len(idx), np.nan)
        out[inside] = self.dense[idx[inside, 1], idx[inside, 0]]
        return out


def scale_correction(frame: DepthFrame, method: str = "ratio_of_medians") -> float:
    """Per-frame factor mapping network depth to metric (SfM) depth.

    ``ratio_of_medians`` is ``median(sfm) / median(network)``;
    ``median_of_ratios`` is ``median(sfm / network)``. Even-length medians
    average the two central values.
    """
    if len(frame.sparse_depth) == 0:
        raise EmptySparseSet("no sparse SfM depths for this frame")
    metric = frame.sparse_depth
    network = frame.dense_at(frame.sparse_uv)
    if not (np.all(np.isfinite(metric)) and np.all(np.isfinite(network))):
        raise InvalidDepth("sparse point outside the image or non-finite depth")
    if np.any(metric < 0) or np.any(network < 0):
        raise InvalidDepth("negative depth in scale correction")
    if method == "ratio_of_medians":
        m_metric, m_net = float(np.median(metric)), float(np.median(network))
        if m_metric == 0 or m_net == 0:
            raise ZeroMedian(f"median metric {m_metric}, median network {m_net}")
        value = m_metric / m_net
    elif method == "median_of_ratios":
        if np.any(network == 0):
            raise ZeroMedian("network depth is 0 at a sparse point")
        value = float(np.median(metric / network))
        if value == 0:
            raise ZeroMedian("median ratio is 0")
    else:
        raise ConfigError(f"unknown scale method {method!r}")
    if not (value > 0 and np.isfinite(value)):
        raise InvalidDepth(f"scale factor {value} is not positive and finite")
    return value


@dataclass(frozen=True, eq=False)
class FrameContext:
    """Everything needed to move between one frame's pixels and the world."""

    frame_id: str
    K: CameraIntrinsics
    pose: Pose
    depth: DepthFrame | None = None
    scale: float | None = None
    scale_method: str = "ratio_of_medians"

    @cached_property
    def metric_scale(self) -> float:
        if self.scale is not None:
            return float(self.scale)
        if self.depth is None:
            raise InvalidDepth(f"frame {self.frame_id}: no depth available")
        return scale_correction(self.depth, self.scale_method)

    def metric_depth_at(self, uv: np.ndarray) -> np.ndarray:
        if self.depth is None:
            raise InvalidDepth(f"frame {self.frame_id}: no depth available")
        return self.metric_scale * self.depth.dense_at(uv)


# -- file formats -----------------------------------------------------------

def load_camera(path: str | Path) -> CameraIntrinsics:
    return CameraIntrinsics.from_dict(read_json(path))


def save_camera(path: str | Path, K: CameraIntrinsics) -> None:
    write_json(path, K.to_dict())


def load_poses(path: str | Path) -> dict[str, Pose]:
    keys = ("frame_id", "qw", "qx", "qy", "qz", "tx", "ty", "tz")
    recs = parse_jsonl(path, lambda r: (str(r["frame_id"]), Pose.from_quaternion(
        r["qw"], r["qx"], r["qy"], r["qz"], [r["tx"], r["ty"], r["tz"]])), keys)
    return dict(recs)


def save_poses(path: str | Path, poses: Mapping[str, Pose]) -> None:
    write_jsonl(path, (p.to_record(fid) for fid, p in poses.items()))


def load_depth(path: str | Path) -> np.ndarray:
    header, arr = read_tensor(path)
    if arr.ndim != 2:
        raise DataError(f"{path}: depth tensor must be 2-D")
    return arr.astype(float)


def save_depth(path: str | Path, dense: np.ndarray) -> None:
    h, w = dense.shape
    write_tensor(path, np.asarray(dense, dtype=np.float32),
                 {"height": h, "width": w, "dtype": "f32"})


def load_sparse(path: str | Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    acc: dict[str, tuple[list, list]] = {}
    recs = parse_jsonl(path, lambda r: (str(r["frame_id"]), float(r["u"]), float(r["v"]),
                                        float(r["depth_m"])), ("frame_id", "u", "v", "depth_m"))
    for fid, u, v, d in recs:
        uv, dd = acc.setdefault(fid, ([], []))
        uv.append((u, v))
        dd.append(d)
    return {fid: (np.array(uv, dtype=float).reshape(-1, 2), np.array(d, dtype=float))
            for fid, (uv, d) in acc.items()}


def sparse_records(frame_id: str, uv: Iterable, depth: Iterable) -> list[dict]:
    return [{"frame_id": frame_id, "u": float(u), "v": float(v), "depth_m": float(d)}
            for (u, v), d in zip(uv, depth)]
