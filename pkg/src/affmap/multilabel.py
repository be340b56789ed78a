"""Per-pixel multi-label decisions from probability outputs.

Three selectors turn a categorical (softmax) field into several winning
classes; ``select_bernoulli`` thresholds independent per-class outputs.
All selectors work along axis 0 of a ``K x ...`` array and sort with ties
broken by ascending class index.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, InvalidK, ModeMismatch
from .tensorio import read_tensor, write_tensor

CATEGORICAL = "categorical"
BERNOULLI = "bernoulli"
SUM_TOL = 1e-5


@dataclass(frozen=True, eq=False)
class ProbabilityField:
    values: np.ndarray  # K x H x W
    mode: str = CATEGORICAL
    classes: tuple[str, ...] | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim < 1:
            raise DataError("probability field needs a class axis")
        if self.mode not in (CATEGORICAL, BERNOULLI):
            raise DataError(f"unknown mode {self.mode!r}")
        if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
            raise DataError("probabilities must lie in [0, 1]")
        if self.mode == CATEGORICAL and v.size and np.abs(v.sum(axis=0) - 1).max() > SUM_TOL:
            raise DataError("categorical probabilities must sum to 1 per pixel")
        if self.classes is not None and len(self.classes) != v.shape[0]:
            raise DataError("class list does not match the class axis")
        object.__setattr__(self, "values", v)
        if self.classes is not None:
            object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def K(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class LabelField:
    values: np.ndarray  # K x H x W uint8
    classes: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.uint8))

    def active(self, *index) -> set[int]:
        """Active class indices at one pixel (no index for 1-D fields)."""
        col = self.values[(slice(None),) + tuple(index)]
        return set(np.flatnonzero(col).tolist())


def _as_field(p, mode: str | None = None) -> ProbabilityField:
    if isinstance(p, ProbabilityField):
        return p
    return ProbabilityField(np.asarray(p, dtype=float), mode or CATEGORICAL)


def _rank_order(v: np.ndarray) -> np.ndarray:
    """Class indices sorted by descending probability, ties by index."""
    return np.argsort(-v, axis=0, kind="stable")


def _from_ranks(order: np.ndarray, take: np.ndarray) -> np.ndarray:
    """Scatter a per-rank boolean ``take`` back to class positions."""
    out = np.zeros(order.shape, dtype=np.uint8)
    np.put_along_axis(out, order, take.astype(np.uint8), axis=0)
    return out


def select_topk(p, k: int, floor: str = "total") -> LabelField:
    """Top-``k`` classes, dropping any below a probability floor.

    ``floor="total"`` uses ``1/K`` with ``K`` the class count;
    ``floor="selection"`` uses ``1/k``.
    """
    f = _as_field(p)
    v = f.values
    K = v.shape[0]
    if not (isinstance(k, (int, np.integer)) and 1 <= k <= K):
        raise InvalidK(f"k must be an integer in [1, {K}], got {k!r}")
    if floor == "total":
        lo = 1.0 / K
    elif floor == "selection":
        lo = 1.0 / k
    else:
        raise DataError(f"unknown floor rule {floor!r}")
    order = _rank_order(v)
    sorted_v = np.take_along_axis(v, order, axis=0)
    rank = np.arange(K).reshape((K,) + (1,) * (v.ndim - 1))
    take = (rank < k) & (sorted_v >= lo)
    return LabelField(_from_ranks(order, take), f.classes)


def select_max_theta(p, theta: float) -> LabelField:
    if not 0 < theta < 1:
        raise DataError(f"theta must lie in (0, 1), got {theta}")
    f = _as_field(p)
    return LabelField((f.values > theta).astype(np.uint8), f.classes)


def select_dyn_theta(p, theta_d: float, rule: str = "last") -> LabelField:
    """Cut the sorted probabilities at a gap larger than ``theta_d``.

    With sorted values ``p(0) >= p(1) >= ...`` and gaps ``p(i) - p(i+1)``,
    ranks ``0..i`` are kept for the qualifying gap ``i``: the last one
    (``rule="last"``, monotone in ``theta_d``) or the first one
    (``rule="first"``). Without a qualifying gap only the argmax is kept.
    """
    if not theta_d > 0:
        raise DataError(f"theta_d must be > 0, got {theta_d}")
    if rule not in ("last", "first"):
        raise DataError(f"unknown gap rule {rule!r}")
    f = _as_field(p)
    v = f.values
    K = v.shape[0]
    order = _rank_order(v)
    sorted_v = np.take_along_axis(v, order, axis=0)
    gaps = sorted_v[:-1] - sorted_v[1:]
    big = gaps > theta_d
    rank = np.arange(K).reshape((K,) + (1,) * (v.ndim - 1))
    if K == 1:
        cut = np.zeros(v.shape[1:], dtype=np.int64)
    elif rule == "last":
        # largest qualifying index; -1 maps to the argmax fallback
        idx = np.where(big, rank[:-1], -1).max(axis=0)
        cut = np.maximum(idx, 0)
    else:
        has = big.any(axis=0)
        cut = np.where(has, big.argmax(axis=0), 0)
    take = rank <= cut[None]
    return LabelField(_from_ranks(order, take), f.classes)


def select_bernoulli(p) -> LabelField:
    f = _as_field(p, BERNOULLI)
    if f.mode != BERNOULLI:
        raise ModeMismatch("bernoulli selection needs a bernoulli field")
    return LabelField((f.values > 0.5).astype(np.uint8), f.classes)


HEURISTICS = ("topk", "max", "dyn", "bernoulli")


def apply_heuristic(p: ProbabilityField, name: str, k: int = 2, theta: float = 0.25,
                    theta_d: float = 0.1, floor: str = "total", gap_rule: str = "last") -> LabelField:
    if name == "topk":
        return select_topk(p, k, floor)
    if name == "max":
        return select_max_theta(p, theta)
    if name == "dyn":
        return select_dyn_theta(p, theta_d, gap_rule)
    if name == "bernoulli":
        return select_bernoulli(p)
    raise ConfigError(f"unknown heuristic {name!r}; choose from {', '.join(HEURISTICS)}")


# -- file formats -----------------------------------------------------------

def save_probabilities(path: str | Path, p: ProbabilityField, frame_id: str | None = None) -> None:
    K, h, w = p.values.shape
    classes = list(p.classes) if p.classes is not None else [str(i) for i in range(K)]
    header = {"classes": classes, "height": h, "width": w, "mode": p.mode, "dtype": "f32"}
    if frame_id is not None:
        header["frame_id"] = frame_id
    write_tensor(path, p.values.astype(np.float32), header)


def load_probabilities(path: str | Path) -> tuple[ProbabilityField, dict]:
    header, arr = read_tensor(path)
    if "classes" not in header:
        raise DataError(f"{path}: probability header lacks 'classes'")
    mode = header.get("mode", CATEGORICAL)
    return ProbabilityField(arr.astype(float), mode, tuple(header["classes"])), header


def save_labels(path: str | Path, labels: LabelField, classes: Sequence[str],
                frame_id: str | None = None, mode: str | None = None) -> None:
    K, h, w = labels.values.shape
    header = {"classes": list(classes), "height": h, "width": w, "dtype": "u8"}
    if mode is not None:
        header["mode"] = mode
    if frame_id is not None:
        header["frame_id"] = frame_id
    write_tensor(path, labels.values, header)
