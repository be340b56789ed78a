"""Grounded interaction events from narrations and hand/object boxes."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, NoIntersection
from .tensorio import parse_jsonl, write_jsonl

logger = logging.getLogger(__name__)

HAND = "hand"


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise DataError(f"inverted box {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def intersection(self, other: "BBox") -> "BBox | None":
        x0, y0 = max(self.x_min, other.x_min), max(self.y_min, other.y_min)
        x1, y1 = min(self.x_max, other.x_max), min(self.y_max, other.y_max)
        if x0 > x1 or y0 > y1:
            return None
        return BBox(x0, y0, x1, y1)

    def clamp(self, width: int, height: int) -> "BBox":
        def c(v, hi):
            return min(max(v, 0.0), hi)
        return BBox(c(self.x_min, width - 1), c(self.y_min, height - 1),
                    c(self.x_max, width - 1), c(self.y_max, height - 1))

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)


@dataclass(frozen=True)
class NarrationRecord:
    frame_id: str
    verb: str
    object: str


@dataclass(frozen=True)
class Detection:
    cls: str
    box: BBox


@dataclass(frozen=True)
class InteractionEvent:
    frame_id: str
    verb: str
    object: str
    center: tuple[float, float]

    def to_record(self) -> dict:
        return {"frame_id": self.frame_id, "verb": self.verb, "object": self.object,
                "u": float(self.center[0]), "v": float(self.center[1])}


def interaction_center(hand: BBox, obj: BBox) -> np.ndarray:
    """Centroid of the hand/object box intersection.

    Touching boxes (zero-area intersection) are accepted.
    """
    inter = hand.intersection(obj)
    if inter is None:
        raise NoIntersection(f"hand {hand} and object {obj} do not intersect")
    return np.array([(inter.x_min + inter.x_max) / 2.0, (inter.y_min + inter.y_max) / 2.0])


@dataclass
class ExtractionSummary:
    events: int = 0
    skipped: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict:
        return {"events": self.events,
                "skipped": {k: self.skipped[k] for k in sorted(self.skipped)}}


def _best_pair(hands: Sequence[BBox], objects: Sequence[BBox]):
    # key: larger intersection, then smaller object box, then detection order
    best, best_key = None, None
    for oi, obj in enumerate(objects):
        for hi, hand in enumerate(hands):
            inter = hand.intersection(obj)
            if inter is None:
                continue
            key = (-inter.area, obj.area, oi, hi)
            if best_key is None or key < best_key:
                best, best_key = (hand, obj), key
    return best


def extract_events(narrations: Iterable[NarrationRecord],
                   detections: Mapping[str, Sequence[Detection]],
                   verbs: Sequence[str] | None = None,
                   objects: Sequence[str] | None = None,
                   ) -> tuple[list[InteractionEvent], ExtractionSummary]:
    """One event per narration whose object box meets a hand box.

    Narrations that cannot be grounded are skipped and counted by reason in
    the returned summary; output order follows the narration stream.
    """
    verb_set = set(verbs) if verbs is not None else None
    object_set = set(objects) if objects is not None else None
    summary = ExtractionSummary()
    events = []
    for n in narrations:
        if verb_set is not None and n.verb not in verb_set:
            summary.skipped["unknown_verb"] += 1
            continue
        if object_set is not None and n.object not in object_set:
            summary.skipped["unknown_object"] += 1
            continue
        dets = detections.get(n.frame_id, ())
        hands = [d.box for d in dets if d.cls == HAND]
        objs = [d.box for d in dets if d.cls == n.object]
        if not hands:
            summary.skipped["missing_hand"] += 1
            logger.info("frame %s: no hand box for %s %s", n.frame_id, n.verb, n.object)
            continue
        if not objs:
            summary.skipped["missing_object"] += 1
            logger.info("frame %s: object %r not detected", n.frame_id, n.object)
            continue
        pair = _best_pair(hands, objs)
        if pair is None:
            summary.skipped["no_intersection"] += 1
            logger.info("frame %s: hand and %r boxes are disjoint", n.frame_id, n.object)
            continue
        c = interaction_center(*pair)
        events.append(InteractionEvent(n.frame_id, n.verb, n.object, (float(c[0]), float(c[1]))))
        summary.events += 1
    return events, summary


# -- file formats -----------------------------------------------------------

def load_narrations(path: str | Path) -> list[NarrationRecord]:
    return parse_jsonl(path, lambda r: NarrationRecord(str(r["frame_id"]), str(r["verb"]),
                                                       str(r["object"])),
                       ("frame_id", "verb", "object"))


def _detection(rec: dict) -> tuple[str, Detection]:
    cls = str(rec["class"])
    if cls in ("left hand", "right hand", "hand_left", "hand_right"):
        cls = HAND
    box = BBox(float(rec["x_min"]), float(rec["y_min"]), float(rec["x_max"]), float(rec["y_max"]))
    return str(rec["frame_id"]), Detection(cls, box)


def load_detections(path: str | Path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for fid, det in parse_jsonl(path, _detection,
                                ("frame_id", "class", "x_min", "y_min", "x_max", "y_max")):
        out.setdefault(fid, []).append(det)
    return out


def detection_record(frame_id: str, det: Detection) -> dict:
    b = det.box
    return {"frame_id": frame_id, "class": det.cls, "x_min": float(b.x_min),
            "y_min": float(b.y_min), "x_max": float(b.x_max), "y_max": float(b.y_max)}


def save_events(path: str | Path, events: Iterable[InteractionEvent]) -> None:
    write_jsonl(path, (e.to_record() for e in events))


def load_events(path: str | Path) -> list[InteractionEvent]:
    return parse_jsonl(path, lambda r: InteractionEvent(str(r["frame_id"]), str(r["verb"]),
                                                        str(r["object"]),
                                                        (float(r["u"]), float(r["v"]))),
                       ("frame_id", "verb", "object", "u", "v"))
