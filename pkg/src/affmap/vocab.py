"""Affordance class vocabularies and the class colormap."""

from __future__ import annotations

import colorsys
from pathlib import Path

from .errors import ConfigError
from .tensorio import read_json

EASY = (
    "take", "put", "open", "close", "wash", "cut", "mix", "pour", "throw", "move",
    "remove", "dry", "turn-on", "turn", "shake", "turn-off", "peel", "adjust",
    "empty", "scoop",
)

# The 23 extra names of the 43-class preset follow common EPIC-100 verbs.
COMPLEX = EASY + (
    "insert", "squeeze", "press", "flip", "check", "scrape", "fill", "apply",
    "fold", "scratch", "break", "pull", "hang", "wrap", "lift", "sprinkle", "pat",
    "stretch", "hold", "rub", "knead", "sort", "spray",
)

PRESETS = {"easy": EASY, "complex": COMPLEX}

# Colors of the 20 easy classes, in EASY order.
_EASY_COLORS = (
    0x804080, 0xF423E8, 0x464646, 0x66669C, 0x98FB98, 0x4682B4, 0xFAAA1E, 0xDCDC00,
    0x6B8E23, 0xBE9999, 0x999999, 0xDC143C, 0xFF0000, 0x00008C, 0x000046, 0x643C64,
    0xCBCEFB, 0x04FFD8, 0x0000E6, 0x770B20,
)


def class_color(index: int) -> tuple[int, int, int]:
    if index < len(_EASY_COLORS):
        c = _EASY_COLORS[index]
    else:
        # golden-ratio hue walk keeps extra classes distinguishable
        r, g, b = colorsys.hsv_to_rgb((index * 0.618033988749895) % 1.0, 0.65, 0.9)
        return int(r * 255), int(g * 255), int(b * 255)
    return (c >> 16) & 0xFF, (c >> 8) & 0xFF, c & 0xFF


def load_vocabulary(source: str | Path | list | tuple | None) -> tuple[str, ...]:
    """Resolve a preset name, a JSON file, or an explicit list to class names.

    JSON files may hold a bare list or ``{"classes": [...]}``.
    """
    if source is None:
        return EASY
    if isinstance(source, (list, tuple)):
        classes = tuple(str(c) for c in source)
    elif str(source) in PRESETS:
        classes = PRESETS[str(source)]
    else:
        data = read_json(source)
        if isinstance(data, dict):
            data = data.get("classes")
        if not isinstance(data, list):
            raise ConfigError(f"{source}: vocabulary must be a list of class names")
        classes = tuple(str(c) for c in data)
    if not classes:
        raise ConfigError("vocabulary is empty")
    if len(set(classes)) != len(classes):
        raise ConfigError("vocabulary has duplicate class names")
    return classes
