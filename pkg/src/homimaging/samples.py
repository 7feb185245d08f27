"""Synthetic transparent samples: acrylic cross, etched lettering, bar targets."""

from __future__ import annotations

from typing import Tuple

import numpy as np

# 3x5 glyphs; rows top to bottom
_GLYPHS = {
    "U": ["101", "101", "101", "101", "111"],
    "o": ["000", "000", "111", "101", "111"],
    "f": ["011", "010", "111", "010", "010"],
    "G": ["111", "100", "101", "101", "111"],
}


def cross(shape: Tuple[int, int], thickness_um: float = 12.9, arm_width: int = 8,
          arm_length: int = 24) -> np.ndarray:
    """Depth map of a centred plus sign of uniform thickness."""
    rows, cols = shape
    depth = np.zeros(shape)
    r0, c0 = rows // 2, cols // 2
    hw, hl = arm_width // 2, arm_length // 2
    depth[r0 - hw:r0 - hw + arm_width, c0 - hl:c0 - hl + arm_length] = thickness_um
    depth[r0 - hl:r0 - hl + arm_length, c0 - hw:c0 - hw + arm_width] = thickness_um
    return depth


def lettering(shape: Tuple[int, int], text: str = "UofG", etch_depth_um: float = 8.36,
              stroke: int = 2) -> np.ndarray:
    """Thickness map with ``text`` etched ``etch_depth_um`` into the substrate.

    Etched strokes are thinner than the substrate, so they carry negative
    values. Strokes are ``stroke`` grid cells wide.
    """
    rows, cols = shape
    glyphs = [np.array([[ch == "1" for ch in line] for line in _GLYPHS[c]]) for c in text]
    width = len(glyphs) * 3 * stroke + (len(glyphs) - 1) * stroke
    height = 5 * stroke
    if width > cols or height > rows:
        raise ValueError(f"text needs {height}x{width} pixels, scene is {rows}x{cols}")
    mask = np.zeros(shape, bool)
    r0 = (rows - height) // 2
    c = (cols - width) // 2
    for g in glyphs:
        big = np.kron(g, np.ones((stroke, stroke), bool))
        mask[r0:r0 + height, c:c + 3 * stroke] |= big
        c += 4 * stroke
    return np.where(mask, -etch_depth_um, 0.0)


def bar_target(shape: Tuple[int, int], depth_um: float, oversample: int = 2,
               phase: int = 1) -> np.ndarray:
    """Vertical bars one camera pixel wide on a grid ``oversample`` times finer.

    ``phase`` shifts the bar edges by that many fine cells, so with the
    default the edges sit half-way across native pixels.
    """
    rows, cols = shape
    c = np.arange(cols * oversample)
    bars = ((c - phase) // oversample) % 2 == 0
    return np.broadcast_to(np.where(bars, depth_um, 0.0), (rows * oversample, cols * oversample)).copy()


def erode(mask: np.ndarray, steps: int = 1) -> np.ndarray:
    """Binary erosion with the 4-neighbourhood."""
    m = np.asarray(mask, bool)
    for _ in range(steps):
        p = np.pad(m, 1, constant_values=False)
        m = p[1:-1, 1:-1] & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m
