"""Joint probability distribution of photon pairs from binary frame streams.

The estimator is

    Gamma(a, b) = (1/N) sum_l I_l(a) I_l(b) - (1/N^2) sum_{m,n} I_m(a) I_n(b)

and the inter-frame term factorizes into S(a) S(b) / N^2 with S the per-pixel
click count. Only the intra-frame products ``A`` and the marginals ``S`` are
accumulated, as exact integers, so chunks merge bit-identically in any order.
"""

from __future__ import annotations

import functools
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Optional, Sequence, Union

import numba
import numpy as np

from .model import GeometryError
from .simulate import FormatError, FrameStream, half_rotation_map, row_bytes

Kind = Literal["sum", "minus"]

CHECKPOINT_MAGIC = b"HOMC"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHHHxxQd")


@numba.njit(cache=True, nogil=True)
def _accumulate_packed(frames, width, pixel_map, upper, marginal):
    n, height, nbytes = frames.shape
    hits = np.empty(width * height, np.int64)
    for f in range(n):
        k = 0
        for y in range(height):
            base = y * width
            for j in range(nbytes):
                byte = frames[f, y, j]
                if byte == 0:
                    continue
                for bit in range(8):
                    if byte & (0x80 >> bit):
                        x = j * 8 + bit
                        if x < width:
                            hits[k] = pixel_map[base + x]
                            k += 1
        for a in range(k):
            ia = hits[a]
            marginal[ia] += 1
            for b in range(a, k):
                ib = hits[b]
                if ia <= ib:
                    upper[ia, ib] += 1
                else:
                    upper[ib, ia] += 1


def _symmetrize(upper: np.ndarray) -> np.ndarray:
    return upper + upper.T - np.diag(np.diag(upper))


@dataclass(frozen=True, eq=False)
class CoincidenceTensor:
    """Integer accumulators over the full sensor; ``intra`` is symmetric (P, P)."""

    width: int
    height: int
    intra: np.ndarray
    marginal: np.ndarray
    n_frames: int
    stage_delay_um: float = float("nan")

    @classmethod
    def empty(cls, width: int, height: int) -> "CoincidenceTensor":
        p = width * height
        return cls(width, height, np.zeros((p, p), np.int64), np.zeros(p, np.int64), 0)

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @functools.cached_property
    def gamma(self) -> np.ndarray:
        """Genuine-coincidence estimate, probability per frame for each pixel pair."""
        if self.n_frames == 0:
            return np.zeros(self.intra.shape)
        n = float(self.n_frames)
        s = self.marginal.astype(float)
        return self.intra / n - np.outer(s, s) / (n * n)

    def same_geometry(self, other: "CoincidenceTensor") -> bool:
        return (self.width, self.height) == (other.width, other.height)

    def equals(self, other: "CoincidenceTensor") -> bool:
        return (self.same_geometry(other) and self.n_frames == other.n_frames
                and np.array_equal(self.intra, other.intra)
                and np.array_equal(self.marginal, other.marginal))


class Accumulator:
    """Streaming accumulation of packed frames into a CoincidenceTensor.

    With ``transform=True`` half B of each raw frame is rotated by 180 degrees
    on the fly, which is equivalent to running ``transform_halves`` first.
    """

    def __init__(self, width: int, height: int, transform: bool = True):
        self.width = width
        self.height = height
        p = width * height
        self._map = (half_rotation_map(width, height) if transform
                     else np.arange(p)).astype(np.int64)
        self._upper = np.zeros((p, p), np.int64)
        self._marginal = np.zeros(p, np.int64)
        self.n_frames = 0

    def update(self, frames: np.ndarray) -> "Accumulator":
        frames = np.ascontiguousarray(frames, dtype=np.uint8)
        if frames.ndim != 3 or frames.shape[1:] != (self.height, row_bytes(self.width)):
            raise FormatError(f"frame block of shape {frames.shape} does not match a "
                              f"{self.width}x{self.height} sensor")
        _accumulate_packed(frames, self.width, self._map, self._upper, self._marginal)
        self.n_frames += frames.shape[0]
        return self

    def tensor(self, stage_delay_um: float = float("nan")) -> CoincidenceTensor:
        return CoincidenceTensor(self.width, self.height, _symmetrize(self._upper),
                                 self._marginal.copy(), self.n_frames, stage_delay_um)


def accumulate(stream: FrameStream, transform: bool = True) -> CoincidenceTensor:
    """Coincidence tensor of a whole stream (raw frames unless ``transform=False``)."""
    h = stream.header
    if h.n_frames == 0:
        raise ValueError("cannot accumulate an empty stream")
    acc = Accumulator(h.width_px, h.height_px, transform)
    acc.update(stream.frames)
    return acc.tensor(h.stage_delay_um)


def accumulate_blocks(blocks: Iterable[np.ndarray], width: int, height: int,
                      transform: bool = True, threads: int = 1,
                      stage_delay_um: float = float("nan")) -> CoincidenceTensor:
    """Accumulate an iterable of packed frame blocks, optionally on worker threads.

    Each worker owns a local accumulator and the partial tensors are merged at
    the end, so the result does not depend on ``threads``.
    """
    if threads <= 1:
        acc = Accumulator(width, height, transform)
        for block in blocks:
            acc.update(block)
        return acc.tensor(stage_delay_um)
    workers = [Accumulator(width, height, transform) for _ in range(threads)]
    with ThreadPoolExecutor(threads) as pool:
        pending = []
        for i, block in enumerate(blocks):
            w = workers[i % threads]
            # one outstanding job per worker keeps its accumulator single-writer
            if len(pending) >= threads:
                pending.pop(0).result()
            pending.append(pool.submit(w.update, block))
        for job in pending:
            job.result()
    result = workers[0].tensor(stage_delay_um)
    for w in workers[1:]:
        result = merge(result, w.tensor(stage_delay_um))
    return result


def merge(a: CoincidenceTensor, b: CoincidenceTensor) -> CoincidenceTensor:
    if not a.same_geometry(b):
        raise GeometryError(f"cannot merge {a.width}x{a.height} with {b.width}x{b.height}")
    if a.n_frames == 0:
        delay = b.stage_delay_um
    elif b.n_frames == 0 or a.stage_delay_um == b.stage_delay_um:
        delay = a.stage_delay_um
    else:
        delay = float("nan")
    return CoincidenceTensor(a.width, a.height, a.intra + b.intra, a.marginal + b.marginal,
                             a.n_frames + b.n_frames, delay)


# --- projections -------------------------------------------------------------

@dataclass(frozen=True)
class Projection:
    """JPD projected onto sum (r_a + r_b) or minus (r_b - r_a) coordinates.

    ``values`` has shape (2H-1, 2W-1) and ``center`` is the index of the zero
    minus-offset, or of the anti-bunching conjugate sum (W-1, H-1). ``valid``
    flags bins that carry two-photon information.
    """

    kind: str
    values: np.ndarray
    valid: np.ndarray
    center: tuple

    def at(self, dy: int, dx: int) -> float:
        return float(self.values[self.center[0] + dy, self.center[1] + dx])

    def total(self) -> float:
        return float(self.values.sum())


@functools.lru_cache(maxsize=8)
def _projection_index(width: int, height: int, kind: str, pairs: str) -> tuple:
    p = width * height
    y, x = np.divmod(np.arange(p), width)
    gw = 2 * width - 1
    if kind == "sum":
        idx = (y[:, None] + y[None, :]) * gw + (x[:, None] + x[None, :])
    else:
        idx = (y[None, :] - y[:, None] + height - 1) * gw + (x[None, :] - x[:, None] + width - 1)
    half_b = x >= width // 2
    if pairs == "all":
        sel = np.ones((p, p), bool)
    elif pairs == "same":
        sel = half_b[:, None] == half_b[None, :]
    elif pairs == "cross":
        sel = half_b[:, None] != half_b[None, :]
    else:
        raise ValueError(f"pairs must be 'all', 'same' or 'cross', got {pairs!r}")
    return idx[sel].astype(np.int64), sel


def project(t: CoincidenceTensor, kind: Kind, pairs: str = "all") -> Projection:
    """Sum or minus projection of Gamma over ordered pixel pairs.

    ``pairs`` restricts the pixel pairs entering the projection: ``"same"``
    keeps pairs within one half, ``"cross"`` pairs spanning both halves. The
    minus projection's zero-offset bin is invalid because a pixel cannot
    resolve two photons.
    """
    if kind not in ("sum", "minus"):
        raise ValueError(f"kind must be 'sum' or 'minus', got {kind!r}")
    idx, sel = _projection_index(t.width, t.height, kind, pairs)
    shape = (2 * t.height - 1, 2 * t.width - 1)
    vals = np.bincount(idx, weights=t.gamma[sel], minlength=shape[0] * shape[1]).reshape(shape)
    valid = np.ones(shape, bool)
    center = (t.height - 1, t.width - 1)
    if kind == "minus":
        valid[center] = False
    return Projection(kind, vals, valid, center)


# --- per-pixel maps ----------------------------------------------------------

def _disk_offsets(radius: float):
    r = int(np.floor(radius))
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if dy * dy + dx * dx <= radius * radius + 1e-12]


def antibunch_map(t: CoincidenceTensor, neighborhood_radius: float = 1.0) -> np.ndarray:
    """Anti-bunching coincidence counts over half A, shape (H, W/2).

    Pixel ``r`` collects Gamma(r, r_i) for half-B pixels ``r_i`` within the
    radius of its point-reflected partner, scaled to counts by N.
    """
    if neighborhood_radius < 0:
        raise ValueError("neighborhood_radius must be >= 0")
    w, h, hw = t.width, t.height, t.width // 2
    g = t.gamma
    ys, xs = np.mgrid[0:h, 0:hw]
    a_idx = (ys * w + xs).ravel()
    cy, cx = (h - 1 - ys).ravel(), (w - 1 - xs).ravel()
    out = np.zeros(h * hw)
    for dy, dx in _disk_offsets(neighborhood_radius):
        py, px = cy + dy, cx + dx
        ok = (py >= 0) & (py < h) & (px >= hw) & (px < w)
        out[ok] += g[a_idx[ok], (py * w + px)[ok]]
    return out.reshape(h, hw) * t.n_frames


_NEAREST = ((0, 1), (0, -1), (1, 0), (-1, 0))


def _adjacent_mean(g: np.ndarray, w: int, h: int, ys: np.ndarray, xs: np.ndarray,
                   x_lo: int, x_hi: int) -> np.ndarray:
    idx = ys * w + xs
    total = np.zeros(ys.shape)
    count = np.zeros(ys.shape)
    for dy, dx in _NEAREST:
        ny, nx = ys + dy, xs + dx
        ok = (ny >= 0) & (ny < h) & (nx >= x_lo) & (nx < x_hi)
        total[ok] += g[idx[ok], (ny * w + nx)[ok]]
        count[ok] += 1
    return total / np.maximum(count, 1)


def bunch_map_adjacent(t: CoincidenceTensor, halves: str = "both") -> np.ndarray:
    """Bunching coincidence counts from nearest-neighbour pixel pairs, shape (H, W/2).

    For each scene pixel, Gamma(r, r + dr) is averaged over the four nearest
    neighbours inside the same half. With ``halves="both"`` the half-B estimate
    (rotated back to scene orientation) is added to half A's, so every bunched
    pair counts regardless of the port it left through.
    """
    w, h, hw = t.width, t.height, t.width // 2
    g = t.gamma
    ys, xs = np.mgrid[0:h, 0:hw]
    out = _adjacent_mean(g, w, h, ys, xs, 0, hw)
    if halves == "both":
        out = out + _adjacent_mean(g, w, h, h - 1 - ys, w - 1 - xs, hw, w)
    elif halves != "a":
        raise ValueError(f"halves must be 'both' or 'a', got {halves!r}")
    return out * t.n_frames


# --- checkpoint --------------------------------------------------------------

def save_checkpoint(t: CoincidenceTensor, path: Union[str, Path]) -> None:
    """Header, marginal counts, then the upper triangle of ``intra`` row by row (u64 LE)."""
    iu = np.triu_indices(t.n_pixels)
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, t.width, t.height,
                                   t.n_frames, t.stage_delay_um))
        fh.write(t.marginal.astype("<u8").tobytes())
        fh.write(t.intra[iu].astype("<u8").tobytes())


def load_checkpoint(path: Union[str, Path]) -> CoincidenceTensor:
    raw = Path(path).read_bytes()
    hs = _CKPT_HEADER.size
    if len(raw) < hs:
        raise FormatError(f"truncated checkpoint header at byte {len(raw)}")
    magic, version, w, h, n, delay = _CKPT_HEADER.unpack(raw[:hs])
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r} at byte 0")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    p = w * h
    n_tri = p * (p + 1) // 2
    expected = hs + 8 * (p + n_tri)
    if len(raw) != expected:
        raise FormatError(f"checkpoint body ends at byte {len(raw)}, expected {expected}")
    marginal = np.frombuffer(raw, "<u8", p, hs).astype(np.int64)
    tri = np.frombuffer(raw, "<u8", n_tri, hs + 8 * p).astype(np.int64)
    upper = np.zeros((p, p), np.int64)
    upper[np.triu_indices(p)] = tri
    return CoincidenceTensor(w, h, _symmetrize(upper), marginal, n, delay)
