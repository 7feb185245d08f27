"""Monte-Carlo synthesis of SPAD binary frame streams.

Each frame is a coincidence gate. Photon pairs arrive as a Poisson number per
frame, interfere at the beam splitter, and land on one or both halves of the
sensor. Raw frames are laid out as two halves side by side; half B appears
with the same orientation as half A so that ``transform_halves`` (a 180 degree
rotation of half B) turns anti-bunched partners into point reflections of each
other and leaves bunched partners next to each other.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .model import CameraModel, GeometryError, ScanPlan, SceneModel, SourceModel

BLOCK_FRAMES = 8192

HOMF_MAGIC = b"HOMF"
HOMF_VERSION = 1
# magic, 4 reserved bytes, version, width, height, frame count, seed, stage delay
_HOMF_HEADER = struct.Struct("<4s4xHHHQQd")


class FormatError(ValueError):
    """Malformed frame or checkpoint data."""


def row_bytes(width: int) -> int:
    return (width + 7) // 8


@dataclass(frozen=True)
class BinaryFrame:
    """One bit-packed click mask, rows MSB-first, padding bits zero."""

    width_px: int
    height_px: int
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.shape != (self.height_px, row_bytes(self.width_px)):
            raise GeometryError(
                f"bits shape {bits.shape} does not match a {self.width_px}x{self.height_px} frame")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_array(cls, clicks: np.ndarray) -> "BinaryFrame":
        clicks = np.asarray(clicks, dtype=bool)
        return cls(clicks.shape[1], clicks.shape[0], np.packbits(clicks, axis=-1))

    def to_array(self) -> np.ndarray:
        return np.unpackbits(self.bits, axis=-1, count=self.width_px).astype(bool)

    @property
    def n_clicks(self) -> int:
        return int(np.unpackbits(self.bits).sum())


@dataclass(frozen=True)
class FrameHeader:
    width_px: int
    height_px: int
    n_frames: int
    seed: int = 0
    stage_delay_um: float = 0.0

    @property
    def frame_bytes(self) -> int:
        return row_bytes(self.width_px) * self.height_px

    def pack(self) -> bytes:
        return _HOMF_HEADER.pack(HOMF_MAGIC, HOMF_VERSION, self.width_px, self.height_px,
                                 self.n_frames, self.seed, self.stage_delay_um)

    @classmethod
    def unpack(cls, raw: bytes) -> "FrameHeader":
        if len(raw) < _HOMF_HEADER.size:
            raise FormatError(f"truncated header at byte {len(raw)} "
                              f"(need {_HOMF_HEADER.size})")
        magic, version, width, height, n, seed, delay = _HOMF_HEADER.unpack(
            raw[:_HOMF_HEADER.size])
        if magic != HOMF_MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte 0")
        if version != HOMF_VERSION:
            raise FormatError(f"unsupported HOMF version {version} at byte 8")
        return cls(width, height, n, seed, delay)


HEADER_BYTES = _HOMF_HEADER.size


@dataclass
class FrameStream:
    """A header plus ``frames`` of shape (n_frames, height, row_bytes)."""

    header: FrameHeader
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.uint8)
        h = self.header
        expected = (h.n_frames, h.height_px, row_bytes(h.width_px))
        if self.frames.shape != expected:
            raise FormatError(f"frames shape {self.frames.shape} does not match header {expected}")

    def __len__(self) -> int:
        return self.header.n_frames

    def __iter__(self) -> Iterator[BinaryFrame]:
        h = self.header
        for bits in self.frames:
            yield BinaryFrame(h.width_px, h.height_px, bits)

    @classmethod
    def from_frames(cls, frames: Sequence[BinaryFrame], seed: int = 0,
                    stage_delay_um: float = 0.0) -> "FrameStream":
        if not frames:
            raise ValueError("need at least one frame")
        w, h = frames[0].width_px, frames[0].height_px
        for f in frames:
            if (f.width_px, f.height_px) != (w, h):
                raise FormatError("frames disagree on geometry")
        return cls(FrameHeader(w, h, len(frames), seed, stage_delay_um),
                   np.stack([f.bits for f in frames]))

    def clicks(self) -> np.ndarray:
        """Unpacked boolean array (n_frames, height, width)."""
        return np.unpackbits(self.frames, axis=-1, count=self.header.width_px).astype(bool)

    def write(self, path: Union[str, Path]) -> None:
        with open(path, "wb") as fh:
            fh.write(self.header.pack())
            fh.write(self.frames.tobytes())

    @classmethod
    def read(cls, path: Union[str, Path]) -> "FrameStream":
        chunks = list(iter_homf(path, chunk_frames=1 << 30))
        if not chunks:
            raise FormatError("empty file")
        header = chunks[0][0]
        frames = np.concatenate([c for _, c in chunks]) if chunks[0][1].size else chunks[0][1]
        return cls(header, frames)


def iter_homf(source: Union[str, Path, BinaryIO],
              chunk_frames: int = BLOCK_FRAMES) -> Iterator[Tuple[FrameHeader, np.ndarray]]:
    """Stream (header, frames) chunks from a HOMF file or binary file object.

    Truncated or malformed input raises ``FormatError`` naming the byte offset.
    """
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            yield from iter_homf(fh, chunk_frames)
        return
    raw = source.read(HEADER_BYTES)
    header = FrameHeader.unpack(raw)
    fb = header.frame_bytes
    shape = (header.height_px, row_bytes(header.width_px))
    remaining = header.n_frames
    offset = HEADER_BYTES
    if remaining == 0:
        yield header, np.zeros((0,) + shape, np.uint8)
        return
    while remaining:
        n = min(chunk_frames, remaining)
        buf = source.read(n * fb)
        if len(buf) != n * fb:
            done = header.n_frames - remaining + len(buf) // fb
            raise FormatError(
                f"truncated frame data at byte {offset + len(buf)}: "
                f"header promises {header.n_frames} frames, found {done}")
        offset += len(buf)
        remaining -= n
        yield header, np.frombuffer(buf, np.uint8).reshape((n,) + shape)


def write_homf(path: Union[str, Path], header: FrameHeader, blocks: Iterable[np.ndarray]) -> int:
    """Stream packed frame blocks to a HOMF file; returns the frame count written."""
    written = 0
    shape = (header.height_px, row_bytes(header.width_px))
    with open(path, "wb") as fh:
        fh.write(header.pack())
        for block in blocks:
            block = np.ascontiguousarray(block, dtype=np.uint8)
            if block.shape[1:] != shape:
                raise FormatError(f"block of shape {block.shape} does not match header {shape}")
            fh.write(block.tobytes())
            written += block.shape[0]
    if written != header.n_frames:
        raise FormatError(f"wrote {written} frames but the header promises {header.n_frames}")
    return written


# --- physics ---------------------------------------------------------------

class Branch(enum.Enum):
    BUNCHED = 0
    ANTI_BUNCHED = 1


def anti_bunch_probability(delay_um, source: SourceModel, local_visibility=1.0):
    """Probability that a pair exits through opposite beam-splitter ports."""
    delay = np.asarray(delay_um, dtype=float)
    v_eff = source.intrinsic_visibility * np.asarray(local_visibility, dtype=float)
    overlap = np.exp(-delay ** 2 / (2.0 * source.dip_width_um ** 2))
    return 0.5 * (1.0 - v_eff * overlap)


def branch_hom(delay_um: float, source: SourceModel, local_visibility: float,
               rng: np.random.Generator) -> Branch:
    if not 0.0 <= local_visibility <= 1.0:
        raise ValueError("local_visibility must be in [0, 1]")
    p = anti_bunch_probability(delay_um, source, local_visibility)
    return Branch.ANTI_BUNCHED if rng.random() < p else Branch.BUNCHED


def mode_overlap(offset_px: np.ndarray, source: SourceModel, camera: CameraModel) -> np.ndarray:
    """Indistinguishability factor for partners separated by ``offset_px`` (n, 2)."""
    if source.mode_width_um is None:
        return np.ones(len(offset_px))
    ell = source.mode_width_um / camera.pixel_pitch_um
    return np.exp(-np.sum(offset_px ** 2, axis=1) / (2.0 * ell ** 2))


def _sample_continuous(source: SourceModel, camera: CameraModel, rng: np.random.Generator,
                       n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Continuous (row, col) positions of signal and idler in pixel units."""
    rows, cols = camera.half_shape
    if source.envelope == "gaussian":
        # the envelope is truncated to the half: every pair's centre lands on it
        sig_env = source.envelope_sigma_um / camera.pixel_pitch_um
        centre = rng.normal(0.0, sig_env, size=(n, 2)) + (rows / 2.0, cols / 2.0)
        out = np.flatnonzero(np.any((centre < 0) | (centre >= (rows, cols)), axis=1))
        while out.size:
            centre[out] = rng.normal(0.0, sig_env, size=(out.size, 2)) + (rows / 2.0, cols / 2.0)
            bad = np.any((centre[out] < 0) | (centre[out] >= (rows, cols)), axis=1)
            out = out[bad]
    else:
        centre = rng.random((n, 2)) * (rows, cols)
    sig_off = source.correlation_width_um / camera.pixel_pitch_um
    offset = rng.normal(0.0, sig_off, size=(n, 2)) if sig_off > 0 else np.zeros((n, 2))
    return centre + offset / 2.0, centre - offset / 2.0


class PairPositions(NamedTuple):
    signal: np.ndarray      # (n, 2) int pixel (row, col)
    idler: np.ndarray
    signal_lost: np.ndarray  # (n,) bool, off the half
    idler_lost: np.ndarray


def sample_pair_positions(source: SourceModel, camera: CameraModel, rng: np.random.Generator,
                          n: int = 1) -> PairPositions:
    """Draw ``n`` pairs and quantize them to one sensor half's pixel grid."""
    s, i = _sample_continuous(source, camera, rng, n)
    shape = np.array(camera.half_shape)
    s_px = np.floor(s).astype(np.int64)
    i_px = np.floor(i).astype(np.int64)
    lost_s = np.any((s_px < 0) | (s_px >= shape), axis=1)
    lost_i = np.any((i_px < 0) | (i_px >= shape), axis=1)
    return PairPositions(s_px, i_px, lost_s, lost_i)


def _scene_lookup(scene: SceneModel, pos: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Depth and visibility under continuous positions; off-scene uses the edge value."""
    fine = np.floor(pos * scene.oversample).astype(np.int64)
    r = np.clip(fine[:, 0], 0, scene.depth_map.shape[0] - 1)
    c = np.clip(fine[:, 1], 0, scene.depth_map.shape[1] - 1)
    depth = scene.depth_map[r, c]
    vis = scene.visibility_map[r, c] if scene.visibility_map is not None else np.ones(len(r))
    return depth, vis


def _detector_index(pos: np.ndarray, half: np.ndarray, camera: CameraModel,
                    shift: Tuple[float, float]) -> np.ndarray:
    """Raw flat pixel index, or -1 for photons missing the half."""
    rows, cols = camera.half_shape
    r = np.floor(pos[:, 0] - shift[0]).astype(np.int64)
    c = np.floor(pos[:, 1] - shift[1]).astype(np.int64)
    ok = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
    idx = r * camera.width_px + c + half * cols
    return np.where(ok, idx, -1)


def _simulate_block(scene: SceneModel, source: SourceModel, camera: CameraModel, n: int,
                    rng: np.random.Generator, shift: Tuple[float, float]) -> np.ndarray:
    eta = camera.detection_efficiency
    lam = source.pair_rate_per_frame
    # Poisson thinning: pairs with both, only-signal, only-idler detected are
    # independent Poisson processes; undetected pairs never touch the frame.
    counts = rng.poisson([lam * eta * eta, lam * eta * (1 - eta), lam * eta * (1 - eta)],
                         size=(n, 3))
    per_frame = counts.sum(axis=1)
    m = int(per_frame.sum())
    frame_of = np.repeat(np.arange(n), per_frame)
    cls = np.repeat(np.tile([0, 1, 2], n), counts.ravel())
    sig_pos, idl_pos = _sample_continuous(source, camera, rng, m)
    depth, vis = _scene_lookup(scene, sig_pos)
    delay = scene.stage_delay_um - depth
    local_vis = vis * mode_overlap(sig_pos - idl_pos, source, camera)
    anti = rng.random(m) < anti_bunch_probability(delay, source, local_vis)
    sig_half = rng.integers(0, 2, size=m)
    idl_half = np.where(anti, 1 - sig_half, sig_half)

    sig_idx = np.where(cls != 2, _detector_index(sig_pos, sig_half, camera, shift), -1)
    idl_idx = np.where(cls != 1, _detector_index(idl_pos, idl_half, camera, shift), -1)

    clicks = np.zeros((n, camera.n_pixels), dtype=bool)
    for idx in (sig_idx, idl_idx):
        keep = idx >= 0
        clicks[frame_of[keep], idx[keep]] = True

    p_dark = camera.dark_click_probability
    if p_dark > 0:
        total = n * camera.n_pixels
        k = rng.binomial(total, p_dark)
        if k:
            flat = rng.choice(total, size=k, replace=False)
            clicks.reshape(-1)[flat] = True
    return np.packbits(clicks.reshape(n, camera.height_px, camera.width_px), axis=-1)


def block_rng(seed: int, delay_index: int, block_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(delay_index, block_index)))


def iter_frame_blocks(scene: SceneModel, source: SourceModel, camera: CameraModel, n_frames: int,
                      seed: int = 0, delay_index: int = 0,
                      camera_shift: Tuple[float, float] = (0.0, 0.0)) -> Iterator[np.ndarray]:
    """Yield packed frame blocks of at most BLOCK_FRAMES frames.

    Block ``b`` draws from a generator keyed by (seed, delay_index, b), so any
    consumer schedule sees the same frames.
    """
    scene.check_camera(camera)
    done = 0
    b = 0
    while done < n_frames:
        n = min(BLOCK_FRAMES, n_frames - done)
        yield _simulate_block(scene, source, camera, n, block_rng(seed, delay_index, b),
                              camera_shift)
        done += n
        b += 1


def synthesize_frame(scene: SceneModel, source: SourceModel, camera: CameraModel,
                     rng: np.random.Generator,
                     camera_shift: Tuple[float, float] = (0.0, 0.0)) -> BinaryFrame:
    scene.check_camera(camera)
    bits = _simulate_block(scene, source, camera, 1, rng, camera_shift)[0]
    return BinaryFrame(camera.width_px, camera.height_px, bits)


def synthesize_stream(scene: SceneModel, source: SourceModel, camera: CameraModel, n_frames: int,
                      seed: int = 0, delay_index: int = 0,
                      camera_shift: Tuple[float, float] = (0.0, 0.0)) -> FrameStream:
    blocks = list(iter_frame_blocks(scene, source, camera, n_frames, seed, delay_index,
                                    camera_shift))
    frames = np.concatenate(blocks) if blocks else \
        np.zeros((0, camera.height_px, row_bytes(camera.width_px)), np.uint8)
    header = FrameHeader(camera.width_px, camera.height_px, n_frames, seed, scene.stage_delay_um)
    return FrameStream(header, frames)


def run_scan(plan: ScanPlan, scene: SceneModel, source: SourceModel,
             camera: CameraModel) -> List[FrameStream]:
    """One stream per plan delay; delay ``k`` draws from substreams keyed by ``k``."""
    return [synthesize_stream(scene.with_stage_delay(d), source, camera, plan.frames_per_delay,
                              plan.seed, k)
            for k, d in enumerate(plan.delays_um)]


# --- half-image transform ----------------------------------------------------

def half_rotation_map(width: int, height: int) -> np.ndarray:
    """Flat raw-pixel index -> flat index after rotating half B by 180 degrees."""
    if width % 2:
        raise GeometryError(f"frame width must be even, got {width}")
    hw = width // 2
    y, x = np.divmod(np.arange(width * height), width)
    in_b = x >= hw
    ty = np.where(in_b, height - 1 - y, y)
    tx = np.where(in_b, hw + (hw - 1 - (x - hw)), x)
    return ty * width + tx


def transform_halves(frame: BinaryFrame) -> BinaryFrame:
    if frame.width_px % 2:
        raise GeometryError(f"frame width must be even, got {frame.width_px}")
    clicks = frame.to_array()
    hw = frame.width_px // 2
    out = clicks.copy()
    out[:, hw:] = clicks[::-1, hw:][:, ::-1]
    return BinaryFrame.from_array(out)


def transform_stream(stream: FrameStream) -> FrameStream:
    h = stream.header
    if h.width_px % 2:
        raise GeometryError(f"frame width must be even, got {h.width_px}")
    clicks = stream.clicks()
    hw = h.width_px // 2
    clicks[:, :, hw:] = clicks[:, ::-1, hw:][:, :, ::-1].copy()
    return FrameStream(h, np.packbits(clicks, axis=-1))
