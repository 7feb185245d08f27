"""Configuration files and image grids on disk.

Configuration is INI-style ``key = value`` text. Every key that carries a
physical quantity spells its unit in the name (``pixel_pitch_um``); unknown
keys are rejected so a misspelt unit cannot be silently ignored.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .model import CAMERA_PRESETS, CameraModel, ScanPlan, SceneModel, SourceModel

PathLike = Union[str, Path]


class ConfigError(ValueError):
    """Configuration is missing, malformed or inconsistent."""


_CAMERA_KEYS = {
    "width_px": ("width_px", int),
    "height_px": ("height_px", int),
    "pixel_pitch_um": ("pixel_pitch_um", float),
    "fill_factor": ("fill_factor", float),
    "quantum_efficiency": ("quantum_efficiency", float),
    "dark_count_rate_cps": ("dark_count_rate", float),
    "exposure_s": ("exposure_s", float),
    "frame_rate_fps": ("frame_rate_fps", float),
}
_SOURCE_KEYS = {
    "pump_wavelength_nm": ("pump_wavelength_nm", float),
    "crystal_length_mm": ("crystal_length_mm", float),
    "diffraction_scale": ("diffraction_scale", float),
    "correlation_width_um": ("correlation_width_um", float),
    "dip_width_um": ("dip_width_um", float),
    "pair_rate_per_frame": ("pair_rate_per_frame", float),
    "intrinsic_visibility": ("intrinsic_visibility", float),
    "mode_width_um": ("mode_width_um", float),
    "envelope": ("envelope", str),
    "envelope_sigma_um": ("envelope_sigma_um", float),
}
_SCENE_KEYS = {"depth_map", "depth_um_per_level", "visibility_map", "visibility_per_level",
               "stage_delay_um", "oversample"}
_SCAN_KEYS = {"delays_um", "delay_start_um", "delay_stop_um", "delay_count", "frames_per_delay",
              "seed"}


@dataclass(frozen=True)
class RunConfig:
    camera: CameraModel
    source: SourceModel
    scene: SceneModel
    plan: Optional[ScanPlan]
    path: Optional[Path] = None


def _typed(section, table: dict, name: str) -> dict:
    out = {}
    for key, raw in section.items():
        if key not in table:
            raise ConfigError(f"[{name}] unknown key {key!r} (units must be part of the key name)")
        field, conv = table[key]
        if raw.strip().lower() == "none":
            out[field] = None
            continue
        try:
            out[field] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from exc
    return out


def _check_keys(section: configparser.SectionProxy, allowed: set, name: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"[{name}] unknown key {key!r}")


def load_config(path: PathLike, seed: Optional[int] = None) -> RunConfig:
    """Parse a run configuration; relative map paths resolve against the file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for sec in cp.sections():
        if sec not in ("camera", "source", "scene", "scan"):
            raise ConfigError(f"unknown section [{sec}]")

    try:
        if cp.has_section("camera"):
            sec = cp["camera"]
            preset = sec.get("preset")
            base = CAMERA_PRESETS.get(preset or "methods")
            if base is None:
                raise ConfigError(f"unknown camera preset {preset!r}")
            cam_kw = _typed({k: v for k, v in sec.items() if k != "preset"}, _CAMERA_KEYS,
                            "camera")
            camera = CameraModel(**{**base.__dict__, **cam_kw})
        else:
            camera = CAMERA_PRESETS["methods"]
        source = SourceModel(**_typed(cp["source"], _SOURCE_KEYS, "source")) \
            if cp.has_section("source") else SourceModel()
        scene = _load_scene(cp["scene"] if cp.has_section("scene") else None, camera, path.parent)
        plan = _load_plan(cp["scan"], seed) if cp.has_section("scan") else None
    except ConfigError:
        raise
    except (ValueError, TypeError, OSError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig(camera, source, scene, plan, path)


def _load_scene(sec, camera: CameraModel, root: Path) -> SceneModel:
    if sec is None:
        return SceneModel.flat(camera)
    _check_keys(sec, _SCENE_KEYS, "scene")
    oversample = sec.getint("oversample", 1)
    shape = (camera.height_px * oversample, camera.half_width * oversample)
    if "depth_map" in sec:
        depth = read_grid(root / sec["depth_map"], scale=sec.getfloat("depth_um_per_level", 1.0))
    else:
        depth = np.zeros(shape)
    vis = None
    if "visibility_map" in sec:
        vis = read_grid(root / sec["visibility_map"],
                        scale=sec.getfloat("visibility_per_level", 1.0))
    scene = SceneModel(depth, vis, sec.getfloat("stage_delay_um", 0.0), oversample)
    scene.check_camera(camera)
    return scene


def _load_plan(sec, seed: Optional[int]) -> ScanPlan:
    _check_keys(sec, _SCAN_KEYS, "scan")
    if "delays_um" in sec:
        raw = sec["delays_um"].strip()
        delays = tuple(float(x) for x in raw.replace(",", " ").split()) if raw else ()
    elif "delay_start_um" in sec:
        delays = tuple(np.linspace(sec.getfloat("delay_start_um"), sec.getfloat("delay_stop_um"),
                                   sec.getint("delay_count")))
    else:
        delays = ()
    s = seed if seed is not None else sec.getint("seed", 0)
    return ScanPlan(delays, sec.getint("frames_per_delay", 1000), s)


# --- grids -----------------------------------------------------------------------

def write_csv_grid(path: PathLike, grid: np.ndarray, quantity: str, unit: str) -> None:
    """Write a 2-D grid as CSV with a ``# quantity=... unit=...`` header line."""
    np.savetxt(path, np.asarray(grid, dtype=float), delimiter=",", fmt="%.10g",
               header=f"quantity={quantity} unit={unit}")


def read_csv_grid(path: PathLike) -> np.ndarray:
    grid = np.loadtxt(path, delimiter=",", ndmin=2)
    return grid


def write_pgm(path: PathLike, grid: np.ndarray, unit: str = "um",
              masks: Optional[Dict[str, np.ndarray]] = None) -> Tuple[float, float]:
    """16-bit binary PGM plus ``<path>.txt`` sidecar with scale, offset and masks.

    NaN cells are written as level 0 and the offset is chosen so that finite
    values occupy levels 1..65535. Returns (unit_per_level, offset).
    """
    g = np.asarray(grid, dtype=float)
    finite = np.isfinite(g)
    lo = float(g[finite].min()) if finite.any() else 0.0
    hi = float(g[finite].max()) if finite.any() else 0.0
    scale = (hi - lo) / 65534.0 if hi > lo else 1.0
    levels = np.zeros(g.shape, np.uint16)
    levels[finite] = np.round((g[finite] - lo) / scale).astype(np.uint16) + 1
    rows, cols = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(levels.astype(">u2").tobytes())
    lines = [f"{unit}_per_level = {scale!r}", f"offset_{unit} = {lo - scale!r}",
             "nan_level = 0"]
    for name, m in (masks or {}).items():
        ys, xs = np.nonzero(m)
        lines.append(f"mask_{name} = " + " ".join(f"{y}:{x}" for y, x in zip(ys, xs)))
    Path(str(path) + ".txt").write_text("\n".join(lines) + "\n")
    return scale, lo - scale


def read_pgm(path: PathLike, scale: float = 1.0, offset: float = 0.0) -> np.ndarray:
    """Read an 8- or 16-bit binary PGM, returning ``offset + scale * level``."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    cols, rows, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    levels = np.frombuffer(data, dtype, rows * cols, pos).reshape(rows, cols)
    return offset + scale * levels.astype(float)


def read_grid(path: PathLike, scale: float = 1.0) -> np.ndarray:
    """CSV grids are taken as-is; PGM levels are multiplied by ``scale``."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path, scale)
    return read_csv_grid(path)


def write_table(path: PathLike, columns: Sequence[str], rows) -> None:
    """CSV table; column names carry units, e.g. ``delay_um``."""
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in row) + "\n")
