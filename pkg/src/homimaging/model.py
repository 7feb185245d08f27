"""Domain types shared by the simulator and the reconstruction code.

Lengths are micrometres unless a field name says otherwise. Depth maps store
the group-delay-equivalent optical path ``(n_g - 1) * t``, so a sample pixel's
depth can be subtracted directly from the interferometer delay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


class GeometryError(ValueError):
    """Image or sensor dimensions are incompatible."""


class BoundsError(IndexError):
    """A pixel coordinate lies outside its grid."""


@dataclass(frozen=True)
class CameraModel:
    width_px: int = 64
    height_px: int = 32
    pixel_pitch_um: float = 150.0
    fill_factor: float = 0.78
    quantum_efficiency: float = 0.09
    dark_count_rate: float = 0.14  # counts / pixel / s
    exposure_s: float = 10e-6
    frame_rate_fps: float = 60e3

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise GeometryError("sensor dimensions must be positive")
        if self.width_px % 2:
            raise GeometryError(f"width_px must be even, got {self.width_px}")
        if not 0.0 < self.fill_factor <= 1.0:
            raise ValueError(f"fill_factor must be in (0, 1], got {self.fill_factor}")
        if not 0.0 < self.quantum_efficiency <= 1.0:
            raise ValueError(f"quantum_efficiency must be in (0, 1], got {self.quantum_efficiency}")
        if self.dark_count_rate < 0:
            raise ValueError("dark_count_rate must be >= 0")
        if self.pixel_pitch_um <= 0 or self.exposure_s <= 0 or self.frame_rate_fps <= 0:
            raise ValueError("pitch, exposure and frame rate must be positive")
        if self.exposure_s * self.frame_rate_fps > 1.0 + 1e-12:
            raise ValueError("exposure_s * frame_rate_fps must not exceed 1")

    @property
    def half_width(self) -> int:
        return self.width_px // 2

    @property
    def half_shape(self) -> Tuple[int, int]:
        """(rows, cols) of one sensor half."""
        return (self.height_px, self.width_px // 2)

    @property
    def n_pixels(self) -> int:
        return self.width_px * self.height_px

    @property
    def detection_efficiency(self) -> float:
        return self.fill_factor * self.quantum_efficiency

    @property
    def dark_click_probability(self) -> float:
        """Per-pixel probability of a dark click within one exposure."""
        return min(1.0, self.dark_count_rate * self.exposure_s)

    def lossless(self) -> "CameraModel":
        return replace(self, fill_factor=1.0, quantum_efficiency=1.0, dark_count_rate=0.0)


# Methods-section figures of the SPC3 camera, and the main-text/conclusions ones.
METHODS_CAMERA = CameraModel()
MAIN_TEXT_CAMERA = CameraModel(fill_factor=0.80, quantum_efficiency=0.06)
CAMERA_PRESETS = {"methods": METHODS_CAMERA, "main-text": MAIN_TEXT_CAMERA}


def loss_rate(camera: CameraModel) -> float:
    """Effective loss rate, one minus fill factor times quantum efficiency."""
    return 1.0 - camera.fill_factor * camera.quantum_efficiency


def correlation_width_from_crystal(crystal_length_mm: float, diffraction_scale: float,
                                   pump_wavelength_nm: float) -> float:
    """sigma_corr = sqrt(L_c / (beta^2 k_p)) in micrometres."""
    k_p = 2.0 * math.pi / (pump_wavelength_nm * 1e-3)  # rad / um
    return math.sqrt(crystal_length_mm * 1e3 / (diffraction_scale ** 2 * k_p))


@dataclass(frozen=True)
class SourceModel:
    """Photon-pair source and interferometer parameters.

    ``correlation_width_um`` is the Gaussian sigma of the signal-idler position
    offset (FWHM is 2.3548 times larger); when ``diffraction_scale`` is given and
    the width is omitted it is derived from the crystal length and pump
    wavenumber. ``mode_width_um`` sets how fast the two photons become
    distinguishable as their detected separation grows (None disables the effect).
    """

    pump_wavelength_nm: float = 347.0
    crystal_length_mm: float = 0.5
    diffraction_scale: Optional[float] = None
    correlation_width_um: Optional[float] = 150.0 / FWHM_PER_SIGMA
    dip_width_um: float = 20.0
    pair_rate_per_frame: float = 7.0
    intrinsic_visibility: float = 0.95
    mode_width_um: Optional[float] = 110.0
    envelope: str = "gaussian"
    envelope_sigma_um: float = 1500.0

    def __post_init__(self):
        if self.pump_wavelength_nm <= 0 or self.crystal_length_mm <= 0:
            raise ValueError("pump wavelength and crystal length must be positive")
        if self.diffraction_scale is not None:
            if self.diffraction_scale <= 0:
                raise ValueError("diffraction_scale must be positive")
            derived = correlation_width_from_crystal(
                self.crystal_length_mm, self.diffraction_scale, self.pump_wavelength_nm)
            if self.correlation_width_um is None:
                object.__setattr__(self, "correlation_width_um", derived)
            elif abs(self.correlation_width_um - derived) > 1e-9 * derived:
                raise ValueError(
                    f"correlation_width_um={self.correlation_width_um} inconsistent with "
                    f"crystal parameters (expected {derived})")
        if self.correlation_width_um is None or self.correlation_width_um < 0:
            raise ValueError("correlation_width_um must be given and >= 0")
        if self.dip_width_um <= 0:
            raise ValueError("dip_width_um must be positive")
        if self.pair_rate_per_frame < 0:
            raise ValueError("pair_rate_per_frame must be >= 0")
        if not 0.0 <= self.intrinsic_visibility <= 1.0:
            raise ValueError("intrinsic_visibility must be in [0, 1]")
        if self.mode_width_um is not None and self.mode_width_um <= 0:
            raise ValueError("mode_width_um must be positive or None")
        if self.envelope not in ("gaussian", "flat"):
            raise ValueError(f"envelope must be 'gaussian' or 'flat', got {self.envelope!r}")
        if self.envelope_sigma_um <= 0:
            raise ValueError("envelope_sigma_um must be positive")

    @classmethod
    def from_crystal(cls, crystal_length_mm: float, diffraction_scale: float,
                     pump_wavelength_nm: float = 347.0, **kwargs) -> "SourceModel":
        return cls(pump_wavelength_nm=pump_wavelength_nm, crystal_length_mm=crystal_length_mm,
                   diffraction_scale=diffraction_scale, correlation_width_um=None, **kwargs)

    @property
    def pump_wavenumber(self) -> float:
        """k_p in rad/nm."""
        return 2.0 * math.pi / self.pump_wavelength_nm

    @property
    def correlation_fwhm_um(self) -> float:
        return self.correlation_width_um * FWHM_PER_SIGMA

    def implied_diffraction_scale(self) -> float:
        """beta that reproduces ``correlation_width_um`` for this crystal and pump."""
        k_p = self.pump_wavenumber * 1e3
        return math.sqrt(self.crystal_length_mm * 1e3 / (k_p * self.correlation_width_um ** 2))

    def pixel_ratio(self, camera: CameraModel) -> float:
        """R, the pixel width over the correlation FWHM."""
        return camera.pixel_pitch_um / self.correlation_fwhm_um


@dataclass(frozen=True)
class SceneModel:
    """Transparent sample in front of one camera half.

    ``depth_map`` has the shape of one sensor half times ``oversample`` along
    both axes; oversampling lets sub-pixel structure be imaged with shifted
    camera positions.
    """

    depth_map: np.ndarray
    visibility_map: Optional[np.ndarray] = None
    stage_delay_um: float = 0.0
    oversample: int = 1

    def __post_init__(self):
        depth = np.array(self.depth_map, dtype=float)
        if depth.ndim != 2:
            raise GeometryError("depth_map must be two-dimensional")
        if not np.all(np.isfinite(depth)):
            raise ValueError("depth_map contains non-finite values")
        depth.setflags(write=False)
        object.__setattr__(self, "depth_map", depth)
        if self.visibility_map is not None:
            vis = np.array(self.visibility_map, dtype=float)
            if vis.shape != depth.shape:
                raise GeometryError("visibility_map shape differs from depth_map")
            if np.any(vis < 0) or np.any(vis > 1) or not np.all(np.isfinite(vis)):
                raise ValueError("visibility_map entries must lie in [0, 1]")
            vis.setflags(write=False)
            object.__setattr__(self, "visibility_map", vis)
        if int(self.oversample) != self.oversample or self.oversample < 1:
            raise ValueError("oversample must be a positive integer")
        if depth.shape[0] % self.oversample or depth.shape[1] % self.oversample:
            raise GeometryError("depth_map shape must be a multiple of oversample")

    @classmethod
    def flat(cls, camera: CameraModel, stage_delay_um: float = 0.0) -> "SceneModel":
        return cls(np.zeros(camera.half_shape), stage_delay_um=stage_delay_um)

    @property
    def shape(self) -> Tuple[int, int]:
        """Scene shape in camera pixels."""
        return (self.depth_map.shape[0] // self.oversample,
                self.depth_map.shape[1] // self.oversample)

    @property
    def visibility(self) -> np.ndarray:
        if self.visibility_map is None:
            return np.ones_like(self.depth_map)
        return self.visibility_map

    def check_camera(self, camera: CameraModel) -> None:
        if self.shape != camera.half_shape:
            raise GeometryError(
                f"scene covers {self.shape} pixels but a camera half is {camera.half_shape}")

    def with_stage_delay(self, stage_delay_um: float) -> "SceneModel":
        return replace(self, stage_delay_um=float(stage_delay_um))


def effective_delay(scene: SceneModel, scene_pixel: Sequence[int]) -> float:
    """Local signal-idler delay at a scene pixel (row, col) on the depth grid.

    Thicker sample moves the local dip centre to larger stage delay.
    """
    row, col = (int(v) for v in scene_pixel)
    rows, cols = scene.depth_map.shape
    if not (0 <= row < rows and 0 <= col < cols):
        raise BoundsError(f"pixel {(row, col)} outside depth map of shape {(rows, cols)}")
    return scene.stage_delay_um - float(scene.depth_map[row, col])


@dataclass(frozen=True)
class ScanPlan:
    delays_um: Tuple[float, ...]
    frames_per_delay: int
    seed: int = 0

    def __post_init__(self):
        delays = tuple(float(d) for d in self.delays_um)
        object.__setattr__(self, "delays_um", delays)
        if self.frames_per_delay <= 0:
            raise ValueError("frames_per_delay must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if len(delays) > 1:
            steps = np.diff(delays)
            if not (np.all(steps > 0) or np.all(steps < 0)):
                raise ValueError("delays must be strictly monotonic")

    @classmethod
    def linear(cls, start_um: float, stop_um: float, n: int, frames_per_delay: int,
               seed: int = 0) -> "ScanPlan":
        return cls(tuple(np.linspace(start_um, stop_um, n)), frames_per_delay, seed)

    def __len__(self) -> int:
        return len(self.delays_um)
