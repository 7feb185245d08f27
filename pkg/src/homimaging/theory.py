"""One-dimensional two-mode model of camera-resolved HOM visibility.

The biphoton amplitude is an equal superposition of a symmetric and an
antisymmetric Hermite-Gauss component. Integrating the coincidence density
over the active part of each pixel and summing over pixel pairs gives the
visibility expected for a given ratio of pixel width to correlation width.
Lengths are in micrometres throughout; ``k_p`` is in rad/nm and ``L_c``/``w``
in mm only at the parameter boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .model import FWHM_PER_SIGMA


class QuadratureError(ArithmeticError):
    """Pixel integrals did not reach the requested tolerance."""


@dataclass(frozen=True)
class TheoryParams:
    pump_wavenumber: float = 2.0 * math.pi / 347.0  # rad / nm
    crystal_length: float = 0.5                      # mm
    diffraction_scale: float = 1.0 / 25.0
    pump_width: float = 0.096                         # mm
    pixel_size: float = 150.0                         # um
    array_width: float = 32 * 150.0                   # um
    loss_rate: float = 1.0 - 0.09 * 0.78
    dip_width: float = 20.0                           # um

    def __post_init__(self):
        for name in ("pump_wavenumber", "crystal_length", "diffraction_scale", "pump_width",
                     "pixel_size", "array_width", "dip_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError("loss_rate must be in [0, 1]")

    @property
    def sigma_corr(self) -> float:
        """Correlation width in um."""
        k_p = self.pump_wavenumber * 1e3
        return math.sqrt(self.crystal_length * 1e3 / (self.diffraction_scale ** 2 * k_p))

    @property
    def illumination_width(self) -> float:
        """w / beta in um."""
        return self.pump_width * 1e3 / self.diffraction_scale

    @property
    def ratio(self) -> float:
        """R = pixel size / (2 sqrt(2 ln 2) sigma_corr)."""
        return self.pixel_size / (FWHM_PER_SIGMA * self.sigma_corr)

    @property
    def n_pixels(self) -> int:
        return int(round(self.array_width / self.pixel_size))

    @property
    def normalization(self) -> float:
        """N such that each of psi_+^2 and psi_-^2 integrates to 1/2 over the plane."""
        return math.sqrt(self.diffraction_scale * 1e-3 /
                         (math.sqrt(2.0) * math.pi * self.sigma_corr * self.pump_width))

    def with_ratio(self, ratio: float) -> "TheoryParams":
        """Same illumination area, beta chosen so that ``ratio`` holds."""
        sigma = self.pixel_size / (FWHM_PER_SIGMA * ratio)
        beta = math.sqrt(self.crystal_length * 1e3 / (self.pump_wavenumber * 1e3 * sigma ** 2))
        return self.with_diffraction_scale(beta)

    def with_diffraction_scale(self, beta: float) -> "TheoryParams":
        illum = self.illumination_width
        return replace(self, diffraction_scale=beta, pump_width=illum * beta * 1e-3)


def psi_pm(x1, x2, sign: int, p: TheoryParams):
    """psi_+ (sign=+1) or psi_- (sign=-1) at detector positions x1, x2 (um)."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    s = p.sigma_corr
    u = x1 + x2
    v = x1 - x2
    w_over_beta = p.illumination_width
    env = np.exp(-u * u / (2 * s * s)) * np.exp(-(v / w_over_beta) ** 2)
    return sign * p.normalization * env * (1.0 + sign * math.sqrt(2.0) / s * u)


def _interference(delay: float, p: TheoryParams) -> float:
    return math.exp(-delay * delay / (2.0 * p.dip_width ** 2))


def coincidence_probability(x1, x2, delay: float, p: TheoryParams):
    pp = psi_pm(x1, x2, 1, p)
    pm = psi_pm(x1, x2, -1, p)
    return pp * pp + pm * pm + 2.0 * pp * pm * _interference(delay, p)


def pixel_interval(i: int, p: TheoryParams):
    """Active interval of pixel ``i`` after removing the lost fraction symmetrically."""
    lo = -p.array_width / 2.0 + (i + p.loss_rate / 2.0) * p.pixel_size
    hi = -p.array_width / 2.0 + (i + 1.0 - p.loss_rate / 2.0) * p.pixel_size
    return lo, hi


def _panel_nodes(lo: np.ndarray, hi: np.ndarray, panels: int, order: int):
    """Composite Gauss-Legendre nodes/weights for intervals [lo, hi], shape (n, panels*order)."""
    xg, wg = np.polynomial.legendre.leggauss(order)
    edges = lo[:, None] + (hi - lo)[:, None] * np.linspace(0.0, 1.0, panels + 1)[None, :]
    a, b = edges[:, :-1], edges[:, 1:]
    mid, half = (a + b) / 2.0, (b - a) / 2.0
    x = (mid[:, :, None] + half[:, :, None] * xg).reshape(len(lo), -1)
    w = (half[:, :, None] * wg).reshape(len(lo), -1)
    return x, w


def _pair_matrix(p: TheoryParams, delay: float, rows: np.ndarray, cols: np.ndarray,
                 panels: int, order: int) -> np.ndarray:
    lo_r, hi_r = pixel_interval(rows, p)
    lo_c, hi_c = pixel_interval(cols, p)
    xr, wr = _panel_nodes(np.atleast_1d(lo_r).astype(float), np.atleast_1d(hi_r).astype(float),
                          panels, order)
    xc, wc = _panel_nodes(np.atleast_1d(lo_c).astype(float), np.atleast_1d(hi_c).astype(float),
                          panels, order)
    out = np.empty((len(xr), len(xc)))
    for i in range(len(xr)):
        dens = coincidence_probability(xr[i][None, :, None], xc[:, None, :], delay, p)
        out[i] = np.einsum("jab,a,jb->j", dens, wr[i], wc)
    return out


def pixel_pair_matrix(delay: float, p: TheoryParams, rtol: float = 1e-8, order: int = 8,
                      max_panels: int = 256) -> np.ndarray:
    """P_C^{ij}(delay) for all pixel pairs, refined until halving panels changes < rtol."""
    idx = np.arange(p.n_pixels)
    if p.loss_rate >= 1.0:
        return np.zeros((p.n_pixels, p.n_pixels))
    panels = 1
    prev = _pair_matrix(p, delay, idx, idx, panels, order)
    while panels < max_panels:
        panels *= 2
        cur = _pair_matrix(p, delay, idx, idx, panels, order)
        floor = 1e-300 + 1e-14 * np.max(np.abs(cur))
        if np.max(np.abs(cur - prev) / np.maximum(np.abs(cur), floor)) < rtol:
            return cur
        prev = cur
    raise QuadratureError(f"pixel integrals not converged to {rtol} with {panels} panels")


def pixel_pair_probability(i: int, j: int, delay: float, p: TheoryParams, rtol: float = 1e-8,
                           order: int = 8, max_panels: int = 256) -> float:
    n = p.n_pixels
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"pixel index outside 0..{n - 1}")
    if p.loss_rate >= 1.0:
        return 0.0
    rows, cols = np.array([i]), np.array([j])
    panels = 1
    prev = _pair_matrix(p, delay, rows, cols, panels, order)[0, 0]
    while panels < max_panels:
        panels *= 2
        cur = _pair_matrix(p, delay, rows, cols, panels, order)[0, 0]
        if abs(cur - prev) <= rtol * abs(cur) or cur == prev:
            return float(cur)
        prev = cur
    raise QuadratureError(f"pixel pair ({i}, {j}) not converged to {rtol}")


def total_coincidence(delay: float, p: TheoryParams, **kw) -> float:
    return float(pixel_pair_matrix(delay, p, **kw).sum())


def visibility(p: TheoryParams, far_delay: Optional[float] = None, **kw) -> float:
    """|(P_C(inf) - P_C(0)) / (P_C(inf) + P_C(0))|; infinity is 20 dip widths."""
    far = 20.0 * p.dip_width if far_delay is None else far_delay
    p_inf = total_coincidence(far, p, **kw)
    p_0 = total_coincidence(0.0, p, **kw)
    return abs((p_inf - p_0) / (p_inf + p_0))


def ratio_from_focal_length(f0_mm: float, ref_f0_mm: float = 300.0,
                            ref_ratio: float = 1.0) -> float:
    """R for pump focal length ``f0`` given R at a reference focal length (R ~ f0^2)."""
    return ref_ratio * (f0_mm / ref_f0_mm) ** 2


def focal_length_from_ratio(ratio: float, ref_f0_mm: float = 300.0,
                            ref_ratio: float = 1.0) -> float:
    return ref_f0_mm * math.sqrt(ratio / ref_ratio)


@dataclass(frozen=True)
class CurvePoint:
    ratio: float
    visibility: float
    focal_length_mm: float
    sigma_corr_um: float


def visibility_curve(base: TheoryParams, ratios: Optional[Iterable[float]] = None,
                     diffraction_scales: Optional[Iterable[float]] = None,
                     focal_lengths_mm: Optional[Iterable[float]] = None,
                     **kw) -> List[CurvePoint]:
    """Visibility over a sweep at fixed illumination area ``w / beta``.

    Exactly one of ``ratios``, ``diffraction_scales`` or ``focal_lengths_mm``
    selects the sweep.
    """
    given = [x is not None for x in (ratios, diffraction_scales, focal_lengths_mm)]
    if sum(given) != 1:
        raise ValueError("give exactly one of ratios, diffraction_scales, focal_lengths_mm")
    if diffraction_scales is not None:
        params = [base.with_diffraction_scale(b) for b in diffraction_scales]
    else:
        rs = list(ratios) if ratios is not None else \
            [ratio_from_focal_length(f) for f in focal_lengths_mm]
        params = [base.with_ratio(r) for r in rs]
    out = []
    for p in params:
        out.append(CurvePoint(p.ratio, visibility(p, **kw), focal_length_from_ratio(p.ratio),
                              p.sigma_corr))
    return out
