"""Dip fitting, depth inversion, channel combination and raster super-resolution."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares

from .jpd import Projection
from .model import GeometryError


class FitError(RuntimeError):
    """A least-squares fit failed; ``residuals`` holds the last residual vector."""

    def __init__(self, message: str, residuals: Optional[np.ndarray] = None):
        super().__init__(message)
        self.residuals = residuals


class IllPosedError(ValueError):
    """The data cannot identify the requested parameters."""


class EstimationError(ValueError):
    """Noise or weights cannot be estimated from the supplied regions."""


class Edge(enum.Enum):
    RISING = 1   # delay above the dip centre
    FALLING = -1


@dataclass(frozen=True)
class DipModel:
    """C(d) = baseline * (1 -/+ visibility * exp(-(d - center)^2 / (2 width^2))).

    Dips subtract the Gaussian, peaks (``peak=True``) add it. ``visibility`` is
    the depth of the feature relative to the far-from-dip baseline.
    """

    baseline: float
    visibility: float
    width: float
    center: float
    peak: bool = False

    def __post_init__(self):
        if self.baseline <= 0:
            raise ValueError("baseline must be positive")
        if self.width <= 0:
            raise ValueError("width must be positive")
        if self.visibility < 0 or (not self.peak and self.visibility > 1):
            raise ValueError(f"visibility {self.visibility} out of range")

    @property
    def sign(self) -> float:
        return 1.0 if self.peak else -1.0

    def __call__(self, delay) -> np.ndarray:
        d = np.asarray(delay, dtype=float)
        g = np.exp(-(d - self.center) ** 2 / (2.0 * self.width ** 2))
        return self.baseline * (1.0 + self.sign * self.visibility * g)

    @property
    def contrast(self) -> float:
        """|(C_inf - C_0) / (C_inf + C_0)|."""
        c_inf = self.baseline
        c_0 = float(self(self.center))
        return abs((c_inf - c_0) / (c_inf + c_0))


@dataclass(frozen=True)
class DipFit:
    model: DipModel
    stderr: Tuple[float, float, float, float]  # baseline, visibility, width, center
    residuals: np.ndarray
    delays: np.ndarray
    counts: np.ndarray

    @property
    def visibility(self) -> float:
        """|(C_inf - C_0) / (C_inf + C_0)| of the fitted curve."""
        return self.model.contrast

    @property
    def visibility_se(self) -> float:
        v = self.model.visibility
        return 2.0 * self.stderr[1] / (2.0 + self.model.sign * v) ** 2

    @property
    def relative_visibility(self) -> float:
        """Feature depth relative to the baseline, the model's ``visibility``."""
        return self.model.visibility

    @property
    def relative_visibility_se(self) -> float:
        return self.stderr[1]


def _dip_residuals(p, d, c, sign, w):
    b, v, s, x0 = p
    g = np.exp(-(d - x0) ** 2 / (2 * s * s))
    return (b * (1 + sign * v * g) - c) * w


def _dip_jacobian(p, d, c, sign, w):
    b, v, s, x0 = p
    u = d - x0
    g = np.exp(-u * u / (2 * s * s))
    jb = 1 + sign * v * g
    jv = b * sign * g
    js = b * sign * v * g * u * u / s ** 3
    jx = b * sign * v * g * u / (s * s)
    return np.column_stack([jb, jv, js, jx]) * w[:, None]


def fit_dip(delays: Sequence[float], counts: Sequence[float],
            sigma: Optional[Sequence[float]] = None, peak: bool = False,
            width: Optional[float] = None, center: Optional[float] = None) -> DipFit:
    """Least-squares fit of a Gaussian dip (or peak) to a delay scan.

    ``width`` and ``center`` may be held fixed, e.g. at the values of a
    better-determined curve from the same interference; fixed parameters get a
    zero standard error. Standard errors come from the Jacobian at the
    optimum; without ``sigma`` they are scaled by the residual variance.
    """
    d = np.asarray(delays, dtype=float)
    c = np.asarray(counts, dtype=float)
    if d.shape != c.shape or d.ndim != 1:
        raise ValueError("delays and counts must be 1-D and of equal length")
    if len(d) < 5:
        raise IllPosedError(f"need at least 5 scan points, got {len(d)}")
    if width is not None and width <= 0:
        raise ValueError("fixed width must be positive")
    order = np.argsort(d)
    d, c = d[order], c[order]
    w = np.ones_like(c) if sigma is None else 1.0 / np.asarray(sigma, float)[order]
    if np.ptp(c) == 0:
        raise IllPosedError("flat scan: visibility is zero and the centre is unidentifiable")
    ext = int(np.argmax(c) if peak else np.argmin(c))
    if center is None and ext in (0, len(c) - 1):
        raise IllPosedError("scan does not bracket the extremum; cover both sides of the dip")
    sign = 1.0 if peak else -1.0
    free = np.array([True, True, width is None, center is None])
    fixed = np.array([0.0, 0.0, width or 0.0, center if center is not None else 0.0])

    def full(q):
        p = fixed.copy()
        p[free] = q
        return p

    def resid(q):
        return _dip_residuals(full(q), d, c, sign, w)

    def jac(q):
        return _dip_jacobian(full(q), d, c, sign, w)[:, free]

    span = d[-1] - d[0]
    far = np.concatenate([c[:2], c[-2:]])
    b0 = float(np.median(far))
    if b0 <= 0:
        b0 = float(np.max(np.abs(c)))
    v0 = float(np.clip(abs(c[ext] - b0) / b0, 0.05, 0.95))
    lower = np.array([0.0, 0.0, span * 1e-3, d[0]])[free]
    upper = np.array([np.inf, np.inf if peak else 1.0, span * 10, d[-1]])[free]
    best = None
    centres = [center] if center is not None else \
        np.unique(np.clip(d[max(ext - 2, 0):ext + 3], d[0], d[-1]))
    widths = [width] if width is not None else (span / 8, span / 4)
    for x0 in centres:
        for s0 in widths:
            q0 = np.clip(np.array([b0, v0, s0, x0])[free], lower + 1e-12, upper - 1e-12)
            try:
                res = least_squares(resid, q0, jac=jac, bounds=(lower, upper), xtol=1e-15,
                                    ftol=1e-15, gtol=1e-15, max_nfev=2000, x_scale="jac")
            except ValueError as exc:
                raise FitError(f"dip fit failed: {exc}") from exc
            if best is None or res.cost < best.cost:
                best = res
    if best is None or not best.success:
        raise FitError("dip fit did not converge",
                       None if best is None else best.fun / w)
    b, v, s, x0 = full(best.x)
    if b <= 0:
        raise FitError("fitted baseline is not positive", best.fun / w)
    jtj = best.jac.T @ best.jac
    try:
        cov = np.linalg.inv(jtj)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(jtj)
    if sigma is None:
        dof = max(len(c) - int(free.sum()), 1)
        cov = cov * (2.0 * best.cost / dof)
    var = np.zeros(4)
    var[free] = np.clip(np.diag(cov), 0, None)
    se = tuple(float(x) for x in np.sqrt(var))
    model = DipModel(float(b), float(v), float(s), float(x0), peak=peak)
    inv = np.argsort(order)
    return DipFit(model, se, (c - model(d))[inv], d[inv], c[inv])


def fit_bunch_peak(minus_projection: Projection, window: int = 3) -> float:
    """Central amplitude of a 2-D Gaussian fitted to the minus projection.

    The zero-offset bin is excluded from the fit (same-pixel pairs give one
    click); the fitted Gaussian is evaluated there instead.
    """
    proj = minus_projection
    cy, cx = proj.center
    ys, xs = np.mgrid[-window:window + 1, -window:window + 1]
    vals = proj.values[cy - window:cy + window + 1, cx - window:cx + window + 1]
    ok = proj.valid[cy - window:cy + window + 1, cx - window:cx + window + 1].copy()
    ok[window, window] = False
    r2, y = (ys * ys + xs * xs)[ok].astype(float), vals[ok]
    if not np.any(y):
        return 0.0

    def resid(p):
        return p[0] * np.exp(-r2 / (2.0 * p[1] ** 2)) - y

    def jac(p):
        e = np.exp(-r2 / (2.0 * p[1] ** 2))
        return np.column_stack([e, p[0] * e * r2 / p[1] ** 3])

    near = y[r2 == 1.0]
    a0 = float(np.mean(near)) * math.e ** 0.5 if near.size else float(np.max(y))
    res = least_squares(resid, [a0, 1.0], jac=jac, bounds=([-np.inf, 0.05], [np.inf, 10.0 * window]),
                        xtol=1e-14, ftol=1e-14, gtol=1e-14)
    if not res.success or not np.all(np.isfinite(res.x)):
        raise FitError("bunching peak fit failed", res.fun)
    return float(res.x[0])


# --- depth ---------------------------------------------------------------------

@dataclass(frozen=True)
class DepthImage:
    depth: np.ndarray   # um, NaN where inversion failed
    stderr: np.ndarray  # um, NaN where inversion failed

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)


@dataclass(frozen=True)
class PixelDips:
    """Per-pixel dip parameters; NaN where the pixel's scan could not be fitted."""
    baseline: np.ndarray
    visibility: np.ndarray
    width: np.ndarray
    center: np.ndarray


def fit_pixel_dips(delays: Sequence[float], stack: np.ndarray) -> PixelDips:
    """Fit a dip to every pixel of a (delays, rows, cols) stack of images."""
    d = np.asarray(delays, dtype=float)
    s = np.asarray(stack, dtype=float)
    if s.ndim != 3 or s.shape[0] != d.size:
        raise GeometryError("stack must be (n_delays, rows, cols) matching the delays")
    out = np.full((4,) + s.shape[1:], np.nan)
    for idx in np.ndindex(*s.shape[1:]):
        try:
            m = fit_dip(d, s[(slice(None),) + idx]).model
        except (FitError, IllPosedError, ValueError):
            continue
        out[(slice(None),) + idx] = m.baseline, m.visibility, m.width, m.center
    return PixelDips(*out)


def invert_depth(coincidence_image: np.ndarray, dip, operating_delay: float,
                 edge: Edge, count_stderr: Optional[np.ndarray] = None) -> DepthImage:
    """Depth per pixel from coincidence counts at one stage delay.

    Counts are mapped back through the dip on the declared edge; pixels whose
    counts fall outside the open interval between dip bottom and baseline are
    masked. Without ``count_stderr`` the count error is taken as Poisson.

    ``dip`` is one DipModel for the whole image, or PixelDips from
    ``fit_pixel_dips``. A global dip that violates the edge precondition
    raises; with per-pixel dips the offending pixels are masked instead.
    """
    edge = Edge(edge)
    c = np.asarray(coincidence_image, dtype=float)
    if isinstance(dip, PixelDips):
        b, v, width, center = (np.asarray(a, float) for a in
                               (dip.baseline, dip.visibility, dip.width, dip.center))
        if b.shape != c.shape:
            raise GeometryError(f"per-pixel dips {b.shape} do not match image {c.shape}")
        offset = operating_delay - center
        with np.errstate(invalid="ignore"):
            usable = ((v > 0) & (b > 0) & (np.abs(offset) <= 2.0 * width)
                      & (np.sign(offset) == edge.value))
    else:
        if dip.peak:
            raise ValueError("depth inversion needs a dip model")
        if dip.visibility <= 0:
            raise IllPosedError("zero visibility: counts carry no delay information")
        offset = operating_delay - dip.center
        if abs(offset) > 2.0 * dip.width:
            raise ValueError(f"operating delay {operating_delay} is more than two dip widths "
                             f"from the centre {dip.center}")
        if offset == 0 or np.sign(offset) != edge.value:
            raise ValueError(f"operating delay {operating_delay} is not on the "
                             f"{edge.name.lower()} edge of a dip centred at {dip.center}")
        b, v, width, center = dip.baseline, dip.visibility, dip.width, dip.center
        usable = True

    with np.errstate(divide="ignore", invalid="ignore"):
        x = (b - c) / (b * v)
        ok = usable & (c > b * (1.0 - v)) & (c < b)
    xs = np.where(ok, x, 0.5)
    ws = np.where(ok, width, 1.0)
    excursion = ws * np.sqrt(-2.0 * np.log(xs))
    delta = np.where(ok, center, 0.0) + edge.value * excursion
    depth = np.where(ok, operating_delay - delta, np.nan)

    se_c = np.sqrt(np.clip(c, 0, None)) if count_stderr is None else np.asarray(count_stderr, float)
    slope = np.where(ok, b * v, 0.0) * xs * excursion / ws ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.where(ok & (slope > 0), se_c / slope, np.nan)
    return DepthImage(depth, se)


# --- channel combination -------------------------------------------------------

def _pooled_std(img: np.ndarray, masks: Sequence[np.ndarray]) -> float:
    resid = np.concatenate([img[m] - img[m].mean() for m in masks])
    dof = resid.size - len(masks)
    if dof <= 0:
        raise EstimationError("masked regions too small to estimate noise")
    return float(np.sqrt(np.sum(resid ** 2) / dof))


@dataclass(frozen=True)
class Combination:
    image: np.ndarray
    weights: Tuple[float, float]
    sigmas: Tuple[float, float]
    bunch_scale: float
    bunch_offset: float


def combine_channels(antibunch: np.ndarray, bunch: np.ndarray, masks: Sequence[np.ndarray],
                     details: bool = False):
    """Inverse-variance combination of anti-bunching and bunching images.

    The bunching image is contrast-reversed and mapped affinely onto the
    anti-bunching scale using the mean of each masked region of constant
    signal (offset only when a single region is given). Each channel's noise is
    the pooled within-region standard deviation.
    """
    a = np.asarray(antibunch, dtype=float)
    b = np.asarray(bunch, dtype=float)
    if a.shape != b.shape:
        raise GeometryError(f"channel shapes differ: {a.shape} vs {b.shape}")
    masks = [np.asarray(m, bool) for m in masks]
    if not masks or any(m.shape != a.shape for m in masks):
        raise EstimationError("need at least one mask of the image shape")
    if any(not m.any() for m in masks):
        raise EstimationError("empty mask")
    mean_a = np.array([a[m].mean() for m in masks])
    mean_b = np.array([-b[m].mean() for m in masks])
    if len(masks) >= 2 and np.ptp(mean_b) > 0:
        design = np.column_stack([mean_b, np.ones_like(mean_b)])
        (scale, offset), *_ = np.linalg.lstsq(design, mean_a, rcond=None)
    else:
        scale, offset = 1.0, float(mean_a[0] - mean_b[0])
    b_scaled = scale * (-b) + offset
    sig = (_pooled_std(a, masks), _pooled_std(b_scaled, masks))
    if min(sig) == 0 or not all(np.isfinite(sig)):
        raise EstimationError(f"degenerate channel noise estimates {sig}")
    w = np.array([1.0 / s ** 2 for s in sig])
    w = w / w.sum()
    out = w[0] * a + w[1] * b_scaled
    if details:
        return Combination(out, (float(w[0]), float(w[1])), sig, float(scale), float(offset))
    return out


def noise_ratio(image: np.ndarray, mask: np.ndarray) -> float:
    """Standard deviation over square root of mean, within ``mask``."""
    vals = np.asarray(image, dtype=float)[np.asarray(mask, bool)]
    if vals.size == 0:
        raise EstimationError("empty mask")
    mean = vals.mean()
    if mean <= 0:
        raise EstimationError("mean count must be positive")
    return float(vals.std(ddof=1 if vals.size > 1 else 0) / math.sqrt(mean))


def region_variance(image: np.ndarray, mask: np.ndarray) -> float:
    vals = np.asarray(image, dtype=float)[np.asarray(mask, bool)]
    if vals.size < 2:
        raise EstimationError("need at least two pixels")
    return float(vals.var(ddof=1))


# --- raster super-resolution ---------------------------------------------------

def raster_superresolve(four_images, shift: float = 0.5) -> np.ndarray:
    """Interleave a 2x2 raster of half-pixel-shifted images.

    ``four_images[a][b]`` is the image taken with the camera moved by
    ``a * shift`` pixels along rows and ``b * shift`` along columns; it lands
    at output positions (2i + a, 2j + b).
    """
    if shift != 0.5:
        raise ValueError("only half-pixel raster steps are supported")
    imgs = [[np.asarray(four_images[a][b], dtype=float) for b in range(2)] for a in range(2)]
    shape = imgs[0][0].shape
    if any(im.shape != shape for row in imgs for im in row):
        raise GeometryError("raster images differ in shape")
    out = np.empty((2 * shape[0], 2 * shape[1]))
    for a in range(2):
        for b in range(2):
            out[a::2, b::2] = imgs[a][b]
    return out


def decimate(image: np.ndarray):
    """Inverse of ``raster_superresolve``: the 2x2 grid of sub-sampled images."""
    img = np.asarray(image)
    if img.shape[0] % 2 or img.shape[1] % 2:
        raise GeometryError("super-resolved image must have even dimensions")
    return [[img[a::2, b::2] for b in range(2)] for a in range(2)]


def michelson_contrast(values: np.ndarray) -> float:
    v = np.asarray(values, dtype=float)
    hi, lo = v.max(), v.min()
    return float((hi - lo) / (hi + lo)) if hi + lo != 0 else 0.0
