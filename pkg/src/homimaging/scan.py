"""Delay scans: per-delay coincidence estimators and their dip fits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from .analysis import DipFit, FitError, IllPosedError, fit_bunch_peak, fit_dip
from .jpd import CoincidenceTensor, bunch_map_adjacent, project

ESTIMATORS = ("antibunch", "bunch_peak", "bunch_adjacent")


def estimate(t: CoincidenceTensor) -> Dict[str, float]:
    """Whole-field coincidence estimates (expected pair detections) for one delay.

    ``antibunch`` is the height of the cross-half sum projection at the
    conjugate position; ``bunch_peak`` is the same-half minus projection's
    Gaussian amplitude extrapolated to zero offset; ``bunch_adjacent`` sums the
    nearest-neighbour bunching map.
    """
    n = t.n_frames
    anti = project(t, "sum", pairs="cross").at(0, 0) * n
    peak = fit_bunch_peak(project(t, "minus", pairs="same")) * n
    adj = float(bunch_map_adjacent(t).sum())
    return {"antibunch": anti, "bunch_peak": peak, "bunch_adjacent": adj}


@dataclass
class EstimatorResult:
    name: str
    counts: np.ndarray
    fit: Optional[DipFit]
    error: Optional[str] = None

    @property
    def visibility(self) -> float:
        if self.fit is None:
            # a perfectly flat curve has no dip to fit but zero visibility
            return 0.0 if np.ptp(self.counts) == 0 else float("nan")
        return self.fit.visibility

    @property
    def visibility_se(self) -> float:
        return float("nan") if self.fit is None else self.fit.visibility_se

    @property
    def relative_visibility(self) -> float:
        if self.fit is None:
            return 0.0 if np.ptp(self.counts) == 0 else float("nan")
        return self.fit.relative_visibility


@dataclass
class ScanAnalysis:
    delays_um: np.ndarray
    results: Dict[str, EstimatorResult]

    def __getitem__(self, name: str) -> EstimatorResult:
        return self.results[name]


def analyze_scan(delays_um: Sequence[float], tensors: Iterable[CoincidenceTensor],
                 shared_shape: bool = True) -> ScanAnalysis:
    """Fit a dip to the anti-bunching curve and peaks to both bunching curves.

    A fit failure on one estimator is recorded on its result and does not
    stop the others.
    """
    d = np.asarray(delays_um, dtype=float)
    rows = [estimate(t) for t in tensors]
    if len(rows) != len(d):
        raise ValueError(f"{len(d)} delays but {len(rows)} tensors")
    return analyze_curves(d, {k: np.array([r[k] for r in rows]) for k in ESTIMATORS},
                          shared_shape)


def analyze_curves(delays_um: Sequence[float], curves: Dict[str, np.ndarray],
                   shared_shape: bool = True) -> ScanAnalysis:
    """Fit every curve; ``antibunch`` is a dip, the others are peaks.

    With ``shared_shape`` the bunching peaks reuse the width and centre of the
    anti-bunching dip, which is measured with far better signal to noise and
    comes from the same two-photon interference. If that dip fit fails the
    peaks are fitted freely.
    """
    d = np.asarray(delays_um, dtype=float)
    results = {}
    shape = {}
    names = sorted(curves, key=lambda n: n != "antibunch")
    for name in names:
        counts = np.asarray(curves[name], dtype=float)
        try:
            if name == "antibunch":
                fit = fit_dip(d, counts)
                if shared_shape:
                    shape = {"width": fit.model.width, "center": fit.model.center}
            else:
                fit = fit_dip(d, counts, peak=True, **shape)
            results[name] = EstimatorResult(name, counts, fit)
        except (FitError, IllPosedError) as exc:
            results[name] = EstimatorResult(name, counts, None, str(exc))
    return ScanAnalysis(d, results)
