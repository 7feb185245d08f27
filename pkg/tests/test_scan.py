import numpy as np
import pytest

from homimaging.analysis import DipModel
from homimaging.jpd import accumulate_blocks
from homimaging.model import CameraModel, SceneModel, SourceModel
from homimaging.scan import ESTIMATORS, analyze_curves, analyze_scan, estimate
from homimaging.simulate import iter_frame_blocks

DELAYS = np.linspace(-40, 40, 11)


def test_shared_shape_fits():
    anti = DipModel(1000.0, 0.8, 20.0, 2.0)
    peak = DipModel(300.0, 0.5, 20.0, 2.0, peak=True)
    res = analyze_curves(DELAYS, {"antibunch": anti(DELAYS), "bunch_peak": peak(DELAYS),
                                  "bunch_adjacent": peak(DELAYS) / 3})
    assert res["antibunch"].visibility == pytest.approx(anti.contrast, rel=1e-6)
    assert res["bunch_peak"].relative_visibility == pytest.approx(0.5, rel=1e-6)
    assert res["bunch_adjacent"].fit.model.width == res["antibunch"].fit.model.width


def test_flat_scan_has_zero_visibility():
    flat = np.full(DELAYS.size, 100.0)
    res = analyze_curves(DELAYS, {k: flat for k in ESTIMATORS})
    for k in ESTIMATORS:
        assert res[k].visibility == 0.0
        assert res[k].fit is None and res[k].error


def test_failure_does_not_stop_other_estimators():
    anti = DipModel(1000.0, 0.8, 20.0, 0.0)
    res = analyze_curves(DELAYS, {"antibunch": anti(DELAYS), "bunch_peak": np.zeros(DELAYS.size),
                                  "bunch_adjacent": np.arange(DELAYS.size, dtype=float)})
    assert res["antibunch"].fit is not None
    assert res["bunch_peak"].fit is None
    assert np.isnan(res["bunch_peak"].visibility_se)


def test_length_mismatch():
    with pytest.raises(ValueError):
        analyze_scan([0.0, 1.0], [])


def test_lossless_anti_beats_adjacent():
    cam = CameraModel(width_px=16, height_px=16).lossless()
    src = SourceModel(envelope="flat")
    tensors = []
    for k, d in enumerate(DELAYS):
        blocks = iter_frame_blocks(SceneModel.flat(cam, d), src, cam, 40000, 1, k)
        tensors.append(accumulate_blocks(blocks, 16, 16, threads=2, stage_delay_um=d))
    assert set(estimate(tensors[0])) == set(ESTIMATORS)
    res = analyze_scan(DELAYS, tensors)
    assert res["antibunch"].visibility > res["bunch_adjacent"].visibility > 0
