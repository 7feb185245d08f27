import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homimaging.analysis import (DipModel, Edge, EstimationError, FitError, IllPosedError,
                                 PixelDips, combine_channels, decimate, fit_dip,
                                 fit_pixel_dips, invert_depth, michelson_contrast, noise_ratio, raster_superresolve,
                                 region_variance)
from homimaging.model import GeometryError

DELAYS = np.linspace(-40, 40, 21)


# --- dip model and fit -------------------------------------------------------------

def test_contrast_definition():
    m = DipModel(100.0, 0.5, 20.0, 0.0)
    # C_inf = 100, C_0 = 50
    assert m.contrast == pytest.approx(50 / 150)
    p = DipModel(100.0, 0.5, 20.0, 0.0, peak=True)
    assert p.contrast == pytest.approx(50 / 250)
    assert DipModel(100.0, 1.0, 20.0, 0.0).contrast == pytest.approx(1.0)


def test_model_validation():
    with pytest.raises(ValueError):
        DipModel(-1.0, 0.5, 20.0, 0.0)
    with pytest.raises(ValueError):
        DipModel(1.0, 1.5, 20.0, 0.0)
    DipModel(1.0, 1.5, 20.0, 0.0, peak=True)


@pytest.mark.parametrize("truth", [DipModel(1000.0, 0.88, 20.0, 3.0),
                                   DipModel(50.0, 0.3, 12.0, -7.0),
                                   DipModel(400.0, 0.6, 15.0, 1.0, peak=True)])
def test_noise_free_round_trip(truth):
    fit = fit_dip(DELAYS, truth(DELAYS), peak=truth.peak)
    m = fit.model
    assert m.baseline == pytest.approx(truth.baseline, rel=1e-7)
    assert m.visibility == pytest.approx(truth.visibility, rel=1e-7)
    assert m.width == pytest.approx(truth.width, rel=1e-7)
    assert m.center == pytest.approx(truth.center, abs=1e-6)
    assert fit.visibility == pytest.approx(truth.contrast, rel=1e-7)
    assert np.max(np.abs(fit.residuals)) < 1e-6 * truth.baseline


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 0.95), st.floats(10, 25), st.floats(-10, 10), st.floats(1e-3, 1e6))
def test_fit_is_scale_invariant(v, width, centre, scale):
    truth = DipModel(200.0, v, width, centre)
    rng = np.random.default_rng(1)
    counts = truth(DELAYS) + rng.normal(0, 2.0, DELAYS.size)
    a = fit_dip(DELAYS, counts).model
    b = fit_dip(DELAYS, counts * scale).model
    assert b.visibility == pytest.approx(a.visibility, rel=1e-5, abs=1e-8)
    assert b.width == pytest.approx(a.width, rel=1e-5)
    assert b.center == pytest.approx(a.center, abs=1e-4)
    assert b.baseline == pytest.approx(a.baseline * scale, rel=1e-5)


def test_fit_with_noise_covers_truth():
    truth = DipModel(1e4, 0.88, 20.0, 0.0)
    rng = np.random.default_rng(4)
    hits = 0
    for _ in range(100):
        counts = rng.poisson(truth(DELAYS)).astype(float)
        fit = fit_dip(DELAYS, counts)
        hits += abs(fit.relative_visibility - truth.visibility) < 2 * fit.relative_visibility_se
    # about 95% of 2-sigma intervals cover the truth
    assert hits >= 88


def test_visibility_se_propagation():
    truth = DipModel(1e4, 0.6, 20.0, 0.0)
    counts = np.random.default_rng(2).poisson(truth(DELAYS)).astype(float)
    fit = fit_dip(DELAYS, counts)
    v, se = fit.relative_visibility, fit.relative_visibility_se
    h = 1e-6
    dcdv = (v + h) / (2 - v - h) - (v - h) / (2 - v + h)
    assert fit.visibility_se == pytest.approx(se * dcdv / (2 * h), rel=1e-5)


def test_fixed_shape_fit():
    truth = DipModel(300.0, 0.4, 18.0, 2.0, peak=True)
    fit = fit_dip(DELAYS, truth(DELAYS), peak=True, width=18.0, center=2.0)
    assert fit.model.visibility == pytest.approx(0.4, rel=1e-8)
    assert fit.stderr[2] == 0 and fit.stderr[3] == 0


def test_ill_posed_scans():
    with pytest.raises(IllPosedError):
        fit_dip(DELAYS[:4], np.arange(4.0))
    with pytest.raises(IllPosedError):
        fit_dip(DELAYS, np.full(DELAYS.size, 5.0))
    one_sided = DipModel(100.0, 0.8, 10.0, -60.0)
    with pytest.raises(IllPosedError):
        fit_dip(DELAYS, one_sided(DELAYS))


def test_fit_error_type_exists():
    assert issubclass(FitError, Exception)


# --- depth inversion ---------------------------------------------------------------

DIP = DipModel(1000.0, 0.8, 20.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-12.0, 12.0))
def test_inversion_recovers_forward_model(depth):
    op = 25.0  # rising edge, depth shifts the local delay to op - depth
    counts = DIP(np.array([[op - depth]]))
    out = invert_depth(counts, DIP, op, Edge.RISING)
    assert out.depth[0, 0] == pytest.approx(depth, abs=1e-8)
    assert out.stderr[0, 0] > 0


def test_falling_edge_and_validation():
    op = -25.0
    counts = DIP(np.array([[op - 5.0]]))
    assert invert_depth(counts, DIP, op, Edge.FALLING).depth[0, 0] == pytest.approx(5.0)
    with pytest.raises(ValueError):
        invert_depth(counts, DIP, op, Edge.RISING)
    with pytest.raises(ValueError):
        invert_depth(counts, DIP, 100.0, Edge.RISING)
    with pytest.raises(ValueError):
        invert_depth(counts, DipModel(1.0, 0.5, 20.0, 0.0, peak=True), 10.0, Edge.RISING)


def test_out_of_range_counts_are_masked():
    img = np.array([[1000.0, 1500.0, 100.0, 900.0]])
    out = invert_depth(img, DIP, 20.0, Edge.RISING)
    assert list(out.valid[0]) == [False, False, False, True]


def test_flat_scene_gives_constant_depth():
    img = np.full((8, 8), DIP(20.0))
    d = invert_depth(img, DIP, 20.0, Edge.RISING).depth
    assert np.allclose(d, 0.0, atol=1e-9)


def test_per_pixel_dips_follow_local_calibration():
    # two pixels with different dip centres; a global dip would bias one of them
    truths = [DipModel(1000.0, 0.8, 20.0, -3.0), DipModel(800.0, 0.7, 18.0, 4.0)]
    stack = np.stack([[[t(d) for t in truths]] for d in DELAYS])
    dips = fit_pixel_dips(DELAYS, stack)
    assert np.allclose(dips.center[0], [-3.0, 4.0], atol=1e-6)
    op, depth = 25.0, 6.0
    img = np.array([[t(op - depth) for t in truths]])
    out = invert_depth(img, dips, op, Edge.RISING)
    assert np.allclose(out.depth, depth, atol=1e-6)


def test_per_pixel_dips_mask_instead_of_raising():
    nan = np.nan
    dips = PixelDips(np.array([[1000.0, 1000.0, nan]]), np.array([[0.8, 0.8, nan]]),
                     np.array([[20.0, 20.0, nan]]), np.array([[0.0, 40.0, nan]]))
    img = np.full((1, 3), DIP(20.0))
    out = invert_depth(img, dips, 20.0, Edge.RISING)
    # second pixel: operating delay on the wrong edge; third: no fit
    assert list(out.valid[0]) == [True, False, False]
    with pytest.raises(GeometryError):
        invert_depth(np.zeros((2, 3)), dips, 20.0, Edge.RISING)


def test_fit_pixel_dips_marks_unfittable_pixels():
    stack = np.ones((DELAYS.size, 1, 2))
    stack[:, 0, 0] = DIP(DELAYS)
    dips = fit_pixel_dips(DELAYS, stack)
    assert np.isfinite(dips.visibility[0, 0]) and np.isnan(dips.visibility[0, 1])
    with pytest.raises(GeometryError):
        fit_pixel_dips(DELAYS[:3], stack)


# --- channel combination -----------------------------------------------------------

def _channels(rng, sig_a=3.0, sig_b=2.0, shape=(20, 20)):
    truth = np.zeros(shape)
    truth[5:15, 5:15] = 10.0
    a = 100 - truth + rng.normal(0, sig_a, shape)
    b = 50 + 0.5 * truth + rng.normal(0, sig_b, shape)  # contrast-reversed, other scale
    inner = np.zeros(shape, bool)
    inner[5:15, 5:15] = True
    return a, b, [inner, ~inner]


def test_combination_weights_and_gain():
    a, b, masks = _channels(np.random.default_rng(0))
    c = combine_channels(a, b, masks, details=True)
    assert sum(c.weights) == pytest.approx(1.0)
    assert c.bunch_scale == pytest.approx(2.0, rel=0.1)
    # b rescaled has sigma 4 against a's 3: weights 16:9
    assert c.weights[0] == pytest.approx(16 / 25, abs=0.05)
    va = region_variance(a, masks[0])
    vc = region_variance(c.image, masks[0])
    assert va / vc == pytest.approx(25 / 16, rel=0.2)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 5.0), st.floats(0.5, 5.0), st.integers(0, 10 ** 6))
def test_combination_never_worse_than_best_channel(sa, sb, seed):
    a, b, masks = _channels(np.random.default_rng(seed), sa, sb)
    c = combine_channels(a, b, masks, details=True)
    bs = c.bunch_scale * (-b) + c.bunch_offset
    best = min(region_variance(a, masks[1]), region_variance(bs, masks[1]))
    vc = region_variance(c.image, masks[1])
    n = masks[1].sum()
    # 5 sigma on the sample variance
    assert vc <= best * (1 + 5 * math.sqrt(2 / (n - 1)))


def test_combination_errors():
    a = np.zeros((4, 4))
    with pytest.raises(GeometryError):
        combine_channels(a, np.zeros((3, 4)), [a > -1])
    with pytest.raises(EstimationError):
        combine_channels(a, a, [a > 1])
    with pytest.raises(EstimationError):
        combine_channels(a, a, [a > -1])  # zero noise


def test_combination_returns_plain_image_by_default():
    a, b, masks = _channels(np.random.default_rng(3))
    assert combine_channels(a, b, masks).shape == a.shape


# --- noise ratio -------------------------------------------------------------------

def test_poisson_noise_ratio_one():
    rng = np.random.default_rng(0)
    mask = np.ones((10, 20), bool)
    assert noise_ratio(rng.poisson(500.0, (10, 20)), mask) == pytest.approx(1.0, abs=0.05)
    mean = np.mean([noise_ratio(rng.poisson(500.0, (10, 20)), mask) for _ in range(200)])
    assert mean == pytest.approx(1.0, abs=0.01)


def test_noise_ratio_errors():
    with pytest.raises(EstimationError):
        noise_ratio(np.ones((2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(EstimationError):
        noise_ratio(-np.ones((2, 2)), np.ones((2, 2), bool))


# --- raster ------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10 ** 6))
def test_decimate_inverts_superresolve(h, w, seed):
    rng = np.random.default_rng(seed)
    imgs = [[rng.random((h, w)) for _ in range(2)] for _ in range(2)]
    back = decimate(raster_superresolve(imgs))
    for a in range(2):
        for b in range(2):
            assert np.array_equal(back[a][b], imgs[a][b])


def test_superresolve_placement():
    imgs = [[np.full((1, 1), 10 * a + b) for b in range(2)] for a in range(2)]
    assert raster_superresolve(imgs).tolist() == [[0, 1], [10, 11]]
    with pytest.raises(GeometryError):
        raster_superresolve([[np.zeros((1, 1)), np.zeros((1, 2))], [np.zeros((1, 1))] * 2])
    with pytest.raises(ValueError):
        raster_superresolve(imgs, shift=0.25)
    with pytest.raises(GeometryError):
        decimate(np.zeros((3, 4)))


def test_michelson():
    assert michelson_contrast(np.array([1.0, 3.0])) == pytest.approx(0.5)
    assert michelson_contrast(np.array([2.0, 2.0])) == 0.0
