import io as _io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from homimaging.model import CameraModel, SceneModel, SourceModel
from homimaging.simulate import (BinaryFrame, Branch, FormatError, FrameHeader, FrameStream,
                                 HEADER_BYTES, anti_bunch_probability, branch_hom, iter_homf,
                                 run_scan, sample_pair_positions, synthesize_frame,
                                 synthesize_stream, transform_halves, transform_stream,
                                 write_homf)
from homimaging.model import ScanPlan


def small_camera(**kw):
    return CameraModel(width_px=16, height_px=8, **kw)


# --- frames and the file format ----------------------------------------------------

def test_header_is_38_bytes():
    assert HEADER_BYTES == 8 + 2 + 2 + 2 + 8 + 8 + 8


@pytest.mark.parametrize("w,h", [(16, 8), (10, 3), (64, 32)])
def test_homf_byte_count(tmp_path, w, h):
    cam = CameraModel(width_px=w, height_px=h)
    s = synthesize_stream(SceneModel.flat(cam), SourceModel(), cam, 100, seed=2)
    path = tmp_path / "f.homf"
    s.write(path)
    assert path.stat().st_size == 38 + 100 * math.ceil(w / 8) * h


def test_homf_round_trip(tmp_path):
    cam = small_camera()
    s = synthesize_stream(SceneModel.flat(cam, 12.5), SourceModel(), cam, 500, seed=9)
    s.write(tmp_path / "a.homf")
    back = FrameStream.read(tmp_path / "a.homf")
    assert back.header == s.header
    assert np.array_equal(back.frames, s.frames)


def test_streaming_writer_matches_whole_stream(tmp_path):
    from homimaging.simulate import iter_frame_blocks
    cam = small_camera()
    scene = SceneModel.flat(cam, 3.0)
    s = synthesize_stream(scene, SourceModel(), cam, 20000, seed=4, delay_index=2)
    write_homf(tmp_path / "b.homf", s.header,
               iter_frame_blocks(scene, SourceModel(), cam, 20000, 4, 2))
    assert (tmp_path / "b.homf").read_bytes() == s.header.pack() + s.frames.tobytes()


def test_streaming_writer_rejects_short_input(tmp_path):
    header = FrameHeader(16, 8, 5, 0, 0.0)
    with pytest.raises(FormatError):
        write_homf(tmp_path / "c.homf", header, [np.zeros((3, 8, 2), np.uint8)])


def test_truncated_file_reports_position(tmp_path):
    cam = small_camera()
    s = synthesize_stream(SceneModel.flat(cam), SourceModel(), cam, 10, seed=1)
    raw = s.header.pack() + s.frames.tobytes()
    with pytest.raises(FormatError, match="byte"):
        list(iter_homf(_io.BytesIO(raw[:-5])))
    with pytest.raises(FormatError):
        list(iter_homf(_io.BytesIO(raw[:20])))


def test_bad_magic_rejected():
    raw = b"XXXX" + FrameHeader(16, 8, 0, 0, 0.0).pack()[4:]
    with pytest.raises(FormatError):
        list(iter_homf(_io.BytesIO(raw)))


def test_binary_frame_padding_is_zero():
    clicks = np.ones((3, 10), bool)
    f = BinaryFrame.from_array(clicks)
    assert f.bits.shape == (3, 2)
    assert np.all(f.bits[:, 1] == 0b11000000)
    assert f.n_clicks == 30
    assert np.array_equal(f.to_array(), clicks)


# --- half-image transform ----------------------------------------------------------

def test_corner_maps_to_opposite_corner():
    w, h = 16, 8
    clicks = np.zeros((h, w), bool)
    clicks[0, w // 2] = True  # half-B local (x=0, y=0)
    out = transform_halves(BinaryFrame.from_array(clicks)).to_array()
    ys, xs = np.nonzero(out)
    assert (xs[0] - w // 2, ys[0]) == (w // 2 - 1, h - 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_transform_is_an_involution_preserving_half_a(hw, h, seed):
    clicks = np.random.default_rng(seed).random((h, 2 * hw)) < 0.3
    f = BinaryFrame.from_array(clicks)
    once = transform_halves(f)
    assert np.array_equal(once.to_array()[:, :hw], clicks[:, :hw])
    assert np.array_equal(transform_halves(once).to_array(), clicks)
    assert once.n_clicks == f.n_clicks


def test_stream_transform_matches_frame_transform():
    cam = small_camera()
    s = synthesize_stream(SceneModel.flat(cam), SourceModel(), cam, 50, seed=3)
    t = transform_stream(s)
    for a, b in zip(s, t):
        assert np.array_equal(transform_halves(a).bits, b.bits)


# --- HOM branching -----------------------------------------------------------------

def test_branch_probabilities():
    src = SourceModel(intrinsic_visibility=1.0)
    assert anti_bunch_probability(0.0, src) == pytest.approx(0.0)
    assert anti_bunch_probability(1e6, src) == pytest.approx(0.5)
    half_max = src.dip_width_um * math.sqrt(2 * math.log(2))
    assert anti_bunch_probability(half_max, src) == pytest.approx(0.25)


def test_branch_hom_frequency():
    src = SourceModel(intrinsic_visibility=1.0)
    rng = np.random.default_rng(0)
    half_max = src.dip_width_um * math.sqrt(2 * math.log(2))
    n = 20000
    anti = sum(branch_hom(half_max, src, 1.0, rng) is Branch.ANTI_BUNCHED for _ in range(n))
    assert abs(anti / n - 0.25) < 5 * math.sqrt(0.25 * 0.75 / n)


# --- pair positions ----------------------------------------------------------------

def test_point_correlation_puts_photons_on_one_pixel():
    cam = CameraModel()
    src = SourceModel(correlation_width_um=0.0)
    p = sample_pair_positions(src, cam, np.random.default_rng(1), 5000)
    assert np.array_equal(p.signal, p.idler)


def test_offset_std_matches_fwhm():
    # 1 um pixels make quantization negligible next to a 63.7 um sigma
    cam = CameraModel(width_px=8000, height_px=4000, pixel_pitch_um=1.0)
    src = SourceModel(correlation_width_um=150.0 / 2.3548, envelope="flat")
    p = sample_pair_positions(src, cam, np.random.default_rng(5), 100000)
    off = (p.signal - p.idler).astype(float)
    sd = off.std(axis=0)
    assert np.all(np.abs(sd / (150.0 / 2.3548) - 1) < 0.02)


def test_unit_ratio_regime():
    assert SourceModel(correlation_width_um=150.0 / 2.3548).pixel_ratio(CameraModel()) \
        == pytest.approx(1.0, rel=1e-4)


# --- frame synthesis ---------------------------------------------------------------

def test_no_pairs_no_dark_gives_empty_frames():
    cam = small_camera(dark_count_rate=0.0)
    s = synthesize_stream(SceneModel.flat(cam), SourceModel(pair_rate_per_frame=0.0), cam, 200)
    assert not s.frames.any()
    f = synthesize_frame(SceneModel.flat(cam), SourceModel(pair_rate_per_frame=0.0), cam,
                         np.random.default_rng(0))
    assert f.n_clicks == 0


def test_dark_click_probability():
    assert CameraModel(dark_count_rate=0.14, exposure_s=10e-6).dark_click_probability \
        == pytest.approx(1.4e-6)


def test_dark_clicks_are_spatially_uniform():
    # 5000 frames x 2048 pixels ~ 10^7 frame-pixels
    cam = CameraModel(dark_count_rate=1000.0)  # 1% per pixel per frame
    s = synthesize_stream(SceneModel.flat(cam), SourceModel(pair_rate_per_frame=0.0), cam,
                          5000, seed=11)
    per_pixel = s.clicks().sum(axis=0).ravel()
    rate = per_pixel.sum() / (5000 * cam.n_pixels)
    assert rate == pytest.approx(0.01, rel=0.02)
    assert stats.chisquare(per_pixel).pvalue > 0.01


def test_lossless_click_rate_band():
    # 7 pairs/frame and no loss give 14 photons per frame minus same-pixel collisions
    cam = CameraModel().lossless()
    s = synthesize_stream(SceneModel.flat(cam, 1000.0), SourceModel(), cam, 100000, seed=1)
    mean = s.clicks().sum() / 100000
    assert 13.5 <= mean <= 14.5


def test_lossless_click_rate_equals_photons_minus_collisions():
    # independent count: draw the same photons and count distinct detector pixels
    from homimaging.simulate import block_rng, _simulate_block
    cam = CameraModel().lossless()
    src = SourceModel(correlation_width_um=0.0, mode_width_um=None)
    scene = SceneModel.flat(cam, 1000.0)
    n = 8192
    bits = _simulate_block(scene, src, cam, n, block_rng(3, 0, 0), (0.0, 0.0))
    clicks = np.unpackbits(bits, axis=-1).sum() / n
    # with point correlation a bunched pair always collides: 14 - 7 * P(bunched) = 10.5
    assert clicks == pytest.approx(14.0 - 3.5, abs=0.15)


def test_stream_is_deterministic_and_block_keyed():
    cam = small_camera()
    a = synthesize_stream(SceneModel.flat(cam), SourceModel(), cam, 9000, seed=7, delay_index=1)
    b = synthesize_stream(SceneModel.flat(cam), SourceModel(), cam, 9000, seed=7, delay_index=1)
    c = synthesize_stream(SceneModel.flat(cam), SourceModel(), cam, 9000, seed=7, delay_index=2)
    assert np.array_equal(a.frames, b.frames)
    assert not np.array_equal(a.frames, c.frames)


def test_run_scan_one_stream_per_delay():
    cam = small_camera()
    plan = ScanPlan((-10.0, 0.0, 10.0), 100, 1)
    streams = run_scan(plan, SceneModel.flat(cam), SourceModel(), cam)
    assert [s.header.stage_delay_um for s in streams] == [-10.0, 0.0, 10.0]
    assert all(len(s) == 100 for s in streams)


def test_detection_efficiency_scales_clicks():
    cam = CameraModel(dark_count_rate=0.0)
    src = SourceModel(envelope="flat", correlation_width_um=0.0)
    s = synthesize_stream(SceneModel.flat(cam, 1000.0), src, cam, 50000, seed=2)
    eta = cam.detection_efficiency
    assert s.clicks().sum() / 50000 == pytest.approx(2 * 7 * eta, rel=0.03)
