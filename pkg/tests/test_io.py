import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from homimaging import io
from homimaging.model import GeometryError

CONFIG = """
[camera]
preset = main-text
width_px = 16
height_px = 8
pixel_pitch_um = 150
dark_count_rate_cps = 0.5

[source]
pair_rate_per_frame = 3.5
mode_width_um = none
envelope = flat

[scene]
depth_map = depth.csv
stage_delay_um = 4.5

[scan]
delay_start_um = -40
delay_stop_um = 40
delay_count = 21
frames_per_delay = 1000
seed = 99
"""


def _write(tmp_path, text=CONFIG, depth=None):
    io.write_csv_grid(tmp_path / "depth.csv", np.full((8, 8), 2.0) if depth is None else depth,
                      "depth", "um")
    path = tmp_path / "run.ini"
    path.write_text(text)
    return path


def test_load_full_config(tmp_path):
    cfg = io.load_config(_write(tmp_path))
    assert cfg.camera.width_px == 16 and cfg.camera.fill_factor == 0.80
    assert cfg.camera.dark_count_rate == 0.5
    assert cfg.source.pair_rate_per_frame == 3.5 and cfg.source.mode_width_um is None
    assert np.all(cfg.scene.depth_map == 2.0) and cfg.scene.stage_delay_um == 4.5
    assert len(cfg.plan.delays_um) == 21 and cfg.plan.seed == 99
    assert io.load_config(_write(tmp_path), seed=7).plan.seed == 7


@pytest.mark.parametrize("bad", [
    CONFIG.replace("pixel_pitch_um", "pixel_pitch"),
    CONFIG + "\n[extra]\nx = 1\n",
    CONFIG.replace("preset = main-text", "preset = nonsense"),
    CONFIG.replace("pair_rate_per_frame = 3.5", "pair_rate_per_frame = many"),
    CONFIG.replace("depth.csv", "missing.csv"),
    CONFIG.replace("frames_per_delay = 1000", "frames_per_delay = 0"),
])
def test_bad_configs_rejected(tmp_path, bad):
    with pytest.raises(io.ConfigError):
        io.load_config(_write(tmp_path, bad))


def test_scene_shape_checked(tmp_path):
    with pytest.raises((io.ConfigError, GeometryError)):
        io.load_config(_write(tmp_path, depth=np.zeros((8, 9))))


def test_missing_file():
    with pytest.raises(io.ConfigError):
        io.load_config("/nonexistent/run.ini")


def test_zero_delays(tmp_path):
    text = CONFIG.split("[scan]")[0] + "[scan]\ndelays_um =\nframes_per_delay = 10\n"
    assert io.load_config(_write(tmp_path, text)).plan.delays_um == ()


def test_csv_grid_round_trip(tmp_path):
    g = np.random.default_rng(0).normal(size=(5, 7))
    io.write_csv_grid(tmp_path / "g.csv", g, "depth", "um")
    first = (tmp_path / "g.csv").read_text().splitlines()[0]
    assert first == "# quantity=depth unit=um"
    assert np.allclose(io.read_csv_grid(tmp_path / "g.csv"), g, rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3)))
def test_pgm_round_trip(tmp_path_factory, g):
    path = tmp_path_factory.mktemp("pgm") / "g.pgm"
    scale, offset = io.write_pgm(path, g)
    back = io.read_pgm(path, scale, offset)
    assert np.max(np.abs(back - g)) <= scale / 2 + 1e-9 * (1 + np.abs(g).max())


def test_pgm_nan_and_sidecar(tmp_path):
    g = np.array([[1.0, np.nan], [3.0, 5.0]])
    mask = np.array([[True, False], [False, True]])
    io.write_pgm(tmp_path / "d.pgm", g, unit="um", masks={"inner": mask})
    side = (tmp_path / "d.pgm.txt").read_text()
    assert "um_per_level" in side and "mask_inner = 0:0 1:1" in side
    raw = io.read_pgm(tmp_path / "d.pgm")
    assert raw[0, 1] == 0 and raw.min() == 0 and raw[0, 0] == 1


def test_read_8bit_pgm_with_comment(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n# c\n3 1\n255\n" + bytes([0, 7, 255]))
    assert io.read_grid(tmp_path / "a.pgm", scale=0.5).tolist() == [[0.0, 3.5, 127.5]]
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        io.read_pgm(tmp_path / "b.pgm")


def test_write_table(tmp_path):
    io.write_table(tmp_path / "t.csv", ["delay_um", "counts"], [(1.5, 3), (2.0, 4)])
    assert (tmp_path / "t.csv").read_text() == "delay_um,counts\n1.5,3\n2,4\n"
