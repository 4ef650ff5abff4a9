import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from stereohsi import phantom as ph
from stereohsi import preprocess as pp
from stereohsi.core import CLASSES, BandSet, CubeKind, Hypercube
from stereohsi.errors import CalibrationError, ValidationError


def _frame(raw, camera=ph.Camera.A, layout=None):
    n = camera.period
    return ph.MosaicFrame(raw, ph.default_layout(n) if layout is None else layout, camera)


def _cube(data, kind=CubeKind.RAW):
    data = np.asarray(data, dtype=np.float32)
    return Hypercube(data, BandSet(np.linspace(400, 700, data.shape[2])), kind)


def test_interpolation_matrix_rows():
    w = pp.interpolation_matrix(10, 1, 4)     # samples at 1, 5, 9
    assert w.shape == (10, 3)
    np.testing.assert_allclose(w.sum(1), 1.0)
    assert np.array_equal(w[[1, 5, 9]], np.eye(3))
    assert np.array_equal(w[0], [1, 0, 0])    # clamped before the first sample
    np.testing.assert_allclose(w[3], [0.5, 0.5, 0])


@pytest.mark.parametrize("camera", list(ph.Camera))
def test_constant_frame(camera):
    n = camera.period
    cube = pp.demosaic(_frame(np.full((4 * n, 3 * n), 0.37), camera))
    assert cube.data.shape == (4 * n, 3 * n, n * n)
    assert np.all(cube.data == np.float32(0.37))
    assert cube.bands == camera.bands() and cube.kind == CubeKind.RAW


@pytest.mark.parametrize("camera", list(ph.Camera))
def test_affine_fields_recovered_in_interior(camera):
    n = camera.period
    rng = np.random.default_rng(int(camera) + 10)
    h, w = 6 * n, 7 * n
    a, b, c = rng.uniform(0, 0.004, n * n), rng.uniform(0, 0.004, n * n), rng.uniform(0.1, 0.3, n * n)
    yy, xx = np.mgrid[0:h, 0:w]
    band = np.tile(ph.default_layout(n), (6, 7))
    raw = a[band] * xx + b[band] * yy + c[band]
    cube = pp.demosaic(_frame(raw, camera))
    inner = (slice(n, h - n), slice(n, w - n))
    for k in range(n * n):
        expected = a[k] * xx + b[k] * yy + c[k]
        np.testing.assert_allclose(cube.data[inner + (k,)], expected[inner], atol=2e-6)


@given(st.integers(0, 10 ** 6), st.sampled_from(list(ph.Camera)))
def test_native_samples_pass_through(seed, camera):
    n = camera.period
    rng = np.random.default_rng(seed)
    layout = rng.permutation(n * n).reshape(n, n)
    raw = rng.random((2 * n, 3 * n)).astype(np.float32)
    frame = _frame(raw, camera, layout)
    cube = pp.demosaic(frame)
    bmap = frame.band_index_map()
    yy, xx = np.mgrid[0:2 * n, 0:3 * n]
    assert np.array_equal(cube.data[yy, xx, bmap], raw)


def test_calibration_definitions():
    white = _cube(np.full((3, 3, 2), 0.9))
    dark = _cube(np.full((3, 3, 2), 0.02))
    assert np.all(pp.calibrate(white, white, dark)[0].data == 1.0)
    assert np.all(pp.calibrate(dark, white, dark)[0].data == 0.0)
    raw = _cube(np.full((3, 3, 2), 0.51))
    refl, flags = pp.calibrate(raw, _cube(np.ones((3, 3, 2))), dark)
    np.testing.assert_allclose(refl.data, 0.5, rtol=1e-6)
    assert refl.kind == CubeKind.REFLECTANCE and not flags.flags.any()


def test_calibration_clamps_below_zero():
    raw = _cube(np.full((1, 1, 1), 0.01))
    refl, _ = pp.calibrate(raw, _cube(np.ones((1, 1, 1))), _cube(np.full((1, 1, 1), 0.02)))
    assert refl.data[0, 0, 0] == 0.0


def test_calibration_names_first_bad_pixel():
    white = np.full((3, 4, 2), 0.9)
    white[1, 2, 1] = 0.01
    white[2, 0, 0] = 0.02
    with pytest.raises(CalibrationError, match=r"\(1, 2\), band 1"):
        pp.calibrate(_cube(np.zeros((3, 4, 2))), _cube(white), _cube(np.full((3, 4, 2), 0.02)))


def test_calibration_checks_alignment():
    a = _cube(np.ones((2, 2, 2)))
    with pytest.raises(ValidationError):
        pp.calibrate(a, _cube(np.ones((2, 3, 2))), a)
    other = Hypercube(np.ones((2, 2, 2), np.float32), BandSet([1.0, 2.0]))
    with pytest.raises(ValidationError):
        pp.calibrate(a, other, a)


def test_saturation_flags():
    raw = np.full((2, 3, 2), 0.5)
    raw[0, 1, 1] = 0.98
    raw[1, 2, 0] = 0.979
    _, flags = pp.calibrate(_cube(raw), _cube(np.ones((2, 3, 2))), _cube(np.zeros((2, 3, 2))))
    assert flags.flags.tolist() == [[False, True, False], [False, False, False]]
    assert flags.rate == pytest.approx(1 / 6)


_vals = hnp.arrays(np.float64, (4, 3), elements=st.floats(0.0, 1.0))


@given(_vals, _vals, st.floats(0.0, 0.5))
def test_calibration_monotone_in_raw(r1, r2, delta):
    lo, hi = np.minimum(r1, r2), np.maximum(r1, r2)
    white = _cube(np.full((4, 3, 1), 0.95))
    dark = _cube(np.full((4, 3, 1), 0.02))
    a, _ = pp.calibrate(_cube(lo[..., None]), white, dark)
    b, _ = pp.calibrate(_cube(hi[..., None]), white, dark)
    assert np.all(a.data <= b.data)


@given(hnp.arrays(np.float64, (3, 3, 2), elements=st.floats(0.05, 0.9)),
       st.floats(0.5, 2.0), st.floats(-0.2, 0.2))
def test_calibration_invariant_to_common_affine_rescaling(raw, gain, offset):
    white = np.full((3, 3, 2), 0.95)
    dark = np.full((3, 3, 2), 0.02)
    base, _ = pp.calibrate(_cube(raw), _cube(white), _cube(dark))
    moved, _ = pp.calibrate(_cube(gain * raw + offset), _cube(gain * white + offset),
                            _cube(gain * dark + offset))
    np.testing.assert_allclose(moved.data, base.data, atol=2e-5)


def test_specular_rate_tracks_scene_density():
    model = ph.default_spectrum_model()
    regions = [ph.Region(c, (30 + 30 * i, 20 + 35 * i)) for i, c in enumerate(CLASSES)]
    spec = ph.SceneSpec(200, 200, 1, regions, seed=5, specular_density=0.01, gain_amplitude=0.1)
    scene = ph.generate_scene(spec, model)
    for cam in ph.Camera:
        gain = ph.default_white_gain(cam)
        frame = ph.render_camera(scene.cube, cam, 0, gain)
        white, dark = ph.render_references(cam, gain, frame.raw.shape)
        _, flags = pp.calibrate(pp.demosaic(frame), pp.demosaic(white), pp.demosaic(dark))
        assert abs(flags.rate - 0.01) <= 0.2 * 0.01
