import io
import warnings

import numpy as np
import pytest

from stereohsi import phantom as ph
from stereohsi import preprocess as pp
from stereohsi.core import CLASSES, BandSet, CubeKind, Hypercube, TissueClass, fused_bands
from stereohsi.errors import FormatError, ValidationError


def _spec(size=60, **kw):
    regions = [ph.Region(c, (10 + 10 * i, 15 + 7 * i)) for i, c in enumerate(CLASSES)]
    return ph.SceneSpec(size, size, subject_id=1, regions=regions, seed=kw.pop("seed", 3), **kw)


def _truth(fn, h=20, w=20):
    bands = fused_bands()
    yy, xx, bb = np.meshgrid(np.arange(h), np.arange(w), np.arange(bands.count), indexing="ij")
    return Hypercube(fn(yy, xx, bb).astype(np.float32), bands, CubeKind.REFLECTANCE)


def test_default_model_is_valid_and_separated():
    model = ph.default_spectrum_model()
    assert model.means.shape == (5, 41)
    assert 0.02 <= model.means.min() and model.means.max() <= 0.95
    for i in range(5):
        for j in range(i + 1, 5):
            assert np.sum(np.abs(model.means[i] - model.means[j]) >= 0.03) >= 5


def test_model_rejects_indistinct_classes():
    means = np.full((5, 41), 0.5)
    with pytest.raises(ValidationError, match="differ"):
        ph.TissueSpectrumModel(means, 0.0, 0.0)
    means = ph.default_spectrum_model().means.copy()
    means[0, 0] = 0.99
    with pytest.raises(ValidationError):
        ph.TissueSpectrumModel(means, 0.0, 0.0)


def test_noise_free_scene_equals_class_means():
    model = ph.default_spectrum_model(0.0, 0.0)
    scene = ph.generate_scene(_spec(), model)
    labels = scene.mask.labels
    assert set(np.unique(labels)) == {0, 1, 2, 3, 4, 5}
    for c in CLASSES:
        px = scene.cube.data[labels == c]
        assert np.array_equal(px, np.broadcast_to(model.mean(c).astype(np.float32), px.shape))


def test_specular_count_binomial():
    model = ph.default_spectrum_model()
    scene = ph.generate_scene(_spec(size=100, specular_density=0.01), model)
    assert 80 <= scene.specular.sum() <= 120
    assert np.all(scene.cube.data[scene.specular] >= 0.98)


def test_generation_is_deterministic():
    model = ph.default_spectrum_model()
    s1 = ph.generate_scene(_spec(specular_density=0.01, gain_amplitude=0.2), model)
    s2 = ph.generate_scene(_spec(specular_density=0.01, gain_amplitude=0.2), model)
    assert s1.cube.equals(s2.cube)
    assert np.array_equal(s1.mask.labels, s2.mask.labels)
    s3 = ph.generate_scene(_spec(seed=4, specular_density=0.01), model)
    assert not s1.cube.equals(s3.cube)


def test_scene_spec_validation():
    regions = [ph.Region(c, (5, 5 + i)) for i, c in enumerate(CLASSES)]
    with pytest.raises(ValidationError, match="overlapping"):
        ph.SceneSpec(20, 20, 1, regions + [ph.Region(TissueClass.NERVE, (5, 5))], seed=0)
    with pytest.raises(ValidationError, match="absent"):
        ph.SceneSpec(20, 20, 1, regions[:3], seed=0)
    ph.SceneSpec(20, 20, 1, regions[:3], seed=0,
                 omit=frozenset({TissueClass.VEIN, TissueClass.SKIN}))
    with pytest.raises(ValidationError):
        ph.SceneSpec(20, 20, 1, regions, seed=0, specular_density=0.06)
    with pytest.raises(ValidationError):
        ph.SceneSpec(20, 20, 1, regions, seed=0, gain_amplitude=0.31)


def test_regions_are_disjoint_and_margins_unlabeled():
    scene = ph.generate_scene(_spec(), ph.default_spectrum_model())
    labels = scene.mask.labels
    # every labeled pixel belongs to its nearest seed's class
    spec = _spec()
    seeds = np.array([r.seed for r in spec.regions])
    yy, xx = np.mgrid[0:60, 0:60]
    d = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    nearest = np.array([int(r.tissue) for r in spec.regions])[d.argmin(-1)]
    assert np.all((labels == 0) | (labels == nearest))
    assert (labels == 0).any()


def test_gain_field_bounds():
    g = ph.gain_field(80, 90, 0.3, np.random.default_rng(0))
    assert g.min() >= 0.7 and g.max() <= 1.3
    assert np.all(ph.gain_field(5, 5, 0.0, None) == 1.0)


def test_class_mean_convergence():
    model = ph.default_spectrum_model(0.0, 0.01)
    spec = ph.SceneSpec(100, 100, 1, [ph.Region(TissueClass.GLAND, (50, 50))], seed=9,
                        omit=frozenset(set(CLASSES) - {TissueClass.GLAND}))
    scene = ph.generate_scene(spec, model)
    err = np.abs(scene.cube.data.reshape(-1, 41).mean(0) - model.mean(TissueClass.GLAND))
    assert err.max() < 3 * 0.01 / 100


def test_render_constant_field():
    truth = _truth(lambda y, x, b: np.full(y.shape, 0.5))
    for cam in ph.Camera:
        frame = ph.render_camera(truth, cam, 0, dark_level=0.0)
        assert np.all(frame.raw == 0.5)
        layout = np.random.default_rng(1).permutation(cam.period ** 2).reshape(cam.period, -1)
        frame = ph.render_camera(truth, cam, 0, dark_level=0.0, layout=layout)
        assert np.all(frame.raw == 0.5)
        frame = ph.render_camera(truth, cam, 0)
        np.testing.assert_allclose(frame.raw, 0.02 + 0.98 * 0.5, rtol=1e-6)


def test_render_samples_one_band_per_cell():
    truth = _truth(lambda y, x, b: 0.01 * b + 0.001 * x + 0.0001 * y)
    frame = ph.render_camera(truth, ph.Camera.B, 0, dark_level=0.0)
    source = [fused_bands().nearest(c) for c in ph.Camera.B.bands().centers_nm]
    bmap = frame.band_index_map()
    for y, x in [(0, 0), (3, 7), (19, 14)]:
        expected = truth.data[y, x, source[bmap[y, x]]]
        assert frame.raw[y, x] == pytest.approx(expected, abs=1e-7)


def test_disparity_translates_view():
    # constant per column: value depends only on column and band
    truth = _truth(lambda y, x, b: 0.2 + 0.02 * x + 0.001 * b, w=40)
    frame = ph.render_camera(truth, ph.Camera.B, 7, dark_level=0.0)
    source = np.array([fused_bands().nearest(c) for c in ph.Camera.B.bands().centers_nm])
    band = source[frame.band_index_map()]
    col = np.clip(np.arange(40) - 7, 0, 39)[None, :]
    expected = (0.2 + 0.02 * col + 0.001 * band).astype(np.float32)
    np.testing.assert_allclose(frame.raw, expected, rtol=0, atol=1e-6)
    assert not np.allclose(frame.raw, ph.render_camera(truth, ph.Camera.B, 0, dark_level=0.0).raw)


def test_white_gain_linearity():
    truth = _truth(lambda y, x, b: 0.3 + 0.01 * ((x + y + b) % 7))
    frame = ph.render_camera(truth, ph.Camera.A, 0, white_gain=np.full(16, 0.8), dark_level=0.0)
    ref = ph.render_camera(truth, ph.Camera.A, 0, dark_level=0.0)
    np.testing.assert_allclose(frame.raw, 0.8 * ref.raw, rtol=1e-6)


def test_render_crops_non_divisible_frames():
    truth = _truth(lambda y, x, b: np.full(y.shape, 0.4), h=23, w=21)
    with pytest.warns(UserWarning, match="cropped"):
        frame = ph.render_camera(truth, ph.Camera.B)
    assert frame.raw.shape == (20, 20) and frame.crop == (20, 20)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        exact = _truth(lambda y, x, b: np.full(y.shape, 0.4), h=20, w=20)
        assert ph.render_camera(exact, ph.Camera.A, 0).crop is None


def test_references():
    white, dark = ph.render_references(ph.Camera.A)
    assert np.all(white.raw == 1.0) and np.allclose(dark.raw, 0.02)
    gain = np.full(25, 0.75)
    gain[3] = 0.5
    white, dark = ph.render_references(ph.Camera.B, gain, (10, 10))
    assert np.allclose(white.raw[white.band_index_map() == 3], 0.5)
    wc, dc = pp.demosaic(white), pp.demosaic(dark)
    refl, _ = pp.calibrate(wc, wc, dc)
    assert np.all(refl.data == 1.0)


def test_mosaic_frame_validation():
    with pytest.raises(ValidationError):
        ph.MosaicFrame(np.zeros((4, 4)), np.zeros((2, 2)), ph.Camera.A)
    with pytest.raises(ValidationError):
        ph.MosaicFrame(np.zeros((6, 4)), ph.default_layout(4), ph.Camera.A)
    with pytest.raises(ValidationError):
        ph.MosaicFrame(np.full((4, 4), 1.5), ph.default_layout(4), ph.Camera.A)


def test_frame_round_trip_and_magic():
    truth = _truth(lambda y, x, b: 0.1 + 0.01 * b)
    frame = ph.render_camera(truth, ph.Camera.B, 2)
    buf = io.BytesIO()
    n = ph.write_frame(frame, buf)
    assert n == 14 + 2 * 25 + 4 * 400
    buf.seek(0)
    back = ph.read_frame(buf)
    assert back.camera == ph.Camera.B and np.array_equal(back.raw, frame.raw)
    assert np.array_equal(back.layout, frame.layout)
    with pytest.raises(FormatError):
        ph.read_frame(io.BytesIO(b"HSC1" + buf.getvalue()[4:]))


def test_manifest_round_trip(tmp_path):
    recs = [ph.SceneRecord(1, 1, "a.hsr", "b.hsr", "wa", "da", "wb", "db", "m.hsm", 4),
            ph.SceneRecord(2, 7, "a2.hsr", "b2.hsr", "wa2", "da2", "wb2", "db2", "m2.hsm", 5)]
    ph.write_manifest(recs, tmp_path / "m.tsv")
    assert ph.read_manifest(tmp_path / "m.tsv") == recs
    (tmp_path / "bad.tsv").write_text("1\t2\n")
    with pytest.raises(FormatError):
        ph.read_manifest(tmp_path / "bad.tsv")


def test_default_recipe_shape():
    specs = ph.default_recipe(0)
    subjects = [s.subject_id for s in specs]
    assert len(set(subjects)) == 18 and len(specs) == 27
    for sid in set(subjects):
        present = set()
        for s in specs:
            if s.subject_id == sid:
                present |= {r.tissue for r in s.regions}
        assert present == set(CLASSES)
    assert len({s.scene_id for s in specs}) == 27
