import json

import numpy as np
import pytest

from raylens import io_analysis as io
from raylens import psf as psf_mod
from raylens import raytrace as rt
from raylens.errors import LensFileError
from raylens.optics import MATERIALS
from raylens.optimize import init_from_scratch
from tests.test_raytrace import doublet, empty_system


def random_system(seed):
    rng = np.random.default_rng(seed)
    lens = init_from_scratch(int(rng.integers(1, 5)), seed=int(seed))
    # scatter the optimizable values so round-trips exercise odd floats
    for s in lens.surfaces:
        s.a4.value = float(rng.normal(0, 1e-4))
        s.a6.value = float(rng.normal(0, 1e-6))
        s.a8.value = float(rng.normal(0, 1e-8))
        s.a10.value = float(rng.normal(0, 1e-10))
    return lens


def test_roundtrip_exact_values(tmp_path):
    lens = random_system(1)
    path = tmp_path / "lens.json"
    io.save_lens(lens, path)
    loaded = io.load_lens(path)
    assert loaded.param_values() == lens.param_values()
    assert loaded.stop.radius == lens.stop.radius
    assert loaded.sensor.pixel_pitch == lens.sensor.pixel_pitch
    assert [s.material_after.name for s in loaded.surfaces] == \
        [s.material_after.name for s in lens.surfaces]


def test_roundtrip_byte_identical(tmp_path):
    for seed in range(10):
        lens = random_system(seed)
        p1 = tmp_path / ("a%d.json" % seed)
        p2 = tmp_path / ("b%d.json" % seed)
        io.save_lens(lens, p1)
        io.save_lens(io.load_lens(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()


def test_unknown_keys_rejected(tmp_path):
    lens = random_system(2)
    doc = io.lens_to_dict(lens)
    doc["surfaces"][1]["zernike"] = 1.0
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(LensFileError, match=r"surfaces\[1\].*zernike"):
        io.load_lens(path)


def test_unknown_material_lists_available(tmp_path):
    lens = random_system(3)
    doc = io.lens_to_dict(lens)
    doc["surfaces"][0]["material"] = "kryptonite"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(LensFileError, match="pmma"):
        io.load_lens(path)


def test_ordering_violation_reported(tmp_path):
    lens = random_system(4)
    doc = io.lens_to_dict(lens)
    doc["surfaces"][0]["vertex_z"] = 99.0
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(LensFileError, match="axial gap|sensor"):
        io.load_lens(path)


def test_missing_key_reported(tmp_path):
    lens = random_system(5)
    doc = io.lens_to_dict(lens)
    del doc["surfaces"][0]["c"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(LensFileError, match="missing key 'c'"):
        io.load_lens(path)


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = np.round(rng.random((7, 9, 3)) * 255) / 255.0
    path = tmp_path / "img.ppm"
    io.write_ppm(path, img)
    back = io.read_ppm(path)
    assert back.shape == (7, 9, 3)
    assert np.allclose(back, img, atol=0.5 / 255)
    with pytest.raises(ValueError):
        io.write_ppm(path, np.zeros((4, 4)))


def test_export_psf_delta(tmp_path):
    grids = []
    for wl in (0.6563, 0.5893, 0.4861):
        g = psf_mod.PsfGrid(5, 0.0018, (0.0, 0.0), wl)
        g.values[2, 2] = 0.7
        grids.append(g)
    io.export_psf(grids, tmp_path / "psf.ppm")
    img = io.read_ppm(tmp_path / "psf.ppm")
    assert img[2, 2, 0] == 1.0 and img[2, 2, 1] == 1.0
    assert img.sum() == 3.0  # single bright pixel per channel
    rows = (tmp_path / "psf.csv").read_text().strip().splitlines()
    assert rows[0] == "row,col,r,g,b"
    assert len(rows) == 1 + 25
    cells = {tuple(r.split(",")[:2]): r.split(",")[2:] for r in rows[1:]}
    assert cells[("2", "2")] == ["0.7", "0.7", "0.7"]


def test_export_spot_row_count(tmp_path):
    lens = doublet(seed=1)
    res = rt.trace_to_sensor(lens, rt.sample_pupil_rays(lens, 10.0, 0.5893, 32, 0))
    io.export_spot([res], tmp_path / "spot.csv")
    rows = (tmp_path / "spot.csv").read_text().strip().splitlines()
    assert rows[0] == "x_mm,y_mm,wavelength_um,valid"
    assert len(rows) == 1 + 32


def test_export_layout_empty_system(tmp_path):
    sys_ = empty_system()
    io.export_layout(sys_, tmp_path / "layout.svg")
    svg = (tmp_path / "layout.svg").read_text()
    assert svg.count('class="surface"') == 0
    assert svg.count('class="stop"') == 2
    assert svg.count('class="sensor"') == 1


def test_export_layout_doublet(tmp_path):
    lens = doublet(seed=1)
    io.export_layout(lens, tmp_path / "layout.svg", field_angles=[0.0, 20.0])
    svg = (tmp_path / "layout.svg").read_text()
    assert svg.count('class="surface"') == 4
    assert svg.count('class="stop"') == 2
    assert svg.count('class="ray"') >= 4


def test_report_payload_determinism(tmp_path):
    metrics = {"b": [1.0, 2.0], "a": {"x": 0.1}}
    io.export_report(metrics, tmp_path / "r1.json", metadata={"note": "one"})
    io.export_report(metrics, tmp_path / "r2.json", metadata={"note": "two"})
    assert io.report_payload_bytes(tmp_path / "r1.json") == \
        io.report_payload_bytes(tmp_path / "r2.json")
    doc = json.loads((tmp_path / "r1.json").read_text())
    assert doc["metadata"]["note"] == "one"
