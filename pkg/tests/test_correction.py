import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctscatter import correction as co
from ctscatter import phantoms as pht
from ctscatter import physics_data as pd
from ctscatter import transport as tr
from ctscatter.errors import SimulationError, ValidationError
from ctscatter.geometry import ScanGeometry
from ctscatter.postprocess import SgFilterSpec
from ctscatter.recon import fbp_reconstruct, intensity_to_attenuation

pos = st.floats(1e-3, 1e3)


@given(arrays(np.float64, (2, 3, 4), elements=pos), arrays(np.float64, (2, 3, 4), elements=pos),
       arrays(np.float64, (2, 3, 4), elements=st.floats(0.0, 1e3)))
@settings(max_examples=100, deadline=None)
def test_correction_restores_primary_line_integral(flat, ip, is_):
    a = np.log(flat / (ip + is_))
    c, n = co.correct_projections(a, ip, is_)
    assert n == 0
    assert np.allclose(c, np.log(flat / ip), rtol=1e-12, atol=1e-12)
    assert np.all(c >= a)


def test_zero_scatter_is_identity_and_negative_scatter_is_clamped():
    r = np.random.default_rng(0)
    a = r.random((2, 3, 3))
    ip = 1 + r.random((2, 3, 3))
    c, n = co.correct_projections(a, ip, np.zeros_like(a))
    assert np.array_equal(c, a) and n == 0
    is_ = np.zeros_like(a)
    is_[0, 0, :2] = -0.5
    c, n = co.correct_projections(tr.ProjectionStack(a, [0.0, 1.0]), ip, is_, warn=False)
    assert n == 2 and np.array_equal(c.values, a)
    with pytest.raises(ValidationError, match="primary"):
        co.correct_projections(a, -ip, is_)
    with pytest.raises(ValidationError, match="shapes"):
        co.correct_projections(a, ip[:1], is_)


def test_simulated_angle_subsets():
    assert list(co.simulated_angle_indices(10, 3, periodic=True)) == [0, 3, 6, 9]
    assert list(co.simulated_angle_indices(10, 4, periodic=True)) == [0, 4, 8]
    assert list(co.simulated_angle_indices(10, 4, periodic=False)) == [0, 4, 8, 9]
    assert list(co.simulated_angle_indices(5, 1, periodic=False)) == [0, 1, 2, 3, 4]


def test_config_validation(water):
    cm = {0: (None, 0.0), 1: (water, 1.0)}
    with pytest.raises(ValidationError):
        co.CorrectionConfig((8, 8, 8), 0.1, cm, n_iterations=0)
    with pytest.raises(ValidationError):
        co.CorrectionConfig((8, 8, 8), 0.1, cm, simulate_every_kth_angle=0)
    with pytest.raises(ValidationError, match="class_map"):
        co.CorrectionConfig((8, 8, 8), 0.1, cm, n_classes=3)
    with pytest.raises(ValidationError):
        co.CorrectionConfig((8, 8, 8), 0.1, cm, phantom_dims=(3, 3, 3))
    with pytest.raises(ValidationError):
        co.CorrectionConfig((8, 8, 8), 0.1, cm, density_mode="x")
    cfg = co.CorrectionConfig((8, 8, 8), 0.1, cm, mc_resolution=(32, 4))
    assert cfg.n_classes == 2
    with pytest.raises(ValidationError, match="mc_resolution"):
        cfg.check_geometry(ScanGeometry.uniform(100.0, 60.0, (16, 16), 0.3, 4))


@pytest.fixture(scope="module")
def small_loop(water, al):
    """Water cylinder with aluminium inserts, raw = exact primary + simulated scatter."""
    dims = (24, 24, 8)
    ph = pht.two_material(dims, 0.25, 2.5, water, al, insert_radius=0.6)
    g = ScanGeometry.uniform(100.0, 60.0, (32, 12), 0.3, 36)
    spec = pd.Spectrum.monochromatic(80.0)
    resp = pd.DetectorResponse.ideal()
    prim = tr.run_scan(ph, g, spec, resp, tr.SimConfig(), what="primary").primary
    scat = tr.run_scan(ph, g.with_pixels(8, 6), spec, resp, tr.SimConfig(photons_total=4000, seed=11),
                       what="scatter").scatter
    from ctscatter.postprocess import sg_smooth_stack, upsample_stack

    scat = upsample_stack(sg_smooth_stack(scat, SgFilterSpec(5, 3)), g.det_pixels)
    raw = tr.ProjectionStack(prim.values + np.clip(scat.values, 0, None), g.angles)
    flat = tr.flat_field(g, spec, resp)
    cm = {0: (None, 0.0), 1: (water, water.density_ref), 2: (al, al.density_ref)}
    cfg = co.CorrectionConfig(dims, 0.25, cm, n_iterations=2, simulate_every_kth_angle=3,
                              mc_resolution=(8, 6), sg=SgFilterSpec(5, 3),
                              sim=tr.SimConfig(photons_total=3000, seed=5))
    return ph, g, spec, resp, prim, raw, flat, cfg


def test_estimate_scatter_shapes_and_interpolation(small_loop):
    ph, g, spec, resp, prim, _, _, cfg = small_loop
    ip, is_, info = co.estimate_scatter(ph, g, spec, resp, cfg)
    assert ip.values.shape == is_.values.shape == (36, 12, 32)
    assert info["n_simulated"] == 12
    assert np.allclose(ip.values, prim.values, rtol=1e-12)  # full-resolution primary
    assert set(info["times"]) >= {"mc_scatter", "mc_primary", "smooth", "interpolate", "upsample"}
    low = co.estimate_scatter(ph, g, spec, resp, co.CorrectionConfig(
        cfg.recon_dims, 0.25, cfg.class_map, mc_resolution=(8, 6), simulate_every_kth_angle=3,
        sg=cfg.sg, sim=cfg.sim, primary_full_resolution=False))[0]
    assert low.values.shape == ip.values.shape and np.all(low.values > 0)


def test_iterative_loop_reduces_scatter_error(small_loop):
    ph, g, spec, resp, prim, raw, flat, cfg = small_loop
    seen = []
    vol, c, reports = co.run_iterative_correction(raw, flat, g, spec, resp, cfg,
                                                  callback=lambda it, v, s: seen.append(it))
    assert seen == [1, 2] and len(reports) == 2
    truth = intensity_to_attenuation(prim, flat)
    a_raw = intensity_to_attenuation(raw, flat)
    err_raw = np.abs(a_raw.values - truth.values).mean()
    err_cor = np.abs(c.values - truth.values).mean()
    assert err_cor < 0.5 * err_raw
    v_true = fbp_reconstruct(truth, g, cfg.recon_dims, 0.25).values
    v_raw = fbp_reconstruct(a_raw, g, cfg.recon_dims, 0.25).values
    assert np.abs(vol.values - v_true).mean() < np.abs(v_raw - v_true).mean()
    r = reports[-1]
    assert 0 < r.scatter_fraction_mean < r.scatter_fraction_max < 1
    assert 0.9 < r.ncc_previous <= 1.0 and len(r.thresholds) == 2
    line = r.to_line()
    assert line.startswith("iteration=2 ") and "ncc_previous=" in line


def test_ncc_stop_ends_early(small_loop):
    _, g, spec, resp, _, raw, flat, cfg = small_loop
    cfg1 = co.CorrectionConfig(cfg.recon_dims, 0.25, cfg.class_map, n_iterations=3, mc_resolution=(8, 6),
                               simulate_every_kth_angle=6, sg=cfg.sg, sim=cfg.sim, ncc_stop=0.0)
    _, _, reports = co.run_iterative_correction(raw, flat, g, spec, resp, cfg1)
    assert len(reports) == 1


def test_errors_name_iteration_and_stage(small_loop, water):
    _, g, _, resp, _, raw, flat, cfg = small_loop
    toy = pd.parse_material(
        "name=Toy\nz_eff=10\ndensity=1\n[mu]\n10 5\n40 1\n[incoherent]\n10 1\n40 1\n[coherent]\n10 1\n40 1\n"
        "[photoelectric]\n10 1\n40 1\n[S]\n0 0\n1 10\n[F]\n0 10\n1 1\n", "toy.mat")
    bad = co.CorrectionConfig(cfg.recon_dims, 0.25, {0: (None, 0.0), 1: (toy, 1.0), 2: (water, 1.0)},
                              mc_resolution=(8, 6), sg=cfg.sg, sim=cfg.sim)
    with pytest.raises(SimulationError, match="iteration 1, stage simulate"):
        co.run_iterative_correction(raw, flat, g, pd.Spectrum.monochromatic(80.0), resp, bad)
    with pytest.raises(ValidationError, match="raw stack"):
        co.run_iterative_correction(tr.ProjectionStack(raw.values[:3], g.angles[:3]), flat, g,
                                    pd.Spectrum.monochromatic(80.0), resp, cfg)


def test_reports_and_table(tmp_path):
    reps = [co.IterationReport(i, {"fbp": 1.0, "mc_scatter": 2.0, "mc_primary": 0.5}, 0.1, 0.3, 0.99,
                               [0.1, 0.4], 0, 10, 0.2) for i in (1, 2)]
    co.write_reports(reps, tmp_path / "r.txt")
    lines = (tmp_path / "r.txt").read_text().splitlines()
    assert len(lines) == 2 and "t_mc_scatter=2" in lines[0]
    col = co.table_rows(120, tr.SimConfig(photons_total=10 ** 5), reps)
    assert col["Projections for FBP"] == 120 and col["MC time /iteration"] == "2.500 s"
    assert col["Correction / 2 iterations"] == "7.000 s"
    co.write_table([("a", col), ("b", col)], tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["", "a", "b"] and rows[1][0] == "Projections for FBP"
    assert len(rows) == 1 + len(co.TABLE_ROWS)
    assert math.isclose(reps[0].total_seconds, 3.5)
