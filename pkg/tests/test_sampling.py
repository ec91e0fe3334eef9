import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

import oracles
from ctscatter import sampling as sm
from ctscatter.errors import DomainError, EnergyRangeError
from ctscatter.physics_data import Table
from ctscatter.rng import CounterRNG

N = 1_000_000


def free_electron(mat):
    """Same tables but S == z_eff and F == 1 everywhere (unvalidated on purpose)."""
    return dataclasses.replace(
        mat,
        S=Table(np.array([0.0, 1e3]), np.array([mat.z_eff, mat.z_eff])),
        F=Table(np.array([0.0, 1e3]), np.array([1.0, 1.0])),
    )


@pytest.mark.parametrize("name,energy", [("water", 30.0), ("al", 100.0), ("fe", 60.0), ("water", 150.0)])
def test_compton_angles_chi_square(lib, name, energy):
    mat = lib[name]
    cos_t, _ = sm.sample_compton_cos(mat, energy, N, CounterRNG(1, 2))
    pdf = lambda m: oracles.dsigma_compton(mat, energy, m)  # noqa: E731
    res = oracles.chi_square_cos(cos_t, pdf, oracles.breakpoints(mat, energy, "compton"))
    assert res.pvalue > 0.01, res


@pytest.mark.parametrize("name,energy", [("water", 30.0), ("al", 100.0), ("fe", 60.0), ("al", 200.0)])
def test_rayleigh_angles_chi_square(lib, name, energy):
    mat = lib[name]
    cos_t = sm.sample_rayleigh_cos(mat, energy, N, CounterRNG(3, 4))
    pdf = lambda m: oracles.dsigma_rayleigh(mat, energy, m)  # noqa: E731
    res = oracles.chi_square_cos(cos_t, pdf, oracles.breakpoints(mat, energy, "rayleigh"))
    assert res.pvalue > 0.01, res


def test_constant_s_reduces_to_klein_nishina(water):
    mat = free_electron(water)
    cos_t, _ = sm.sample_compton_cos(mat, 80.0, N, CounterRNG(5))
    pdf = lambda m: oracles.dsigma_compton(mat, 80.0, m)  # noqa: E731
    assert oracles.chi_square_cos(cos_t, pdf, []).pvalue > 0.01


def test_thomson_limit_is_symmetric(water):
    cos_t = sm.sample_rayleigh_cos(free_electron(water), 80.0, 200_000, CounterRNG(6))
    # (1 + mu^2): mean 0, E[mu^2] = 2/5
    assert abs(cos_t.mean()) < 3 * math.sqrt(0.4 / cos_t.size)
    assert cos_t.var() == pytest.approx(0.4, rel=0.02)


@given(st.floats(5.0, 500.0), st.integers(0, 2 ** 32))
@settings(max_examples=40, deadline=None)
def test_compton_energy_relation_is_exact(energy, seed):
    from ctscatter.physics_data import bundled_material

    water = bundled_material("water")
    s = sm.sample_compton(water, energy, CounterRNG(seed))
    alpha = energy / oracles.MEC2
    expect = alpha / (1.0 + alpha * (1.0 - math.cos(s.theta)))
    assert s.alpha_prime == pytest.approx(expect, rel=1e-12)
    assert 0.0 < s.alpha_prime <= alpha
    assert 0.0 <= s.phi < 2 * math.pi


def test_compton_energy_batch_exact(al):
    cos_t, e_out = sm.sample_compton_cos(al, 120.0, 10_000, CounterRNG(9))
    assert np.array_equal(e_out, 120.0 / (1.0 + 120.0 / sm.MEC2_KEV * (1.0 - cos_t)))


@pytest.mark.parametrize("kind", ["compton", "rayleigh"])
@pytest.mark.parametrize("name,energy", [("water", 20.0), ("al", 100.0), ("fe", 300.0)])
def test_p_lambda_normalised(lib, kind, name, energy):
    mat = lib[name]
    fn = sm.p_lambda_compton if kind == "compton" else sm.p_lambda_rayleigh
    pts = oracles.breakpoints(mat, energy, kind).tolist()
    total, _ = integrate.quad(lambda m: fn(mat, energy, math.acos(m)), -1.0, 1.0, points=pts or None, limit=500)
    # density integrates to one over the sphere: (1/(2 pi)) * 2 pi * int dmu
    assert total == pytest.approx(1.0, abs=0.005)


@given(st.floats(0.0, math.pi), st.sampled_from(["water", "al", "fe"]), st.floats(10.0, 400.0))
@settings(max_examples=60, deadline=None)
def test_p_lambda_proportional_to_cross_section(theta, name, energy):
    from ctscatter.physics_data import bundled_material, cross_section

    mat = bundled_material(name)
    for kind, p, d in (("incoherent", sm.p_lambda_compton, sm.d_sigma_compton),
                       ("coherent", sm.p_lambda_rayleigh, sm.d_sigma_rayleigh)):
        sigma_cm2 = cross_section(mat, kind, energy) * 1e-24
        assert p(mat, energy, theta) == pytest.approx(2 * math.pi / sigma_cm2 * d(mat, energy, theta), rel=1e-12)


def test_differential_cross_section_limits(water):
    free = free_electron(water)
    r0sq = oracles.R0 ** 2
    assert sm.d_sigma_compton(water, 60.0, 0.0) == 0.0  # S(0) = 0
    assert sm.d_sigma_compton(free, 60.0, 0.0) == pytest.approx(r0sq * water.z_eff, rel=1e-12)
    assert sm.d_sigma_rayleigh(water, 60.0, 0.0) == pytest.approx(r0sq * water.z_eff ** 2, rel=1e-12)
    assert sm.d_sigma_rayleigh(free, 60.0, math.pi / 2) == pytest.approx(0.5 * r0sq, rel=1e-12)


def test_free_electron_total_matches_closed_form(water):
    free = free_electron(water)
    tot, _ = integrate.quad(lambda m: sm.d_sigma_compton(free, 90.0, math.acos(m)), -1.0, 1.0)
    assert 2 * math.pi * tot == pytest.approx(water.z_eff * oracles.kn_total_free_electron(90.0), rel=1e-9)


def test_angle_and_energy_domain_errors(water):
    with pytest.raises(DomainError):
        sm.d_sigma_compton(water, 60.0, -0.1)
    with pytest.raises(DomainError):
        sm.p_lambda_rayleigh(water, 60.0, 4.0)
    with pytest.raises(EnergyRangeError):
        sm.d_sigma_compton(water, 0.5, 1.0)


def test_interaction_frequencies_match_cross_sections(water):
    from ctscatter.physics_data import cross_section

    n = 400_000
    codes = sm.select_interaction(water, 60.0, CounterRNG(12), n=n)
    sig = np.array([cross_section(water, k, 60.0) for k in ("photoelectric", "incoherent", "coherent")])
    p = sig / sig.sum()
    counts = np.bincount(codes, minlength=3)
    for c, pk in zip(counts, p):
        assert abs(c - n * pk) < 4 * math.sqrt(n * pk * (1 - pk))


def test_interaction_selection_degenerate_tables(water):
    zero = Table(water.coherent.x, np.zeros_like(water.coherent.y))
    only_compton = dataclasses.replace(water, photoelectric=zero, coherent=zero)
    codes = sm.select_interaction(only_compton, 60.0, CounterRNG(1), n=5000)
    assert np.all(codes == sm.COMPTON)
    same = Table(water.coherent.x, np.ones_like(water.coherent.y))
    equal = dataclasses.replace(water, photoelectric=same, incoherent=same, coherent=same)
    n = 300_000
    counts = np.bincount(sm.select_interaction(equal, 60.0, CounterRNG(2), n=n), minlength=3)
    assert np.all(np.abs(counts - n / 3) < 4 * math.sqrt(n * 2 / 9))
    assert sm.select_interaction(water, 60.0, CounterRNG(3)) in sm.INTERACTION_NAMES


@given(st.floats(-1.0, 1.0), st.floats(0.0, 2 * math.pi), st.floats(-1.0, 1.0), st.floats(0.0, 2 * math.pi))
@settings(max_examples=200, deadline=None)
def test_rotation_preserves_polar_angle(w, az, cos_t, phi):
    s = math.sqrt(max(0.0, 1 - w * w))
    u, v = s * math.cos(az), s * math.sin(az)
    nu, nv, nw = sm.rotate_direction(u, v, w, cos_t, phi)
    assert nu * nu + nv * nv + nw * nw == pytest.approx(1.0, abs=1e-12)
    assert nu * u + nv * v + nw * w == pytest.approx(cos_t, abs=1e-6)
