"""Tests for crystal equilibria, normal modes and partitioning.

Tags: [DERIVED] independent oracle, [PAPER] reference value, [TRIVIAL] identity.
"""
import math

import numpy as np
import pytest
from scipy.constants import epsilon_0
from hypothesis import HealthCheck, given, settings, strategies as st

from iontransport import crystal_modes as cm
from iontransport import waveform_synth as ws
from iontransport.constants import DEFAULT_CONSTANTS as C
from iontransport.errors import InstabilityError, TopologyError
from iontransport.trap_model import (AxialPotential, ElectrodeBasis, curvature_from_omega,
                                     find_well)

TWO_PI = 2 * math.pi
DOMAIN = (-555e-6, 555e-6)
OMEGA = TWO_PI * 2e6


def poly_pot(coef):
    return AxialPotential(ElectrodeBasis.polynomial([coef], DOMAIN), [1.0])


def harmonic_pot(omega=OMEGA):
    return poly_pot([0.0, 0.0, 0.5 * curvature_from_omega(omega)])


def seed(n, spacing=5e-6):
    return (np.arange(n) - (n - 1) / 2) * spacing


# -- equilibrium ------------------------------------------------------------------------

def test_single_ion_sits_at_well_minimum(basis):
    """[TRIVIAL] no Coulomb term for one ion."""
    pot = AxialPotential(basis, (1.289, 0.327, 2.173, 0.310, 1.311))
    well = find_well(pot, -180e-6)
    crystal = cm.equilibrium_positions(pot, 1, [well.z0 + 3e-6])
    assert abs(crystal.positions[0] - well.z0) < 1e-12
    spectrum = cm.mode_spectrum(pot, crystal)
    assert abs(spectrum.frequencies[0] / well.omega - 1) < 1e-9


def test_two_ion_spacing_harmonic():
    """[DERIVED] force balance: d^3 = e^2 / (2 pi eps0 m omega^2)."""
    crystal = cm.equilibrium_positions(harmonic_pot(), 2, seed(2))
    d = (C.elementary_charge ** 2 / (2 * math.pi * epsilon_0 * C.ion_mass * OMEGA ** 2)) \
        ** (1 / 3)
    assert abs(np.diff(crystal.positions)[0] / d - 1) < 1e-9


def test_two_ion_half_spacing_quartic():
    """[DERIVED] pure quartic U = b z^4: 16 b s^5 = k_e e."""
    b = 1e14
    crystal = cm.equilibrium_positions(poly_pot([0, 0, 0, 0, b]), 2, seed(2, 20e-6))
    s = 0.5 * np.diff(crystal.positions)[0]
    s_ref = (C.coulomb_k * C.elementary_charge / (16 * b)) ** 0.2
    assert abs(s / s_ref - 1) < 1e-9


def test_two_ion_mode_ratios():
    """[TRIVIAL]/[DERIVED] stretch/COM = sqrt(3) (harmonic) and sqrt(5/3) (quartic,
    oracle: H_ii = 16 b s^2, H_ij = -4 b s^2 at equilibrium)."""
    spectrum = cm.mode_spectrum(harmonic_pot(), cm.equilibrium_positions(harmonic_pot(), 2, seed(2)))
    assert abs(spectrum.frequencies[1] / spectrum.frequencies[0] - math.sqrt(3)) < 1e-9
    assert spectrum.labels == ("COM", "stretch")
    pot = poly_pot([0, 0, 0, 0, 1e14])
    spectrum = cm.mode_spectrum(pot, cm.equilibrium_positions(pot, 2, seed(2, 20e-6)))
    assert abs(spectrum.frequencies[1] / spectrum.frequencies[0] - math.sqrt(5 / 3)) < 1e-9


@pytest.mark.parametrize("n", [2, 3, 5, 9])
def test_modes_orthonormal_and_reconstruct_hessian(basis, n):
    """[TRIVIAL] orthonormal vectors; V diag(w^2) V^T rebuilds the mass-scaled Hessian."""
    pot = AxialPotential(basis, ws.separation_endpoints(basis, ws.SeparationRamp())[0])
    crystal = cm.crystal_in_well(pot, n, 0.0)
    spectrum = cm.mode_spectrum(pot, crystal)
    v = spectrum.mode_vectors
    assert np.max(np.abs(v @ v.T - np.eye(n))) < 1e-10
    h = cm.energy_hessian(pot, crystal.positions) / C.ion_mass
    rebuilt = v.T @ np.diag(spectrum.frequencies ** 2) @ v
    assert np.linalg.norm(rebuilt - h) / np.linalg.norm(h) < 1e-9
    assert np.all(np.diff(spectrum.frequencies) > 0)


@pytest.mark.parametrize("n", [2, 3])
def test_com_vector_uniform_in_harmonic_well(n):
    """[TRIVIAL] equal curvature at every site makes the COM mode uniform."""
    pot = harmonic_pot()
    spectrum = cm.mode_spectrum(pot, cm.equilibrium_positions(pot, n, seed(n)))
    com = spectrum.mode_vectors[0]
    assert np.max(np.abs(com - 1 / math.sqrt(n))) < 1e-9
    assert abs(spectrum.frequencies[0] / OMEGA - 1) < 1e-9


@settings(max_examples=30, deadline=None,
          suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(n=st.integers(2, 6), data=st.data())
def test_equilibrium_is_local_minimum(basis, rng, n, data):
    """[DERIVED] random 1e-9 m perturbations never lower the total energy."""
    pot = AxialPotential(basis, ws.separation_endpoints(basis, ws.SeparationRamp())[0])
    crystal = cm.crystal_in_well(pot, n, 0.0)
    e0 = cm.total_energy(pot, crystal.positions)
    for _ in range(5):
        u = np.array(data.draw(st.lists(st.floats(-1, 1), min_size=n, max_size=n)))
        if np.linalg.norm(u) < 1e-3:
            continue
        # fixed 1e-9 m step: the energy rise (~1e-12 relative) is far above rounding
        dz = 1e-9 * u / np.linalg.norm(u)
        assert cm.total_energy(pot, crystal.positions + dz) > e0


def test_unstable_equilibrium_is_flagged():
    """[TRIVIAL] a seed at a potential maximum converges at once but is not stable."""
    pot = poly_pot([0.0, 0.0, -1e6])
    with pytest.warns(RuntimeWarning, match="not a stable minimum"):
        crystal = cm.equilibrium_positions(pot, 1, [0.0])
    assert not crystal.stable
    with pytest.raises(InstabilityError) as info:
        cm.mode_spectrum(pot, crystal)
    assert info.value.mode_vector is not None
    assert info.value.eigenvalue < 0


def test_crystal_invariants():
    with pytest.raises(ValueError):
        cm.IonCrystal([1e-6, 0.0], C.ion_mass)
    with pytest.raises(ValueError):
        cm.equilibrium_positions(harmonic_pot(), 2, [1e-6, -1e-6])


# -- partitioning ---------------------------------------------------------------------

SEP = ws.SeparationRamp().separation
WINDOW = (-SEP, SEP)


@pytest.fixture(scope="module")
def family():
    return ws.partition_family(ElectrodeBasis.default())


def test_two_ions_split_evenly_at_zero_offset(family):
    """[TRIVIAL] symmetry."""
    assert cm.partition_count(family, 2, 0.0, WINDOW) == (1, 1)


def test_large_offset_sends_all_ions_left(family):
    """[TRIVIAL] with the documented sign convention a large positive O2 offset
    pushes the whole crystal left."""
    assert cm.partition_count(family, 9, 0.6, WINDOW) == (9, 0)
    assert cm.partition_count(family, 9, -0.6, WINDOW) == (0, 9)


@settings(max_examples=8, deadline=None)
@given(width=st.floats(92e-6, 108e-6), end_mhz=st.floats(2.5, 3.0),
       offsets=st.lists(st.floats(-0.3, 0.4), min_size=4, max_size=4, unique=True))
def test_partition_count_monotone_in_offset(width, end_mhz, offsets):
    """[DERIVED] left count is non-decreasing in the O2 offset across trap variants."""
    basis = ElectrodeBasis.default(width=width)
    ramp = ws.SeparationRamp(end_omega=TWO_PI * end_mhz * 1e6)
    fam = ws.partition_family(basis, ramp)
    lefts = [cm.partition_count(fam, 5, off, WINDOW, n_checkpoints=32)[0]
             for off in sorted(offsets)]
    assert all(b >= a for a, b in zip(lefts, lefts[1:]))


def test_partition_scan_rows(family):
    rows = cm.partition_scan(family, 2, [-0.5, 0.0, 0.5], WINDOW)
    assert [r[1] for r in rows] == [0, 1, 2]
    assert rows[1][2] == 10.0
    with pytest.raises(ValueError, match="sorted"):
        cm.partition_scan(family, 2, [0.1, 0.0], WINDOW)


def test_wedge_required(family):
    """[TRIVIAL] the start potential is a single well, so it has no wedge."""
    with pytest.raises(TopologyError):
        cm.find_wedge(family(0.0, 0.0), WINDOW)


def test_tie_on_wedge_goes_left(monkeypatch):
    """[TRIVIAL] an ion exactly on the wedge maximum is assigned left with a warning."""
    pot = poly_pot([0.0, 0.0, -1e6, 0.0, 1e14])
    monkeypatch.setattr(cm, "track_crystal", lambda *a, **k: [
        cm.IonCrystal([0.0], C.ion_mass, stable=False)])
    with pytest.warns(RuntimeWarning, match="wedge"):
        counts = cm.partition_count(lambda s, off: pot, 1, 0.0, (-60e-6, 60e-6))
    assert counts == (1, 0)


# -- fluorescence ---------------------------------------------------------------------

def test_fluorescence_model():
    """[PAPER] one ion gives about 10 counts; [TRIVIAL] none gives 0; per-ion
    counts do not increase with ion number."""
    assert cm.fluorescence_counts(1) == 10.0
    assert cm.fluorescence_counts(0) == 0.0
    per_ion = [cm.fluorescence_counts(n) / n for n in range(1, 10)]
    assert all(b <= a for a, b in zip(per_ion, per_ion[1:]))
    totals = [cm.fluorescence_counts(n) for n in range(10)]
    assert all(b > a for a, b in zip(totals, totals[1:]))
