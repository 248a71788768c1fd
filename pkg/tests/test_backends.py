"""Parity between the compiled trajectory kernel and the pure-Python fallback.

Tags: [DERIVED] independent oracle, [TRIVIAL] identity.
"""
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from iontransport import _backend, _pykernels
from iontransport import motion_dynamics as md
from iontransport import waveform_synth as ws
from iontransport.constants import DEFAULT_CONSTANTS as C
from iontransport.trap_model import AxialPotential, find_well

TWO_PI = 2 * math.pi
T_T = 8e-6
OMEGA = TWO_PI * 31 / (2 * T_T)

compiled = pytest.mark.skipif(not _backend.compiled_available(),
                              reason="compiled kernel not built")


@pytest.fixture(scope="module")
def transport(basis):
    profile = ws.TransportProfile("sine_squared", -185e-6, 185e-6, T_T)
    wf = ws.synth_transport(basis, profile, OMEGA)
    params = md._waveform_params(wf, basis, C)
    params["omega_hint"] = OMEGA
    z0 = find_well(AxialPotential(basis, wf.samples[0]), -185e-6).z0
    return params, wf.times, z0


def both(params, stops, z0, v0, **kw):
    from iontransport import _kernels
    kw.setdefault("domain", (-555e-6, 555e-6))
    kw.setdefault("atol_v", 1e-13 * OMEGA)
    fast = _kernels.integrate(dict(params), stops, np.asarray(z0, float),
                              np.asarray(v0, float), **kw)
    slow = _pykernels.integrate(dict(params), stops, np.asarray(z0, float),
                                np.asarray(v0, float), **kw)
    return fast, slow


@compiled
def test_single_ion_parity(transport):
    """[TRIVIAL] both kernels take the same steps and agree to rounding."""
    params, stops, z0 = transport
    fast, slow = both(params, stops, [z0], [0.0])
    assert fast[2] == slow[2] == _backend.STATUS_OK
    assert fast[4] == slow[4]
    scale = 185e-6
    assert np.max(np.abs(fast[0] - slow[0])) < 1e-12 * scale
    assert np.max(np.abs(fast[1] - slow[1])) < 1e-12 * scale * OMEGA


@compiled
def test_two_ion_parity_with_drive(transport):
    """[TRIVIAL] Coulomb coupling and a drive pulse are treated identically."""
    params, stops, z0 = transport
    params = dict(params, coulomb=C.coulomb_k * C.elementary_charge * C.q_over_m,
                  drive_acc=C.q_over_m * 5.0, drive_omega=OMEGA, drive_phi=0.3,
                  t_on=1e-6, t_off=3e-6)
    d = 4e-6
    fast, slow = both(params, stops[:101], [z0 - d, z0 + d], [0.0, 0.0])
    assert fast[2] == slow[2] == _backend.STATUS_OK
    assert np.max(np.abs(fast[0] - slow[0])) < 1e-12 * 185e-6


@compiled
def test_status_codes_agree(transport):
    """[TRIVIAL] escape and collision are reported at the same stop."""
    params, stops, z0 = transport
    fast, slow = both(params, stops[:50], [z0], [2e4])
    assert fast[2] == slow[2] == _backend.STATUS_ESCAPED
    assert fast[3] == slow[3]
    fast, slow = both(params, stops[:50], [z0 - 1e-6, z0 + 1e-6], [3e4, -3e4])
    assert fast[2] == slow[2] == _backend.STATUS_COLLIDED
    assert fast[3] == slow[3]


def test_fallback_integrator_meets_physics_oracle(basis, monkeypatch):
    """[DERIVED] the pure-Python kernel alone reproduces the tuned-transport result."""
    monkeypatch.setattr(_backend, "integrate", _pykernels.integrate)
    monkeypatch.setattr(_backend, "NAME", "python")
    profile = ws.TransportProfile("sine_squared", -185e-6, 185e-6, T_T)
    wf = ws.synth_transport(basis, profile, OMEGA)
    start = find_well(AxialPotential(basis, wf.samples[0]), -185e-6)
    traj = md.integrate_classical(wf, basis, md.TrajectoryState(0.0, [start.z0], [0.0]),
                                  omega_hint=OMEGA)
    assert traj.backend == "python"
    end = find_well(AxialPotential(basis, wf.samples[-1]), 185e-6)
    a = md.alpha_from_state(traj.final.positions[0] - end.z0, traj.final.velocities[0],
                            end.omega)
    assert abs(a) ** 2 < 0.05


def _backend_name(env_extra):
    env = dict(os.environ, **env_extra)
    out = subprocess.run([sys.executable, "-c",
                          "from iontransport import _backend; print(_backend.NAME)"],
                         env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_fallback_selected_by_environment():
    """[TRIVIAL] the environment switch forces the pure-Python kernel."""
    assert _backend_name({"IONTRANSPORT_PURE_PYTHON": "1"}) == "python"
    env = {k: v for k, v in os.environ.items() if k != "IONTRANSPORT_PURE_PYTHON"}
    expected = "compiled" if _backend.compiled_available() else "python"
    out = subprocess.run([sys.executable, "-c",
                          "from iontransport import _backend; print(_backend.NAME)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
