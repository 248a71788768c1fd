"""Motional excitation of transported ions.

Coherent amplitudes are reported in the frame of the well minimum,
``alpha = sqrt(m w / 2 hbar) * (dz + i * dz_dot / w)``, so a free
oscillation evolves as ``alpha(t) = alpha(0) exp(-i w t)``.
"""
from __future__ import annotations

import cmath
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import root

from . import _backend, quadrature
from .constants import DEFAULT_CONSTANTS, PhysicalConstants
from .crystal_modes import IonCrystal, ModeSpectrum, coulomb_hessian, energy_hessian, \
    equilibrium_positions
from .errors import CollisionError, ConvergenceError, EscapeError, RangeError
from .trap_model import AxialPotential, ElectrodeBasis
from .waveform_synth import TransportProfile, VoltageWaveform

INTEGRATOR_RTOL = 1e-10
INTEGRATOR_ATOL_Z = 1e-13  # m
MIN_SPACING = 1e-9  # m
QUAD_RTOL = 1e-10
PANELS_PER_PERIOD = 50

_PROFILE_CODES = {"constant_velocity": 0, "sine_squared": 1, "min_jerk_poly5": 2}


@dataclass(frozen=True)
class CoherentAmplitude:
    alpha: complex
    mode_index: int = 0
    omega: float = float("nan")
    frame: str = "well"

    @property
    def nbar(self):
        return abs(self.alpha) ** 2

    def to_dict(self):
        return {"mode_index": self.mode_index, "omega": self.omega,
                "re_alpha": self.alpha.real, "im_alpha": self.alpha.imag, "nbar": self.nbar}


@dataclass(frozen=True)
class TrajectoryState:
    t: float
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        z = np.atleast_1d(np.asarray(self.positions, dtype=float)).copy()
        v = np.atleast_1d(np.asarray(self.velocities, dtype=float)).copy()
        if z.shape != v.shape or z.ndim != 1:
            raise ValueError("positions and velocities must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(v))):
            raise ValueError("trajectory state must be finite")
        z.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "positions", z)
        object.__setattr__(self, "velocities", v)
        object.__setattr__(self, "t", float(self.t))

    @property
    def n_ions(self):
        return self.positions.size


@dataclass(frozen=True)
class DrivePulse:
    """Uniform field ``E0 cos(omega (t - t_start) + phi_E)`` lasting ``t_E``."""
    E0: float
    t_E: float
    phi_E: float
    omega: float

    def __post_init__(self):
        if not self.t_E > 0:
            raise ValueError("pulse duration t_E must be positive")


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    positions: np.ndarray  # (n_times, n_ions)
    velocities: np.ndarray
    n_steps: int = 0
    backend: str = field(default="", compare=False)

    def __len__(self):
        return self.times.size

    def state(self, k):
        return TrajectoryState(self.times[k], self.positions[k], self.velocities[k])

    @property
    def final(self):
        return self.state(-1)

    @property
    def states(self):
        return [self.state(k) for k in range(len(self))]


# -- analytic amplitudes ------------------------------------------------------------

def alpha_impulsive(v, omega, t_T, constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Amplitude after constant-velocity transport with sudden start and stop."""
    if not omega > 0:
        raise ValueError("omega must be positive")
    phase = omega * t_T
    # a phase within a few ulp of 2 pi N is a whole number of periods
    turns = round(phase / (2 * math.pi))
    if v == 0 or abs(phase - 2 * math.pi * turns) <= 8 * math.ulp(phase):
        return CoherentAmplitude(0j, 0, omega)
    one_minus = 2.0 * math.sin(0.5 * phase) * 1j * cmath.exp(-0.5j * phase)
    alpha = constants.alpha_scale(omega) * 1j * (v / omega) * one_minus
    return CoherentAmplitude(complex(alpha), 0, omega)


def alpha_transport_quadrature(z0_dot: Callable, omega, t_T,
                               constants: PhysicalConstants = DEFAULT_CONSTANTS,
                               rtol=QUAD_RTOL, breakpoints: Sequence[float] = ()):
    """Amplitude at ``t_T`` for a well whose centre moves with velocity ``z0_dot``.

    ``alpha = -sqrt(m w / 2 hbar) exp(-i w t_T) * int_0^t_T z0_dot(t) exp(i w t) dt``
    """
    if not omega > 0:
        raise ValueError("omega must be positive")
    if not t_T > 0:
        raise ValueError("t_T must be positive")
    max_panel = 2 * math.pi / omega / PANELS_PER_PERIOD
    integral = quadrature.integrate(lambda t: z0_dot(t) * np.exp(1j * omega * t), 0.0, t_T,
                                    max_panel=max_panel, rtol=rtol, breakpoints=breakpoints)
    alpha = -constants.alpha_scale(omega) * cmath.exp(-1j * omega * t_T) * complex(integral)
    return CoherentAmplitude(alpha, 0, omega)


def alpha_in_flight(profile: TransportProfile, omega, times,
                    constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Co-moving-frame amplitude at each of ``times`` during a transport."""
    out = []
    for t in np.atleast_1d(times):
        t = float(t)
        if t <= 0:
            out.append(0j)
            continue
        out.append(alpha_transport_quadrature(profile.velocity, omega, t, constants).alpha)
    return np.array(out)


def alpha_from_state(dz, dz_dot, omega, constants: PhysicalConstants = DEFAULT_CONSTANTS):
    return complex(constants.alpha_scale(omega) * (dz + 1j * dz_dot / omega))


# -- trajectory integration -------------------------------------------------------

def _waveform_params(wf: VoltageWaveform, basis: ElectrodeBasis, constants):
    if len(wf.electrode_names) != basis.n_electrodes:
        raise ValueError("waveform and basis electrode counts differ")
    kspec = basis.kernel_spec()
    params = {"source": 0, "basis_kind": kspec["kind"], "wf_samples": wf.samples,
              "wf_t0": wf.t0, "wf_dt": wf.dac_period, "q_over_m": constants.q_over_m}
    params.update({k: v for k, v in kspec.items() if k != "kind"})
    return params


def _add_drive(params, pulse: DrivePulse | None, t_start, constants):
    if pulse is None:
        return
    params.update(drive_acc=constants.q_over_m * pulse.E0, drive_omega=pulse.omega,
                  drive_phi=pulse.phi_E, t_on=float(t_start), t_off=float(t_start) + pulse.t_E)


def _run(params, stops, init: TrajectoryState, domain, omega_hint, rtol, atol_z, atol_v,
         max_steps):
    if atol_v is None:
        atol_v = atol_z * omega_hint
    params["omega_hint"] = omega_hint
    z0 = init.positions
    if z0.size > 1 and np.any(np.diff(z0) <= 0):
        raise ValueError("initial positions must be strictly increasing")
    lo, hi = domain
    if np.any(z0 < lo) or np.any(z0 > hi):
        raise EscapeError("initial state outside the axial domain", init)
    zs, vs, status, i_last, n_steps = _backend.integrate(
        params, stops, z0, init.velocities, rtol=rtol, atol_z=atol_z, atol_v=atol_v,
        max_steps=max_steps, domain=domain, min_spacing=MIN_SPACING)
    if status != _backend.STATUS_OK:
        last = TrajectoryState(stops[i_last], zs[i_last], vs[i_last])
        if status == _backend.STATUS_ESCAPED:
            raise EscapeError(f"ion left the axial domain near t = {last.t:.4e} s", last)
        if status == _backend.STATUS_COLLIDED:
            raise CollisionError(f"ion spacing fell below {MIN_SPACING:g} m near "
                                 f"t = {last.t:.4e} s", last)
        raise ConvergenceError(f"trajectory integration failed (status {status}) after "
                               f"t = {last.t:.4e} s")
    return Trajectory(np.asarray(stops, dtype=float), zs, vs, n_steps, _backend.NAME)


def _stops(t_from, t_to, grid=None, extra=()):
    pts = [t_from, t_to, *extra]
    if grid is not None:
        pts.extend(grid)
    pts = np.unique(np.asarray(pts, dtype=float))
    return pts[(pts >= t_from) & (pts <= t_to)]


def integrate_classical(wf: VoltageWaveform, basis: ElectrodeBasis, init: TrajectoryState,
                        constants: PhysicalConstants = DEFAULT_CONSTANTS, t_end=None,
                        t_eval=None, pulse: DrivePulse | None = None, pulse_start=None,
                        omega_hint=2 * math.pi * 2e6, rtol=INTEGRATOR_RTOL,
                        atol_z=INTEGRATOR_ATOL_Z, atol_v=None, max_steps=50_000_000,
                        coulomb=False) -> Trajectory:
    """Integrate ``m z'' = -q dU/dz`` through the waveform.

    The voltages are linear in time between DAC samples and held after the
    last one; every DAC sample is an integrator stop, so the steps never
    straddle a kink in the force. States are returned at the DAC samples (or
    at ``t_eval``) from ``init.t`` to ``t_end`` (default: waveform end).
    """
    params = _waveform_params(wf, basis, constants)
    if coulomb:
        params["coulomb"] = constants.coulomb_k * constants.elementary_charge * \
            constants.q_over_m
    t_from = init.t
    t_to = wf.t0 + wf.duration if t_end is None else float(t_end)
    if t_to < t_from:
        raise ValueError("t_end precedes the initial state")
    extra = list(t_eval) if t_eval is not None else []
    if pulse is not None:
        start = t_to if pulse_start is None else float(pulse_start)
        _add_drive(params, pulse, start, constants)
        extra += [start, start + pulse.t_E]
        t_to = max(t_to, start + pulse.t_E)
    stops = _stops(t_from, t_to, wf.times, extra)
    traj = _run(params, stops, init, basis.domain, omega_hint, rtol, atol_z, atol_v, max_steps)
    if t_eval is None:
        return traj
    keep = np.isin(traj.times, np.asarray(list(t_eval), dtype=float))
    return Trajectory(traj.times[keep], traj.positions[keep], traj.velocities[keep],
                      traj.n_steps, traj.backend)


def integrate_crystal(wf: VoltageWaveform, basis: ElectrodeBasis, init: TrajectoryState,
                      constants: PhysicalConstants = DEFAULT_CONSTANTS, **kwargs) -> Trajectory:
    """As :func:`integrate_classical` with pairwise Coulomb repulsion."""
    if init.n_ions < 2:
        raise ValueError("integrate_crystal needs at least two ions")
    return integrate_classical(wf, basis, init, constants, coulomb=True, **kwargs)


def integrate_moving_well(profile: TransportProfile, omega, init: TrajectoryState,
                          constants: PhysicalConstants = DEFAULT_CONSTANTS, t_end=None,
                          t_eval=None, pulse: DrivePulse | None = None, pulse_start=None,
                          rtol=INTEGRATOR_RTOL, atol_z=INTEGRATOR_ATOL_Z, atol_v=None,
                          max_steps=50_000_000, domain=(-math.inf, math.inf)) -> Trajectory:
    """Ions in an ideal harmonic well of fixed ``omega`` whose centre follows ``profile``.

    Coulomb repulsion is included when more than one ion is given.
    """
    params = {"source": 1, "omega2": omega * omega, "profile": _PROFILE_CODES[profile.kind],
              "z_start": profile.z_start, "z_end": profile.z_end, "t_T": profile.duration}
    if init.n_ions > 1:
        params["coulomb"] = constants.coulomb_k * constants.elementary_charge * \
            constants.q_over_m
    t_from = init.t
    t_to = profile.duration if t_end is None else float(t_end)
    extra = [0.0, profile.duration] + (list(t_eval) if t_eval is not None else [])
    if pulse is not None:
        start = t_to if pulse_start is None else float(pulse_start)
        _add_drive(params, pulse, start, constants)
        extra += [start, start + pulse.t_E]
        t_to = max(t_to, start + pulse.t_E)
    stops = _stops(t_from, t_to, None, extra)
    traj = _run(params, stops, init, domain, omega, rtol, atol_z, atol_v, max_steps)
    if t_eval is None:
        return traj
    keep = np.isin(traj.times, np.asarray(list(t_eval), dtype=float))
    return Trajectory(traj.times[keep], traj.positions[keep], traj.velocities[keep],
                      traj.n_steps, traj.backend)


# -- mode projection ----------------------------------------------------------------

def harmonic_crystal(n_ions, omega, center=0.0, constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Equilibrium and normal modes of ``n_ions`` in an ideal harmonic well."""
    if n_ions < 1:
        raise ValueError("n_ions must be at least 1")
    m = constants.ion_mass
    if n_ions == 1:
        z = np.array([float(center)])
    else:
        # dimensionless force balance u_i = sum_j sign(u_i - u_j) / (u_i - u_j)^2
        def resid(u):
            d = u[:, None] - u[None, :]
            np.fill_diagonal(d, np.inf)
            return u - np.sum(np.sign(d) / d ** 2, axis=1)
        guess = np.linspace(-1.0, 1.0, n_ions) * n_ions ** 0.56
        sol = root(resid, guess, tol=1e-14)
        if np.max(np.abs(resid(sol.x))) > 1e-12:
            raise ConvergenceError("harmonic crystal equilibrium did not converge")
        length = (constants.coulomb_k * constants.elementary_charge ** 2
                  / (m * omega ** 2)) ** (1.0 / 3.0)
        z = center + length * np.sort(sol.x)
    hess = m * omega ** 2 * np.eye(n_ions) + (coulomb_hessian(z, constants) if n_ions > 1 else 0)
    lam, vecs = np.linalg.eigh(hess / m)
    vecs = vecs.T.copy()
    for row in vecs:
        s = row.sum()
        if (s if abs(s) > 1e-12 else row[np.argmax(np.abs(row))]) < 0:
            row *= -1
    labels = tuple({0: "COM", 1: "stretch"}.get(k, f"higher-{k}") for k in range(n_ions))
    crystal = IonCrystal(z, np.full(n_ions, m))
    return crystal, ModeSpectrum(np.sqrt(lam), vecs, labels)


def extract_mode_alphas(final_state: TrajectoryState, equilibrium: IonCrystal,
                        spectrum: ModeSpectrum,
                        constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Project the displacement from equilibrium onto each normal mode."""
    n = final_state.n_ions
    if equilibrium.n_ions != n or spectrum.mode_vectors.shape != (n, n):
        raise ValueError("state, equilibrium and spectrum dimensions differ")
    dz = final_state.positions - equilibrium.positions
    dv = final_state.velocities
    out = []
    for k, (w, u) in enumerate(zip(spectrum.frequencies, spectrum.mode_vectors)):
        scale = math.sqrt(constants.ion_mass * w / (2 * constants.hbar))
        out.append(CoherentAmplitude(complex(scale * (u @ dz + 1j * (u @ dv) / w)), k, float(w),
                                     "lab"))
    return out


def extract_well_alphas(final_state: TrajectoryState, pot: AxialPotential,
                        constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Per-ion amplitudes for ions held in separate wells of a static potential.

    Each ion is referred to its own site frequency (diagonal of the crystal
    Hessian); the residual Coulomb coupling between distant wells is ignored.
    """
    crystal = equilibrium_positions(pot, final_state.n_ions, final_state.positions, constants)
    h = energy_hessian(pot, crystal.positions, constants)
    out = []
    for i in range(final_state.n_ions):
        w = math.sqrt(h[i, i] / constants.ion_mass)
        a = alpha_from_state(final_state.positions[i] - crystal.positions[i],
                             final_state.velocities[i], w, constants)
        out.append(CoherentAmplitude(a, i, w, "site"))
    return out


# -- compensation ---------------------------------------------------------------------

def _phase_integral(x, t):
    """int_0^t exp(i x s) ds, stable for small ``x``."""
    y = x * t
    if abs(y) < 1e-8:
        return t * (1 + 0.5j * y)
    return t * complex(np.expm1(1j * y)) / (1j * y)


def displacement_from_pulse(pulse: DrivePulse, well_omega,
                            constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Phase-space displacement of a uniform-field pulse, including the counter-rotating term."""
    if pulse.E0 == 0:
        return CoherentAmplitude(0j, 0, well_omega)
    w, wd, phi, t_e = well_omega, pulse.omega, pulse.phi_E, pulse.t_E
    integral = 0.5 * (cmath.exp(1j * phi) * _phase_integral(w + wd, t_e)
                      + cmath.exp(-1j * phi) * _phase_integral(w - wd, t_e))
    pref = 1j * constants.elementary_charge * pulse.E0 / math.sqrt(
        2 * constants.ion_mass * constants.hbar * w)
    return CoherentAmplitude(complex(pref * integral), 0, well_omega)


def compensation_pulse(alpha_target, well_omega, max_E0=100.0,
                       constants: PhysicalConstants = DEFAULT_CONSTANTS, max_periods=10_000):
    """Resonant pulse whose displacement cancels ``alpha_target``.

    The pulse lasts a whole number ``M`` of trap periods, which removes the
    counter-rotating contribution exactly; the smallest ``M`` whose field
    amplitude stays within ``max_E0`` is used.
    """
    alpha = alpha_target.alpha if isinstance(alpha_target, CoherentAmplitude) \
        else complex(alpha_target)
    if not abs(alpha) > 0:
        raise ValueError("target amplitude must be non-zero")
    if not well_omega > 0:
        raise ValueError("well_omega must be positive")
    period = 2 * math.pi / well_omega
    g = math.sqrt(2 * constants.ion_mass * constants.hbar * well_omega)
    # |alpha_E| = q E0 t_E / (2 g) on resonance
    min_periods = 2 * g * abs(alpha) / (constants.elementary_charge * max_E0 * period)
    m = max(1, math.ceil(min_periods * (1 - 1e-12)))
    if m > max_periods:
        raise RangeError(f"compensation needs E0 > {max_E0} V/m within {max_periods} periods")
    t_e = m * period
    e0 = 2 * g * abs(alpha) / (constants.elementary_charge * t_e)
    if e0 > max_E0:
        m += 1
        t_e = m * period
        e0 = 2 * g * abs(alpha) / (constants.elementary_charge * t_e)
    phi = math.remainder(-(cmath.phase(alpha) + 0.5 * math.pi), 2 * math.pi)
    return DrivePulse(E0=e0, t_E=t_e, phi_E=phi, omega=well_omega)


def refine_compensation(simulate: Callable[[DrivePulse], complex], alpha_target, well_omega,
                        max_E0=100.0, constants: PhysicalConstants = DEFAULT_CONSTANTS,
                        tol=1e-6, max_iter=4):
    """Correct the pulse target against a simulation of the real dynamics.

    In an anharmonic well the harmonic design leaves a residual of order
    ``|alpha| * amplitude / length scale``. ``simulate(pulse)`` returns the
    amplitude left after ``pulse``; the target is shifted by that residual
    until ``|residual| < tol``. Returns ``(pulse, residual, history)`` where
    ``history`` lists ``|residual|`` per iteration (the first entry is the
    plain analytic pulse).
    """
    target = complex(alpha_target.alpha if isinstance(alpha_target, CoherentAmplitude)
                     else alpha_target)
    history = []
    for _ in range(max_iter + 1):
        pulse = compensation_pulse(target, well_omega, max_E0, constants)
        resid = complex(simulate(pulse))
        history.append(abs(resid))
        if abs(resid) < tol:
            break
        # the pulse displaces by -target, so the residual adds to the target
        target += resid
    return pulse, resid, history


# -- squeezing ------------------------------------------------------------------------

def estimate_squeezing(omega_of_t: Callable[[float], float], t_end, t_start=0.0,
                       breakpoints: Sequence[float] = (), rtol=1e-11):
    """Bogoliubov ``|beta|`` accumulated by a time-dependent trap frequency.

    The mode function starting as ``exp(-i w1 t) / sqrt(2 w1)`` is propagated
    through ``x'' + w(t)^2 x = 0``; its negative-frequency content with
    respect to the final frequency gives ``beta``. Integration restarts at
    each breakpoint so that steps in ``w`` are handled exactly.
    """
    if not t_end > t_start:
        raise ValueError("t_end must exceed t_start")
    w1 = float(omega_of_t(t_start))
    w2 = float(omega_of_t(t_end))
    probe = np.linspace(t_start, t_end, 257)
    if min(w1, w2, min(float(omega_of_t(t)) for t in probe)) <= 0:
        raise ValueError("omega_of_t must stay positive")
    # time in units of 1/w1 keeps the state O(1)
    scale = w1

    def rhs(tau, y):
        w = omega_of_t(t_start + tau / scale) / scale
        return [y[2], y[3], -w * w * y[0], -w * w * y[1]]

    x0 = 1 / math.sqrt(2.0)
    y = np.array([x0, 0.0, 0.0, -x0])  # re x, im x, re x', im x' in scaled units
    edges = sorted({t_start, t_end, *[b for b in breakpoints if t_start < b < t_end]})
    for a, b in zip(edges[:-1], edges[1:]):
        sol = solve_ivp(rhs, ((a - t_start) * scale, (b - t_start) * scale), y, method="DOP853",
                        rtol=rtol, atol=rtol * 1e-2)
        if not sol.success:
            raise ConvergenceError(f"squeezing integration failed: {sol.message}")
        y = sol.y[:, -1]
    x = complex(y[0], y[1])
    xd = complex(y[2], y[3])
    r = w2 / scale
    return abs(x - 1j * xd / r) * math.sqrt(r / 2)


# -- file output ------------------------------------------------------------------------

def write_trajectory_csv(path, traj: Trajectory):
    n = traj.positions.shape[1]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s"] + [f"z{i + 1}_m" for i in range(n)] + [f"v{i + 1}_mps" for i in range(n)])
        for t, z, v in zip(traj.times, traj.positions, traj.velocities):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in z] + [repr(float(x)) for x in v])


def excitation_report(alphas: Sequence[CoherentAmplitude]):
    return [{"omega": a.omega, "re_alpha": a.alpha.real, "im_alpha": a.alpha.imag,
             "nbar": a.nbar} for a in alphas]


def write_excitation_json(path, alphas: Sequence[CoherentAmplitude]):
    Path(path).write_text(json.dumps({"modes": excitation_report(alphas)}, indent=2) + "\n")
