"""Electrode-voltage waveform synthesis: constant-curvature transport and
quadratic-to-quartic separation ramps with adiabaticity-limited timing."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq, minimize_scalar

from .constants import DEFAULT_CONSTANTS
from .crystal_modes import (GRAD_TOL, IonCrystal, crystal_in_well, energy_gradient,
                            energy_hessian, equilibrium_positions, mode_spectrum,
                            total_energy)
from . import quadrature
from .errors import (BoundError, DomainError, DurationError, EquilibriumError,
                     InstabilityError, ParseError, SynthError, TopologyError)
from .trap_model import (AxialPotential, ElectrodeBasis, curvature_from_omega, default_half_width,
                         find_well, fit_quartic)

DAC_PERIOD = 20e-9
V_BOUND = 10.0
PROFILE_KINDS = ("constant_velocity", "sine_squared", "min_jerk_poly5")


# -- waveforms ------------------------------------------------------------------

@dataclass(frozen=True)
class VoltageWaveform:
    """Electrode voltages on a uniform DAC grid starting at ``t = 0``.

    Between samples the voltages are interpolated linearly in time; after the
    last sample they are held.
    """

    samples: np.ndarray  # (n_samples, n_electrodes)
    dac_period: float = DAC_PERIOD
    electrode_names: tuple = ("O1", "A", "X", "B", "O2")
    t0: float = 0.0

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[0] < 2:
            raise ValueError("a waveform needs at least two samples")
        if s.shape[1] != len(self.electrode_names):
            raise ValueError("sample width does not match electrode count")
        if not self.dac_period > 0:
            raise ValueError("dac_period must be positive")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "electrode_names", tuple(self.electrode_names))

    @property
    def times(self):
        return self.t0 + self.dac_period * np.arange(self.samples.shape[0])

    @property
    def n_periods(self):
        return self.samples.shape[0] - 1

    @property
    def duration(self):
        return self.n_periods * self.dac_period

    def voltages_at(self, t):
        x = (float(t) - self.t0) / self.dac_period
        if x <= 0:
            return self.samples[0].copy()
        if x >= self.n_periods:
            return self.samples[-1].copy()
        k = int(x)
        f = x - k
        return (1 - f) * self.samples[k] + f * self.samples[k + 1]

    def potential_at(self, basis, t):
        return AxialPotential(basis, self.voltages_at(t))

    def max_step(self):
        return float(np.max(np.abs(np.diff(self.samples, axis=0)))) if self.n_periods else 0.0

    def concatenate(self, other):
        if other.dac_period != self.dac_period:
            raise ValueError("DAC periods differ")
        if not np.allclose(other.samples[0], self.samples[-1], atol=1e-12):
            raise ValueError("waveforms are not continuous at the junction")
        return VoltageWaveform(np.vstack([self.samples, other.samples[1:]]), self.dac_period,
                               self.electrode_names, self.t0)

    def hold(self, duration):
        """Append a constant segment of at least ``duration`` seconds."""
        n = max(1, math.ceil(duration / self.dac_period - 1e-9))
        extra = np.repeat(self.samples[-1:], n, axis=0)
        return VoltageWaveform(np.vstack([self.samples, extra]), self.dac_period,
                               self.electrode_names, self.t0)


def write_waveform_csv(path, wf: VoltageWaveform):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s"] + [f"V_{n}" for n in wf.electrode_names])
        for t, row in zip(wf.times, wf.samples):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_waveform_csv(path) -> VoltageWaveform:
    path = Path(path)
    if not path.exists():
        raise ParseError("waveform file not found", path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "t_s" or len(header) < 2:
            raise ParseError("expected header 't_s,V_<name>,...'", path, 1)
        names = []
        for h in header[1:]:
            h = h.strip()
            if not h.startswith("V_"):
                raise ParseError(f"bad column name {h!r}", path, 1)
            names.append(h[2:])
        times, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} columns, got {len(row)}", path, lineno)
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise ParseError(f"malformed row {row!r}", path, lineno) from None
            times.append(vals[0])
            rows.append(vals[1:])
    if len(rows) < 2:
        raise ParseError("waveform needs at least two samples", path)
    times = np.array(times)
    dt = np.diff(times)
    period = float(np.mean(dt))
    if not period > 0 or np.max(np.abs(dt - period)) > 1e-6 * period:
        raise ParseError("time column is not a uniform grid", path)
    return VoltageWaveform(np.array(rows), period, tuple(names), float(times[0]))


# -- constrained voltage solve ------------------------------------------------

def well_constraints(basis: ElectrodeBasis, z0, omega, constants=DEFAULT_CONSTANTS):
    """Rows and right-hand side for U'(z0) = 0 and U''(z0) = m omega^2 / q."""
    rows = np.vstack([basis.evaluate(z0, 1), basis.evaluate(z0, 2)])
    rhs = np.array([0.0, curvature_from_omega(omega, constants)])
    return rows, rhs


def quartic_constraints(basis: ElectrodeBasis, center, a, b, half_width=None):
    """Rows and right-hand side fixing the fitted (a, b) about ``center``."""
    if half_width is None:
        half_width = default_half_width(basis)
    rows = np.zeros((2, basis.n_electrodes))
    for i in range(basis.n_electrodes):
        unit = np.zeros(basis.n_electrodes)
        unit[i] = 1.0
        ai, bi, _ = fit_quartic(AxialPotential(basis, unit), center, half_width)
        rows[:, i] = ai, bi
    return rows, np.array([a, b], dtype=float)


def solve_voltages(basis: ElectrodeBasis, targets, v_ref=None, bounds=V_BOUND,
                   constants=DEFAULT_CONSTANTS, rel_tol=1e-9):
    """Voltage vector closest to ``v_ref`` satisfying linear well constraints.

    ``targets`` is one target or a list of targets; each is a mapping with
    either ``z0``/``omega`` (a harmonic well) or ``center``/``a``/``b``
    (quartic expansion coefficients, with optional ``half_width``).
    """
    if isinstance(targets, dict):
        targets = [targets]
    n = basis.n_electrodes
    v_ref = np.zeros(n) if v_ref is None else np.asarray(v_ref, dtype=float)
    rows, rhs = [], []
    for tg in targets:
        if "omega" in tg:
            r, c = well_constraints(basis, tg["z0"], tg["omega"], constants)
        else:
            r, c = quartic_constraints(basis, tg["center"], tg["a"], tg["b"],
                                       tg.get("half_width"))
        rows.append(r)
        rhs.append(c)
    a_mat = np.vstack(rows)
    c_vec = np.concatenate(rhs)
    # row scaling keeps mixed units well conditioned
    scale = np.linalg.norm(a_mat, axis=1)
    scale[scale == 0] = 1.0
    a_s = a_mat / scale[:, None]
    c_s = c_vec / scale
    delta, *_ = np.linalg.lstsq(a_s, c_s - a_s @ v_ref, rcond=1e-12)
    v = v_ref + delta
    # one refinement pass removes residual roundoff
    delta2, *_ = np.linalg.lstsq(a_s, c_s - a_s @ v, rcond=1e-12)
    v = v + delta2
    resid = a_s @ v - c_s
    ref = np.maximum(np.abs(c_s), np.abs(a_s) @ np.abs(v))
    if np.any(np.abs(resid) > rel_tol * np.maximum(ref, 1e-300) + 1e-300):
        raise SynthError("well constraints are inconsistent for this electrode basis")
    check_bounds(basis, v, bounds)
    return v


def check_bounds(basis, v, bounds):
    lo, hi = (-bounds, bounds) if np.isscalar(bounds) else bounds
    bad = [name for name, x in zip(basis.electrode_names, v) if not lo <= x <= hi]
    if bad:
        raise BoundError(f"voltages outside [{lo}, {hi}] V on electrodes {', '.join(bad)}", bad)


# -- transport --------------------------------------------------------------------

@dataclass(frozen=True)
class TransportProfile:
    kind: str
    z_start: float
    z_end: float
    duration: float

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ValueError(f"profile kind must be one of {PROFILE_KINDS}")
        if not self.duration > 0:
            raise ValueError("transport duration must be positive")

    @property
    def distance(self):
        return self.z_end - self.z_start

    def _s(self, t):
        return np.clip(np.asarray(t, dtype=float) / self.duration, 0.0, 1.0)

    def position(self, t):
        s = self._s(t)
        if self.kind == "constant_velocity":
            shape = s
        elif self.kind == "sine_squared":
            shape = np.sin(0.5 * np.pi * s) ** 2
        else:
            shape = s ** 3 * (10 - 15 * s + 6 * s * s)
        return self.z_start + self.distance * shape

    def velocity(self, t):
        t = np.asarray(t, dtype=float)
        s = self._s(t)
        inside = (t >= 0) & (t <= self.duration)
        rate = self.distance / self.duration
        if self.kind == "constant_velocity":
            v = np.full_like(s, rate)
        elif self.kind == "sine_squared":
            v = rate * 0.5 * np.pi * np.sin(np.pi * s)
        else:
            v = rate * 30 * s * s * (1 - s) ** 2
        return np.where(inside, v, 0.0)

    def acceleration(self, t):
        t = np.asarray(t, dtype=float)
        s = self._s(t)
        inside = (t > 0) & (t < self.duration)
        rate = self.distance / self.duration ** 2
        if self.kind == "constant_velocity":
            acc = np.zeros_like(s)
        elif self.kind == "sine_squared":
            acc = rate * 0.5 * np.pi ** 2 * np.cos(np.pi * s)
        else:
            acc = rate * 60 * s * (1 - s) * (1 - 2 * s)
        return np.where(inside, acc, 0.0)

    def breakpoints(self):
        return (0.0, self.duration)


def synth_transport(basis: ElectrodeBasis, profile: TransportProfile, omega, n_steps=None,
                    v_ref=None, bounds=V_BOUND, dac_period=DAC_PERIOD, max_slew_V=None,
                    constants=DEFAULT_CONSTANTS) -> VoltageWaveform:
    """Constant-frequency well whose minimum follows ``profile``.

    Voltages are solved at ``n_steps + 1`` equally spaced instants (default:
    every DAC sample), each warm-started from the previous solution, then
    resampled linearly onto the DAC grid.
    """
    lo, hi = basis.domain
    for z in (profile.z_start, profile.z_end):
        if not lo <= z <= hi:
            raise DomainError(f"transport endpoint {z:.4e} m outside axial domain")
    n_periods = max(1, math.ceil(profile.duration / dac_period - 1e-9))
    t_dac = dac_period * np.arange(n_periods + 1)
    if n_steps is None:
        t_solve = t_dac
    else:
        t_solve = np.linspace(0.0, t_dac[-1], int(n_steps) + 1)
    z_path = profile.position(t_solve)
    v = v_ref
    solved = np.empty((t_solve.size, basis.n_electrodes))
    for k, z0 in enumerate(z_path):
        v = solve_voltages(basis, {"z0": float(z0), "omega": omega}, v, bounds, constants)
        solved[k] = v
    if t_solve is t_dac:
        samples = solved
    else:
        samples = np.column_stack([np.interp(t_dac, t_solve, solved[:, i])
                                   for i in range(basis.n_electrodes)])
    wf = VoltageWaveform(samples, dac_period, basis.electrode_names)
    if max_slew_V is not None and wf.max_step() > max_slew_V:
        raise BoundError(f"voltage step {wf.max_step():.3g} V exceeds slew bound {max_slew_V} V")
    return wf


def spectral_criterion(profile: TransportProfile, omega):
    """Fourier amplitude of the well velocity at ``omega`` over the transport."""
    if not omega > 0:
        raise ValueError("omega must be positive")
    if profile.distance == 0:
        return 0j
    t_t = profile.duration
    max_panel = 2 * math.pi / omega / 50
    return complex(quadrature.integrate(lambda t: profile.velocity(t) * np.exp(1j * omega * t),
                                        0.0, t_t, max_panel=max_panel, rtol=1e-13))


# -- adiabatic time parametrisation ----------------------------------------------------

FLAT_RATE = 1e6  # path units per second where nothing changes
DESIGN_MARGIN = 1e-3
N_GRID = 401


def _ramp_map(x, f):
    """Monotone map of [0, 1] onto [0, 1] whose slope rises from 0 to its plateau
    along a half cosine over the first and last fraction ``f``; slope <= 1 / (1 - f)."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    if f <= 0:
        return x
    head = 0.5 * (x - f / np.pi * np.sin(np.pi * x / f))
    tail_x = 1.0 - x
    tail = (1.0 - f) - 0.5 * (tail_x - f / np.pi * np.sin(np.pi * tail_x / f))
    mid = 0.5 * f + (x - f)
    h = np.where(x < f, head, np.where(x > 1.0 - f, tail, mid))
    return h / (1.0 - f)


@dataclass(frozen=True)
class AdiabaticSchedule:
    """Monotone time map ``s(t)`` for one stage of a path.

    ``t_knots`` is the natural (ramp-free) time at each ``s_knot``; the stage
    is played over ``duration`` with the path speed brought smoothly to zero
    at both ends over the fraction ``taper`` of the stage. The played map is
    never faster than the natural one.
    """
    s_knots: np.ndarray
    t_knots: np.ndarray
    eps: float
    taper: float = 0.0
    stretch: float = 1.0

    @property
    def natural_duration(self):
        return float(self.t_knots[-1] - self.t_knots[0])

    @property
    def duration(self):
        return self.natural_duration / (1.0 - self.taper) * self.stretch

    def s_at(self, t):
        x = np.asarray(t, dtype=float) / self.duration
        t_nat = self.t_knots[0] + self.natural_duration * _ramp_map(x, self.taper)
        return np.interp(t_nat, self.t_knots, self.s_knots)

    def stretched(self, duration):
        """Same schedule played uniformly slower to last ``duration`` seconds."""
        if duration < self.duration * (1 - 1e-12):
            raise ValueError("a schedule can only be slowed down")
        return AdiabaticSchedule(self.s_knots, self.t_knots, self.eps, self.taper,
                                 self.stretch * duration / self.duration)


def _spline_slope(s, y):
    """``|dy/ds|`` at the knots from a cubic spline (max over columns for 2-D ``y``)."""
    d = np.abs(CubicSpline(s, y)(s, 1))
    return d if d.ndim == 1 else np.max(d, axis=1)


def _cell_slope_max(s, u):
    """Largest ``|du/ds|`` of the cubic spline through ``(s, u)`` on each cell."""
    if np.ptp(u) == 0:
        return np.zeros(s.size - 1)
    spline = CubicSpline(s, u)
    der = np.abs(spline(s, 1))
    out = np.maximum(np.maximum(der[:-1], der[1:]), np.abs(np.diff(u)) / np.diff(s))
    for c in np.atleast_1d(spline.derivative(2).roots(extrapolate=False)):
        k = min(max(int(np.searchsorted(s, c) - 1), 0), s.size - 2)
        out[k] = max(out[k], abs(float(spline(c, 1))))
    return out


def _refined_grid(mode_freq, s0, s1, n_grid, tol=1e-4, max_rounds=24):
    """Grid on which the cell-wise slope bound of ``u = 1/omega`` has converged.

    Starting from ``n_grid`` uniform points, cells are bisected while halving
    them changes their slope bound by more than ``tol`` (relative to the
    largest slope on the path).
    """
    cache = {}

    def u_of(x):
        if x not in cache:
            w = float(mode_freq(float(x)))
            if not (math.isfinite(w) and w > 0):
                raise ValueError("mode frequency must stay positive along the path")
            cache[x] = 1.0 / w
        return cache[x]

    s = np.linspace(s0, s1, n_grid)
    u = np.array([u_of(x) for x in s])
    flagged = np.ones(s.size - 1, dtype=bool)
    for _ in range(max_rounds):
        if not flagged.any():
            break
        before = _cell_slope_max(s, u)
        mids = 0.5 * (s[:-1] + s[1:])[flagged]
        u_mid = np.array([u_of(x) for x in mids])
        s_new = np.concatenate([s, mids])
        order = np.argsort(s_new)
        s_new, u_new = s_new[order], np.concatenate([u, u_mid])[order]
        after = _cell_slope_max(s_new, u_new)
        scale = max(float(np.max(after)), 1e-300)
        # map refined cells back to their parent cell
        parent = np.searchsorted(s, s_new[:-1], side="right") - 1
        flagged = np.abs(after - before[parent]) / scale > tol
        s, u = s_new, u_new
    return s, u


def reparametrize_adiabatic(path: Callable[[float], np.ndarray] | None,
                            mode_freq: Callable[[float], float], eps, dac_period=DAC_PERIOD,
                            s_span=(0.0, 1.0), n_grid=N_GRID, max_slew=None,
                            displacement: Callable[[float], np.ndarray] | None = None,
                            speed_scale=None, taper=0.0) -> AdiabaticSchedule:
    """Time schedule keeping ``(1/omega^2)|d omega/dt| = |d(1/omega)/dt| <= eps``.

    ``mode_freq`` is sampled on a grid over ``s_span`` that is refined until
    the slope of ``u = 1/omega`` is resolved; every grid cell is then crossed
    at a constant rate no faster than ``eps / max|du/ds|`` over the cell.

    Optional extras, all of which only slow the schedule down:

    * ``max_slew`` caps ``ds/dt`` (path units per second); cells where the
      frequency does not change move at this rate (default :data:`FLAT_RATE`).
    * ``displacement`` (``s`` to ion equilibrium positions) with
      ``speed_scale`` (m/s) adds ``max|dz/ds| / (eps * speed_scale)`` to
      ``dt/ds``, so ions move no faster than ``eps * speed_scale``; the whole
      schedule then still scales as ``1/eps``.
    * ``taper`` brings the path speed smoothly to zero at both ends.

    ``path`` is accepted for symmetry with the voltage path and not evaluated.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not 0 <= taper < 0.5:
        raise ValueError("taper must lie in [0, 0.5)")
    s0, s1 = float(s_span[0]), float(s_span[1])
    if not s1 > s0:
        raise ValueError("s_span must be increasing")
    s, u = _refined_grid(mode_freq, s0, s1, int(n_grid))
    eps_eff = eps * (1.0 - DESIGN_MARGIN)
    ds = np.diff(s)
    cost = _cell_slope_max(s, u) / eps_eff  # seconds per unit s
    if displacement is not None and speed_scale:
        dz = _spline_slope(s, np.array([np.asarray(displacement(float(x)), dtype=float)
                                        for x in s]))
        cost = cost + np.maximum(dz[:-1], dz[1:]) / (eps * speed_scale)
    flat = cost == 0
    cost[flat] = 1.0 / (max_slew if max_slew is not None else FLAT_RATE)
    if max_slew is not None:
        cost = np.maximum(cost, 1.0 / max_slew)
    t = np.concatenate([[0.0], np.cumsum(ds * cost)])
    return AdiabaticSchedule(s, t, float(eps), float(taper))


def adiabaticity_certificate(schedule: AdiabaticSchedule, mode_freq, dac_period=DAC_PERIOD):
    """Largest ``|Delta(1/omega)| / Delta t`` between consecutive DAC samples.

    ``omega`` is recomputed directly at each sample of the schedule as played
    (its duration rounded up to whole DAC periods).
    """
    n = max(1, math.ceil(schedule.duration / dac_period - 1e-9))
    played = schedule.stretched(n * dac_period)
    t = dac_period * np.arange(n + 1)
    w = np.array([float(mode_freq(float(x))) for x in played.s_at(t)])
    return float(np.max(np.abs(np.diff(1.0 / w)) / np.diff(t)))


# -- separation ------------------------------------------------------------------------

DEFAULT_SPLIT_START = (2.433, -0.3763, -1.7089, -0.3831, 2.473)
DEFAULT_SPLIT_END = (4.441, -5.252, -0.649, -5.411, 5.952)


def _symmetrized(v):
    v = np.asarray(v, dtype=float)
    return 0.5 * (v + v[::-1])


@dataclass(frozen=True)
class SeparationRamp:
    """Targets and controls for splitting one well at ``z = 0`` into two at ``+-separation``.

    ``o2_ramp`` is added to O2 linearly over the whole path; ``x_offset`` and
    ``ab_differential`` (added to A, subtracted from B, half each) ramp in
    linearly during stage 2 only. ``speed_scale`` limits ion speed to
    ``eps * speed_scale`` and ``taper`` softens the start and end of each
    stage (see :func:`reparametrize_adiabatic`).
    """
    start_omega: float = 2 * math.pi * 2.0e6
    end_omega: float = 2 * math.pi * 2.8e6
    separation: float = 185e-6
    eps1: float = 0.025
    eps2: float = 0.015
    o2_ramp: float = 0.0
    o2_offset: float = 0.0
    x_offset: float = 0.0
    ab_differential: float = 0.0
    v_ref_start: tuple = DEFAULT_SPLIT_START
    v_ref_end: tuple = DEFAULT_SPLIT_END
    speed_scale: float | None = 200.0
    taper: float = 0.1
    max_duration: float = 1e-3
    max_slew: float | None = None
    n_grid: int = N_GRID

    def __post_init__(self):
        for name in ("eps1", "eps2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not self.separation > 0:
            raise ValueError("separation must be positive")


class ModeTracker:
    """Equilibrium and lowest axial mode of an ``n_ions`` crystal along a potential family.

    Equilibria are warm-started from the nearest previously solved path
    point, which keeps the crystal on a continuous branch.
    """

    def __init__(self, family: Callable[[float], AxialPotential], n_ions, seed_z=0.0,
                 constants=DEFAULT_CONSTANTS):
        self.family = family
        self.n_ions = n_ions
        self.constants = constants
        c0 = crystal_in_well(family(0.0), n_ions, seed_z, constants)
        self._s = [0.0]
        self._pos = [c0.positions]
        self._memo = {}

    def _newton(self, pot, z):
        """Plain Newton polish from a nearby seed; ``None`` if it does not settle."""
        prev = math.inf
        for _ in range(8):
            g = energy_gradient(pot, z, self.constants)
            gn = float(np.max(np.abs(g)))
            if gn < GRAD_TOL and gn > 0.5 * prev:
                return z
            prev = gn
            h = energy_hessian(pot, z, self.constants)
            try:
                step = np.linalg.solve(h, g)
            except np.linalg.LinAlgError:
                return None
            if np.max(np.abs(step)) > 0.05 * float(np.min(np.diff(z), initial=1e-3)):
                return None
            z = z - step
        return z if float(np.max(np.abs(energy_gradient(pot, z, self.constants)))) < GRAD_TOL \
            else None

    def _attempt(self, pot, seed):
        """Stable equilibrium near ``seed`` with its spectrum, or ``None``."""
        z = self._newton(pot, seed.copy())
        if z is None or not np.all(np.diff(z) > 0):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                try:
                    z = equilibrium_positions(pot, self.n_ions, seed, self.constants).positions
                except EquilibriumError:
                    return None
        crystal = IonCrystal(z, np.full(self.n_ions, self.constants.ion_mass))
        try:
            return crystal, mode_spectrum(pot, crystal, self.constants)
        except InstabilityError:
            return None  # settled on a saddle

    def _off_saddle(self, pot, seed):
        """Relax off a saddle along its unstable direction (the branch has ended)."""
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            z = equilibrium_positions(pot, self.n_ions, seed, self.constants).positions
        lam, vec = np.linalg.eigh(energy_hessian(pot, z, self.constants))
        step = 0.1 * float(np.min(np.diff(z))) * vec[:, 0]
        best = None
        for sign in (1.0, -1.0):
            out = self._attempt(pot, z + sign * step)
            if out is not None:
                e = total_energy(pot, out[0].positions, self.constants)
                if best is None or e < best[0]:
                    best = (e, out)
        if best is None:
            raise InstabilityError("no stable crystal configuration near the path",
                                   mode_vector=vec[:, 0].copy(), eigenvalue=float(lam[0]))
        return best[1]

    def _solve(self, s, depth=0):
        if s in self._memo:
            return self._memo[s]
        k = int(np.argmin(np.abs(np.asarray(self._s) - s)))
        pot = self.family(s)
        out = self._attempt(pot, self._pos[k])
        if out is None:
            if depth < 16 and abs(s - self._s[k]) > 1e-9:
                # continue along the path in smaller steps
                self._solve(0.5 * (s + self._s[k]), depth + 1)
                return self._solve(s, depth + 1)
            out = self._off_saddle(pot, self._pos[k])
        crystal, spectrum = out
        j = int(np.searchsorted(self._s, s))
        self._s.insert(j, s)
        self._pos.insert(j, crystal.positions)
        self._memo[s] = out
        return out

    def crystal(self, s):
        return self._solve(float(s))[0]

    def spectrum(self, s):
        return self._solve(float(s))[1]

    def positions(self, s):
        return self.crystal(s).positions

    def __call__(self, s):
        return float(self.spectrum(s).frequencies[0])


@dataclass(frozen=True)
class SeparationResult:
    waveform: VoltageWaveform
    v_start: np.ndarray
    v_end: np.ndarray
    s_boundary: float
    s_crossing: float
    b_at_crossing: float
    min_mode_frequency: float
    stage_durations: tuple  # seconds, before rounding to DAC periods
    stage_samples: tuple  # DAC periods per stage
    certificates: tuple  # max (1/omega^2)|d omega/dt| per stage
    eps: tuple
    well_omegas: tuple  # final left and right wells
    s_samples: np.ndarray = field(repr=False, compare=False)  # path parameter per DAC sample
    path: Callable = field(repr=False, compare=False)

    @property
    def duration(self):
        return self.waveform.duration

    def certificate_report(self):
        return {f"stage{k + 1}": {"eps": e, "max_rate": c, "duration_s": d,
                                  "ok": c <= e * (1 + 1e-6)}
                for k, (e, c, d) in enumerate(zip(self.eps, self.certificates,
                                                  self.stage_durations))}


def separation_endpoints(basis: ElectrodeBasis, ramp: SeparationRamp, bounds=V_BOUND,
                         constants=DEFAULT_CONSTANTS):
    """Start (single well at 0) and end (wells at +-separation) voltage sets."""
    v_start = solve_voltages(basis, {"z0": 0.0, "omega": ramp.start_omega},
                             _symmetrized(ramp.v_ref_start), bounds, constants)
    d = ramp.separation
    v_end = solve_voltages(basis, [{"z0": -d, "omega": ramp.end_omega},
                                   {"z0": d, "omega": ramp.end_omega}],
                           _symmetrized(ramp.v_ref_end), bounds, constants)
    return v_start, v_end


def _unit(basis, name):
    e = np.zeros(basis.n_electrodes)
    if name in basis.electrode_names:
        e[basis.index(name)] = 1.0
    return e


def separation_path(basis: ElectrodeBasis, ramp: SeparationRamp, v_start, v_end,
                    s_boundary=None):
    """Voltage path ``V(s)``; stage-2 controls are active only for ``s > s_boundary``."""
    for name, val in (("O2", ramp.o2_ramp), ("O2", ramp.o2_offset), ("X", ramp.x_offset), ("A", ramp.ab_differential),
                      ("B", ramp.ab_differential)):
        if val and name not in basis.electrode_names:
            raise ValueError(f"control needs an electrode named {name}")
    v_start = np.asarray(v_start, dtype=float)
    dv = np.asarray(v_end, dtype=float) - v_start
    o2 = ramp.o2_ramp * _unit(basis, "O2")
    o2_fixed = ramp.o2_offset * _unit(basis, "O2")
    late = ramp.x_offset * _unit(basis, "X") + 0.5 * ramp.ab_differential * (
        _unit(basis, "A") - _unit(basis, "B"))

    def path(s):
        s = float(s)
        v = v_start + s * dv + s * o2 + o2_fixed
        if s_boundary is not None and s > s_boundary and s_boundary < 1:
            v = v + (s - s_boundary) / (1 - s_boundary) * late
        return v
    return path


def synth_separation(basis: ElectrodeBasis, ramp: SeparationRamp = SeparationRamp(), n_ions=2,
                     bounds=V_BOUND, dac_period=DAC_PERIOD,
                     constants=DEFAULT_CONSTANTS) -> SeparationResult:
    """Two-stage quadratic-to-quartic split of an ``n_ions`` crystal centred at ``z = 0``.

    Stage 1 runs until the lowest mode frequency reaches its minimum
    (golden-section search over the path parameter); stage 2 completes the
    split. Each stage is timed by :func:`reparametrize_adiabatic` with its
    own bound and then stretched to a whole number of DAC periods.
    """
    if n_ions < 2:
        raise ValueError("separation timing needs at least two ions")
    v_start, v_end = separation_endpoints(basis, ramp, bounds, constants)
    base = separation_path(basis, ramp, v_start, v_end)
    half = default_half_width(basis)

    # topology: the quadratic coefficient at the centre must change sign while b > 0
    s_coarse = np.linspace(0.0, 1.0, 101)

    def a_b(s):
        a, b, _ = fit_quartic(AxialPotential(basis, base(s)), 0.0, half)
        return a, b
    ab = np.array([a_b(s) for s in s_coarse])
    if not ab[0, 0] > 0:
        raise TopologyError("separation does not start from a single harmonic well")
    neg = np.nonzero(ab[:, 0] < 0)[0]
    if neg.size == 0:
        raise TopologyError("quadratic coefficient never changes sign along the path")
    k = int(neg[0])
    s_cross = brentq(lambda s: a_b(s)[0], s_coarse[k - 1], s_coarse[k], xtol=1e-14)
    b_cross = a_b(s_cross)[1]
    if not b_cross > 0:
        raise TopologyError(f"quartic coefficient {b_cross:.3e} V/m^4 is not positive "
                            "where the quadratic term vanishes")

    # stage boundary: minimum of the lowest mode frequency
    tracker = ModeTracker(lambda s: AxialPotential(basis, base(s)), n_ions, 0.0, constants)
    w_coarse = np.array([tracker(s) for s in s_coarse])
    j = int(np.argmin(w_coarse))
    if j == 0 or j == s_coarse.size - 1:
        raise TopologyError("lowest mode frequency has no interior minimum along the path")
    try:
        res = minimize_scalar(tracker, bracket=(s_coarse[j - 1], s_coarse[j], s_coarse[j + 1]),
                              method="golden", tol=1e-10)
    except ValueError:
        # coarse samples not a valid bracket (cusp right at a sample)
        res = minimize_scalar(tracker, bounds=(s_coarse[j - 1], s_coarse[j + 1]),
                              method="bounded", options={"xatol": 1e-12})
    s_b = float(res.x)

    path = separation_path(basis, ramp, v_start, v_end, s_b)
    tracker = ModeTracker(lambda s: AxialPotential(basis, path(s)), n_ions, 0.0, constants)
    n1 = max(3, int(round(ramp.n_grid * s_b)))
    n2 = max(3, ramp.n_grid - n1 + 1)
    scheds = [reparametrize_adiabatic(path, tracker, eps, dac_period, span, n, ramp.max_slew,
                                      tracker.positions, ramp.speed_scale, ramp.taper)
              for eps, span, n in ((ramp.eps1, (0.0, s_b), n1), (ramp.eps2, (s_b, 1.0), n2))]
    total = sum(sc.duration for sc in scheds)
    if total > ramp.max_duration:
        raise DurationError(f"separation needs {total * 1e6:.1f} us, above the "
                            f"{ramp.max_duration * 1e6:.1f} us limit")
    samples, certs, counts, s_all = [], [], [], []
    for sched in scheds:
        m = max(1, math.ceil(sched.duration / dac_period - 1e-9))
        counts.append(m)
        s_k = sched.stretched(m * dac_period).s_at(dac_period * np.arange(m + 1))
        block = np.array([path(x) for x in s_k])
        samples.append(block if not samples else block[1:])
        s_all.append(s_k if not s_all else s_k[1:])
        certs.append(adiabaticity_certificate(sched, tracker, dac_period))
    samples = np.vstack(samples)
    for row in samples:
        check_bounds(basis, row, bounds)
    p_end = AxialPotential(basis, path(1.0))
    wells = (find_well(p_end, -ramp.separation, constants).omega,
             find_well(p_end, ramp.separation, constants).omega)
    wf = VoltageWaveform(samples, dac_period, basis.electrode_names)
    return SeparationResult(
        waveform=wf, v_start=v_start, v_end=path(1.0), s_boundary=s_b, s_crossing=float(s_cross),
        b_at_crossing=float(b_cross), min_mode_frequency=float(res.fun),
        stage_durations=tuple(sc.duration for sc in scheds), stage_samples=tuple(counts),
        certificates=tuple(certs), eps=(ramp.eps1, ramp.eps2), well_omegas=wells,
        s_samples=np.concatenate(s_all), path=path)


def partition_family(basis: ElectrodeBasis, ramp: SeparationRamp = SeparationRamp(),
                     electrode="O2", bounds=V_BOUND, constants=DEFAULT_CONSTANTS):
    """``(s, offset) -> AxialPotential`` along the separation path with ``offset``
    volts added to ``electrode`` throughout."""
    v_start, v_end = separation_endpoints(basis, ramp, bounds, constants)
    path = separation_path(basis, ramp, v_start, v_end)
    unit = np.zeros(basis.n_electrodes)
    unit[basis.index(electrode)] = 1.0

    def family(s, offset):
        return AxialPotential(basis, path(s) + offset * unit)
    return family
