"""Equilibrium configurations and axial normal modes of linear ion crystals,
and partitioning of a crystal by a separation wedge."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .constants import DEFAULT_CONSTANTS, PhysicalConstants
from .errors import EquilibriumError, InstabilityError, TopologyError
from .trap_model import AxialPotential, eval_potential, find_well

GRAD_TOL = 1e-18  # N
TIE_TOL = 1e-9  # m
N_CHECKPOINTS = 64


@dataclass(frozen=True)
class IonCrystal:
    positions: np.ndarray
    masses: np.ndarray
    stable: bool = True

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 1 or pos.size == 0:
            raise ValueError("positions must be a non-empty 1-D array")
        if np.any(np.diff(pos) <= 0):
            raise ValueError("ion positions must be strictly increasing")
        pos.setflags(write=False)
        m = np.broadcast_to(np.asarray(self.masses, dtype=float), pos.shape).copy()
        m.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "masses", m)

    @property
    def n_ions(self):
        return self.positions.size


@dataclass(frozen=True)
class ModeSpectrum:
    frequencies: np.ndarray  # rad/s, ascending
    mode_vectors: np.ndarray  # rows are modes
    labels: tuple

    def __len__(self):
        return self.frequencies.size


def coulomb_gradient(z, constants):
    kq2 = constants.coulomb_k * constants.elementary_charge ** 2
    d = z[:, None] - z[None, :]
    np.fill_diagonal(d, np.inf)
    return -kq2 * np.sum(np.sign(d) / d ** 2, axis=1)


def coulomb_hessian(z, constants):
    kq2 = constants.coulomb_k * constants.elementary_charge ** 2
    d = np.abs(z[:, None] - z[None, :])
    np.fill_diagonal(d, np.inf)
    off = -2.0 * kq2 / d ** 3
    h = off.copy()
    np.fill_diagonal(h, -off.sum(axis=1))
    return h


def total_energy(pot, z, constants=DEFAULT_CONSTANTS):
    q = constants.elementary_charge
    kq2 = constants.coulomb_k * q ** 2
    e = q * float(np.sum(eval_potential(pot, z, 0)))
    if z.size > 1:
        d = np.abs(z[:, None] - z[None, :])
        np.fill_diagonal(d, np.inf)
        e += 0.5 * kq2 * float(np.sum(1.0 / d))
    return e


def energy_gradient(pot, z, constants=DEFAULT_CONSTANTS):
    q = constants.elementary_charge
    return q * eval_potential(pot, z, 1) + coulomb_gradient(z, constants)


def energy_hessian(pot, z, constants=DEFAULT_CONSTANTS):
    q = constants.elementary_charge
    return np.diag(q * eval_potential(pot, z, 2)) + coulomb_hessian(z, constants)


def _is_pd(h):
    try:
        np.linalg.cholesky(h)
        return True
    except np.linalg.LinAlgError:
        return False


def _max_order_step(z, dz):
    """Largest fraction of ``dz`` that keeps every gap above half its size."""
    if z.size < 2:
        return 1.0
    gap = np.diff(z)
    dgap = np.diff(dz)
    shrinking = dgap < 0
    if not np.any(shrinking):
        return 1.0
    return float(min(1.0, np.min(0.5 * gap[shrinking] / -dgap[shrinking])))


def equilibrium_positions(pot: AxialPotential, n_ions, seed=None,
                          constants: PhysicalConstants = DEFAULT_CONSTANTS,
                          max_iter=500) -> IonCrystal:
    """Minimise the crystal energy by damped Newton iteration from ``seed``."""
    if n_ions < 1:
        raise ValueError("n_ions must be at least 1")
    if seed is None:
        raise ValueError("a sorted seed configuration is required")
    z = np.array(seed, dtype=float)
    if z.shape != (n_ions,):
        raise ValueError(f"seed must hold {n_ions} positions")
    if np.any(np.diff(z) <= 0):
        raise ValueError("seed positions must be strictly increasing")
    lo, hi = pot.basis.domain
    span = (hi - lo) / 20
    energy = total_energy(pot, z, constants)
    prev_g = math.inf
    for _ in range(max_iter):
        g = energy_gradient(pot, z, constants)
        gnorm = float(np.max(np.abs(g)))
        # below tolerance and no longer improving: roundoff floor reached
        if gnorm < GRAD_TOL and gnorm > 0.5 * prev_g:
            break
        prev_g = gnorm
        h = energy_hessian(pot, z, constants)
        if _is_pd(h):
            dz = -np.linalg.solve(h, g)
        else:
            # shift the spectrum to obtain a descent direction
            lam = np.linalg.eigvalsh(h)
            shift = -lam[0] + 1e-3 * max(abs(lam[-1]), 1e-30)
            dz = -np.linalg.solve(h + shift * np.eye(n_ions), g)
        big = float(np.max(np.abs(dz)))
        step = _max_order_step(z, dz)
        if big * step > span:
            step = span / big
        while True:
            trial = z + step * dz
            inside = trial.min() >= lo and trial.max() <= hi
            if inside:
                e_trial = total_energy(pot, trial, constants)
                # near convergence energy differences drop below roundoff
                if e_trial <= energy or step * big < 1e-10:
                    break
            step *= 0.5
            if step * big < 1e-16:
                break
        if not inside:
            raise EquilibriumError("crystal left the axial domain during relaxation")
        if np.array_equal(trial, z):
            break
        z, energy = trial, e_trial
    else:
        g = energy_gradient(pot, z, constants)
        if float(np.max(np.abs(g))) >= GRAD_TOL:
            raise EquilibriumError(f"equilibrium not reached in {max_iter} iterations "
                                   f"(|grad| = {np.max(np.abs(g)):.3e} N)")
    g = energy_gradient(pot, z, constants)
    if float(np.max(np.abs(g))) >= GRAD_TOL:
        raise EquilibriumError(f"equilibrium gradient {np.max(np.abs(g)):.3e} N above tolerance")
    stable = _is_pd(energy_hessian(pot, z, constants))
    if not stable:
        warnings.warn("equilibrium is not a stable minimum (Hessian not positive definite)",
                      RuntimeWarning, stacklevel=2)
    return IonCrystal(positions=z, masses=np.full(n_ions, constants.ion_mass), stable=stable)


def harmonic_seed(center, omega, n_ions, constants=DEFAULT_CONSTANTS):
    """Approximate positions of ``n_ions`` in a harmonic well (for seeding)."""
    if n_ions == 1:
        return np.array([float(center)])
    length = (constants.coulomb_k * constants.elementary_charge ** 2
              / (constants.ion_mass * omega ** 2)) ** (1.0 / 3.0)
    # approximate scaled positions; accurate to a few percent for n <= 20
    u = np.linspace(-1.0, 1.0, n_ions)
    width = 1.05 * n_ions ** 0.56 * length
    return center + width * np.sin(np.pi / 2 * u * 0.95)


def crystal_in_well(pot, n_ions, seed_z, constants=DEFAULT_CONSTANTS):
    well = find_well(pot, seed_z, constants)
    return equilibrium_positions(pot, n_ions, harmonic_seed(well.z0, well.omega, n_ions, constants),
                                 constants)


def _label(vec):
    signs = np.sign(vec[np.abs(vec) > 1e-6 * np.max(np.abs(vec))])
    changes = int(np.sum(signs[1:] != signs[:-1]))
    return {0: "COM", 1: "stretch"}.get(changes, f"higher-{changes}")


def mode_spectrum(pot: AxialPotential, crystal: IonCrystal,
                  constants: PhysicalConstants = DEFAULT_CONSTANTS) -> ModeSpectrum:
    z = crystal.positions
    h = energy_hessian(pot, z, constants)
    sqrt_m = np.sqrt(crystal.masses)
    scaled = h / np.outer(sqrt_m, sqrt_m)
    lam, vecs = np.linalg.eigh(scaled)
    if lam[0] <= 0:
        raise InstabilityError(f"negative mode eigenvalue {lam[0]:.4e} s^-2",
                               mode_vector=vecs[:, 0].copy(), eigenvalue=float(lam[0]))
    vecs = vecs.T.copy()
    for row in vecs:
        s = row.sum()
        pivot = s if abs(s) > 1e-12 else row[np.argmax(np.abs(row))]
        if pivot < 0:
            row *= -1
    labels = tuple(_label(v) for v in vecs)
    return ModeSpectrum(frequencies=np.sqrt(lam), mode_vectors=vecs, labels=labels)


# -- partitioning ------------------------------------------------------------

PotentialFamily = Callable[[float, float], AxialPotential]


def find_wedge(pot: AxialPotential, window, n_grid=801):
    """Position of the potential maximum separating two wells inside ``window``."""
    z = np.linspace(window[0], window[1], n_grid)
    u = eval_potential(pot, z, 0)
    k = int(np.argmax(u))
    if k == 0 or k == n_grid - 1:
        raise TopologyError("no wedge maximum between the final wells")
    res = minimize_scalar(lambda x: -float(eval_potential(pot, x, 0)),
                          bounds=(z[k - 1], z[k + 1]), method="bounded",
                          options={"xatol": 1e-13})
    zw = float(res.x)
    if not float(eval_potential(pot, zw, 2)) < 0:
        raise TopologyError("potential extremum in wedge window is not a maximum")
    return zw


def track_crystal(pot_family: PotentialFamily, n_ions, offset, seed_z=0.0,
                  constants=DEFAULT_CONSTANTS, n_checkpoints=N_CHECKPOINTS):
    """Quasi-static equilibria along the family at evenly spaced checkpoints."""
    pot0 = pot_family(0.0, offset)
    crystal = crystal_in_well(pot0, n_ions, seed_z, constants)
    path = [crystal]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for s in np.linspace(0.0, 1.0, n_checkpoints)[1:]:
            crystal = equilibrium_positions(pot_family(float(s), offset), n_ions,
                                            crystal.positions, constants)
            path.append(crystal)
    return path


def partition_count(pot_family: PotentialFamily, n_ions, offset, wedge_window,
                    seed_z=0.0, constants=DEFAULT_CONSTANTS, n_checkpoints=N_CHECKPOINTS):
    """Number of ions that end left and right of the separation wedge.

    Sign convention: with the default electrode order a positive offset on
    the right-hand outer electrode pushes the crystal left, so the left count
    is non-decreasing in ``offset``.
    """
    path = track_crystal(pot_family, n_ions, offset, seed_z, constants, n_checkpoints)
    z_final = path[-1].positions
    zw = find_wedge(pot_family(1.0, offset), wedge_window)
    ties = np.abs(z_final - zw) < TIE_TOL
    if np.any(ties):
        warnings.warn("ion sits on the wedge maximum; assigned to the left", RuntimeWarning,
                      stacklevel=2)
    left = int(np.sum((z_final < zw) | ties))
    return left, n_ions - left


def fluorescence_counts(n_left, counts_per_ion=10.0, droop=0.03):
    return counts_per_ion * n_left * (1.0 - droop * (n_left - 1)) if n_left > 0 else 0.0


def partition_scan(pot_family: PotentialFamily, n_ions, offsets: Sequence[float], wedge_window,
                   seed_z=0.0, constants=DEFAULT_CONSTANTS, counts_per_ion=10.0, droop=0.03,
                   n_checkpoints=N_CHECKPOINTS):
    offsets = [float(o) for o in offsets]
    if any(b < a for a, b in zip(offsets, offsets[1:])):
        raise ValueError("offsets must be sorted")
    rows = []
    for off in offsets:
        left, _ = partition_count(pot_family, n_ions, off, wedge_window, seed_z, constants,
                                  n_checkpoints)
        rows.append((off, left, fluorescence_counts(left, counts_per_ion, droop)))
    return rows
