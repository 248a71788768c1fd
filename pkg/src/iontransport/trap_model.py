"""Axial trap potential as a voltage-weighted superposition of electrode basis
functions, plus extraction of local well parameters.

Convention: potentials are kept in volts. An ion of charge q and mass m in
the potential U(z) has energy q*U(z), so the axial secular frequency of a
well is ``omega = sqrt(q * U''(z0) / m)``. Every module uses this relation.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline, PPoly

from .constants import DEFAULT_CONSTANTS, PhysicalConstants
from .errors import ConvergenceError, DomainError, FitError, NoWellError, ParseError

UM = 1e-6

DEFAULT_ELECTRODES = ("O1", "A", "X", "B", "O2")
DEFAULT_SPACING = 185 * UM
DEFAULT_WIDTH = 100 * UM
TRAP_SCHEMA = "iontransport.trap/1"
MIN_TABLE_SAMPLES = 200
QUARTIC_STENCIL = 33


# probabilists' Hermite polynomials: d^k/du^k exp(-u^2/2) = (-1)^k He_k(u) exp(-u^2/2)
_HERMITE_E = (
    lambda u: np.ones_like(u),
    lambda u: u,
    lambda u: u * u - 1.0,
    lambda u: u * (u * u - 3.0),
    lambda u: (u * u - 6.0) * u * u + 3.0,
)


class ElectrodeBasis:
    """Per-electrode axial potential (volts at unit applied voltage).

    Three kinds are supported:

    ``gaussian``
        phi_i(z) = exp(-(z - c_i)^2 / (2 w_i^2)), analytic.
    ``ppoly``
        piecewise polynomials (scipy ``PPoly``), used for natural cubic
        splines through tabulated samples and for exact polynomial test
        potentials.

    Instances are treated as immutable.
    """

    def __init__(self, names, kind, domain, centers=None, widths=None, ppolys=None):
        self.electrode_names = tuple(names)
        self.kind = kind
        self.domain = (float(domain[0]), float(domain[1]))
        if not self.domain[0] < self.domain[1]:
            raise ValueError("axial domain must satisfy z_min < z_max")
        n = len(self.electrode_names)
        if kind == "gaussian":
            self.centers = np.asarray(centers, dtype=float).reshape(n)
            self.widths = np.broadcast_to(np.asarray(widths, dtype=float), (n,)).copy()
            if np.any(self.widths <= 0):
                raise ValueError("gaussian widths must be positive")
            self.ppolys = None
        elif kind == "ppoly":
            if len(ppolys) != n:
                raise ValueError("need one piecewise polynomial per electrode")
            self.ppolys = tuple(ppolys)
            for pp in self.ppolys:
                if pp.x[0] > self.domain[0] + 1e-15 or pp.x[-1] < self.domain[1] - 1e-15:
                    raise ValueError("tabulated basis does not cover the axial domain")
            self.centers = None
            self.widths = None
        else:
            raise ValueError(f"unknown basis kind {kind!r}")

    # -- constructors -----------------------------------------------------
    @classmethod
    def default(cls, spacing=DEFAULT_SPACING, width=DEFAULT_WIDTH, names=DEFAULT_ELECTRODES,
                domain=None):
        n = len(names)
        centers = (np.arange(n) - (n - 1) / 2) * spacing
        if domain is None:
            half = (n + 1) / 2 * spacing
            domain = (-half, half)
        return cls(names, "gaussian", domain, centers=centers, widths=width)

    @classmethod
    def polynomial(cls, coefficients, domain, names=None):
        """One electrode per coefficient list (ascending powers of z)."""
        coefficients = [np.atleast_1d(np.asarray(c, dtype=float)) for c in coefficients]
        if names is None:
            names = [f"E{i}" for i in range(len(coefficients))]
        ppolys = []
        for c in coefficients:
            # PPoly stores descending powers about the left breakpoint
            shifted = np.polynomial.polynomial.Polynomial(c)
            x0 = float(domain[0])
            local = shifted(np.polynomial.polynomial.Polynomial([x0, 1.0]))
            desc = local.coef[::-1].reshape(-1, 1)
            ppolys.append(PPoly(desc, np.array([domain[0], domain[1]], dtype=float),
                                extrapolate=False))
        return cls(names, "ppoly", domain, ppolys=ppolys)

    @classmethod
    def tabulated(cls, names, tables, domain=None):
        """Natural cubic splines through ``(z, volts)`` samples per electrode."""
        ppolys = []
        lo, hi = -np.inf, np.inf
        for name, (z, v) in zip(names, tables):
            z = np.asarray(z, dtype=float)
            v = np.asarray(v, dtype=float)
            if z.size < MIN_TABLE_SAMPLES:
                raise ValueError(f"electrode {name}: need at least {MIN_TABLE_SAMPLES} samples, "
                                 f"got {z.size}")
            if np.any(np.diff(z) <= 0):
                raise ValueError(f"electrode {name}: z samples must be strictly increasing")
            spline = CubicSpline(z, v, bc_type="natural", extrapolate=False)
            ppolys.append(PPoly(spline.c, spline.x, extrapolate=False))
            lo, hi = max(lo, z[0]), min(hi, z[-1])
        if domain is None:
            domain = (lo, hi)
        elif domain[0] < lo or domain[1] > hi:
            raise ValueError("requested domain exceeds tabulated range")
        return cls(names, "ppoly", domain, ppolys=ppolys)

    # -- evaluation -------------------------------------------------------
    @property
    def n_electrodes(self):
        return len(self.electrode_names)

    def index(self, name):
        return self.electrode_names.index(name)

    def check_domain(self, z):
        z = np.asarray(z, dtype=float)
        # comparisons with NaN are false, so this also rejects non-finite input
        if not ((z >= self.domain[0]) & (z <= self.domain[1])).all():
            bad = z[(z < self.domain[0]) | (z > self.domain[1]) | ~np.isfinite(z)]
            raise DomainError(f"z = {bad.ravel()[0]:.6e} m outside axial domain "
                              f"[{self.domain[0]:.6e}, {self.domain[1]:.6e}]")
        return z

    def evaluate(self, z, order=0):
        """Matrix of phi_i^{(order)}(z), shape ``z.shape + (n_electrodes,)``."""
        z = self.check_domain(z)
        if self.kind == "gaussian":
            u = (z[..., None] - self.centers) / self.widths
            poly = _HERMITE_E[order](u)
            return (-1) ** order * poly / self.widths ** order * np.exp(-0.5 * u * u)
        cols = []
        for pp in self.ppolys:
            f = pp if order == 0 else pp.derivative(order)
            cols.append(np.nan_to_num(f(z)))
        return np.stack(cols, axis=-1)

    def kernel_spec(self):
        """Flat arrays describing the basis for the trajectory kernels."""
        if self.kind == "gaussian":
            return {"kind": 0, "centers": self.centers, "widths": self.widths}
        kmax = max(pp.c.shape[0] for pp in self.ppolys)
        mmax = max(pp.c.shape[1] for pp in self.ppolys)
        n = self.n_electrodes
        coef = np.zeros((n, kmax, mmax))
        brk = np.full((n, mmax + 1), np.inf)
        counts = np.zeros(n, dtype=np.int64)
        for i, pp in enumerate(self.ppolys):
            k, m = pp.c.shape
            coef[i, kmax - k:, :m] = pp.c
            brk[i, :m + 1] = pp.x
            counts[i] = m
        return {"kind": 1, "coef": coef, "breaks": brk, "counts": counts}


@dataclass(frozen=True)
class AxialPotential:
    basis: ElectrodeBasis
    voltages: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.voltages, dtype=float).copy()
        if v.shape != (self.basis.n_electrodes,):
            raise ValueError(f"expected {self.basis.n_electrodes} voltages, got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "voltages", v)

    def __call__(self, z, order=0):
        return eval_potential(self, z, order)

    def with_voltages(self, voltages):
        return AxialPotential(self.basis, voltages)


@dataclass(frozen=True)
class WellParams:
    z0: float
    omega: float
    a: float
    b: float
    curvature: float = field(default=float("nan"), compare=False)

    @property
    def frequency_hz(self):
        return self.omega / (2 * math.pi)


def eval_potential(p: AxialPotential, z, order=0):
    """Sum_i V_i phi_i^{(order)}(z) in V, V/m or V/m^2."""
    if order not in (0, 1, 2, 3, 4):
        raise ValueError("order must be 0..4")
    return p.basis.evaluate(z, order) @ p.voltages


def omega_from_curvature(curvature, constants: PhysicalConstants = DEFAULT_CONSTANTS):
    return math.sqrt(constants.q_over_m * curvature)


def curvature_from_omega(omega, constants: PhysicalConstants = DEFAULT_CONSTANTS):
    return omega * omega / constants.q_over_m


def _newton_minimum(p, seed_z, max_iter, grad_tol, max_step):
    lo, hi = p.basis.domain
    z = float(seed_z)
    for _ in range(max_iter):
        if not lo <= z <= hi:
            raise NoWellError(f"well search left the axial domain (z = {z:.4e} m)")
        g = float(eval_potential(p, z, 1))
        c = float(eval_potential(p, z, 2))
        if abs(g) < grad_tol and c > 0:
            return z, c
        if c > 0:
            step = -g / c
        else:
            # concave here: walk downhill
            step = -math.copysign(max_step, g) if g != 0 else max_step
        step = max(-max_step, min(max_step, step))
        z_new = z + step
        if z_new == z:
            # step below float resolution; accept if gradient is at its roundoff floor
            if c > 0:
                return z, c
        z = z_new
    raise ConvergenceError(f"Newton well search from {seed_z:.4e} m did not converge "
                           f"in {max_iter} steps")


def find_well(p: AxialPotential, seed_z, constants: PhysicalConstants = DEFAULT_CONSTANTS,
              half_width=None, max_iter=100, grad_tol=1e-9):
    """Locate the local minimum near ``seed_z`` and characterise it."""
    lo, hi = p.basis.domain
    if not lo <= seed_z <= hi:
        raise DomainError(f"seed {seed_z:.4e} m outside axial domain")
    max_step = (hi - lo) / 40
    z0, curv = _newton_minimum(p, seed_z, max_iter, grad_tol, max_step)
    if not curv > 0:
        raise NoWellError(f"no sign-definite minimum near {seed_z:.4e} m")
    omega = omega_from_curvature(curv, constants)
    if half_width is None:
        half_width = default_half_width(p.basis)
    half_width = min(half_width, 0.999 * (z0 - lo), 0.999 * (hi - z0))
    if half_width > 0:
        _, b, _ = fit_quartic(p, z0, half_width)
    else:
        b = float("nan")
    return WellParams(z0=z0, omega=omega, a=0.5 * curv, b=b, curvature=curv)


def default_half_width(basis: ElectrodeBasis):
    if basis.kind == "gaussian" and basis.n_electrodes > 1:
        spacing = float(np.min(np.diff(np.sort(basis.centers))))
        return 0.4 * spacing
    return 0.4 * DEFAULT_SPACING


def fit_quartic(p: AxialPotential, center, half_width, n_points=QUARTIC_STENCIL):
    """Least-squares fit of U(z) - U(center) to a*dz^2 + b*dz^4.

    Returns ``(a, b, rms_residual_volts)`` over a symmetric stencil of
    ``n_points`` equally spaced samples.
    """
    if not half_width > 0:
        raise ValueError("half_width must be positive")
    lo, hi = p.basis.domain
    if center - half_width < lo or center + half_width > hi:
        raise DomainError("quartic fit window leaves the axial domain")
    x = np.linspace(-1.0, 1.0, n_points)
    y = eval_potential(p, center + half_width * x, 0) - float(eval_potential(p, center, 0))
    design = np.column_stack([x ** 2, x ** 4])
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < 2:
        raise FitError("degenerate quartic stencil (singular normal equations)")
    resid = y - design @ coef
    a = coef[0] / half_width ** 2
    b = coef[1] / half_width ** 4
    return float(a), float(b), float(np.sqrt(np.mean(resid ** 2)))


# -- trap definition files ----------------------------------------------------

def read_sample_table(path):
    path = Path(path)
    if not path.exists():
        raise ParseError("sample table not found", path)
    zs, vs = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["z_m", "phi_V"]:
            raise ParseError("expected header 'z_m,phi_V'", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                z, v = (float(c) for c in row)
            except ValueError:
                raise ParseError(f"malformed row {row!r}", path, lineno) from None
            zs.append(z)
            vs.append(v)
    z = np.array(zs)
    if z.size and np.any(np.diff(z) <= 0):
        raise ParseError("z_m column must be strictly increasing", path)
    return z, np.array(vs)


def write_sample_table(path, z, phi):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z_m", "phi_V"])
        for zi, vi in zip(z, phi):
            w.writerow([repr(float(zi)), repr(float(vi))])


_TRAP_KEYS = {"schema", "electrodes", "basis", "domain_um", "ion_mass_u"}


def load_trap(path):
    """Read a trap definition JSON file -> ``(ElectrodeBasis, PhysicalConstants)``."""
    path = Path(path)
    if not path.exists():
        raise ParseError("trap file not found", path)
    try:
        trap_def = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    return trap_from_dict(trap_def, base_dir=path.parent, source=path)


def trap_from_dict(trap_def, base_dir=".", source=None):
    unknown = set(trap_def) - _TRAP_KEYS
    if unknown:
        raise ParseError(f"unknown trap keys {sorted(unknown)}", source)
    if trap_def.get("schema", TRAP_SCHEMA) != TRAP_SCHEMA:
        raise ParseError(f"unsupported schema {trap_def.get('schema')!r}", source)
    names = tuple(trap_def.get("electrodes", DEFAULT_ELECTRODES))
    constants = PhysicalConstants.for_mass_u(trap_def.get("ion_mass_u", 9.0121831))
    domain = trap_def.get("domain_um")
    domain = None if domain is None else (domain[0] * UM, domain[1] * UM)
    bspec = dict(trap_def.get("basis", {"type": "gaussian"}))
    kind = bspec.pop("type", "gaussian")
    if kind == "gaussian":
        width = bspec.pop("width_um", DEFAULT_WIDTH / UM) * UM
        if "centers_um" in bspec:
            centers = np.asarray(bspec.pop("centers_um"), dtype=float) * UM
            if domain is None:
                raise ParseError("explicit centers require domain_um", source)
            basis = ElectrodeBasis(names, "gaussian", domain, centers=centers, widths=width)
        else:
            spacing = bspec.pop("spacing_um", DEFAULT_SPACING / UM) * UM
            basis = ElectrodeBasis.default(spacing, width, names, domain)
    elif kind == "tabulated":
        tables = bspec.pop("tables")
        data = [read_sample_table(Path(base_dir) / tables[name]) for name in names]
        basis = ElectrodeBasis.tabulated(names, data, domain)
    else:
        raise ParseError(f"unknown basis type {kind!r}", source)
    if bspec:
        raise ParseError(f"unknown basis keys {sorted(bspec)}", source)
    return basis, constants


def default_trap_dict():
    return {
        "schema": TRAP_SCHEMA,
        "electrodes": list(DEFAULT_ELECTRODES),
        "basis": {"type": "gaussian", "spacing_um": DEFAULT_SPACING / UM,
                  "width_um": DEFAULT_WIDTH / UM},
        "domain_um": [-3 * DEFAULT_SPACING / UM, 3 * DEFAULT_SPACING / UM],
        "ion_mass_u": 9.0121831,
    }
