"""Sideband Rabi-flopping signals for motional Fock populations, and fits of
thermal or coherent population models to measured traces."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares
from scipy.special import eval_genlaguerre, gammaln, xlogy

from .errors import FitError, ParseError

TAIL_TOL = 1e-6
N_CAP = 400
SIDEBANDS = ("MAS", "MSS")
MODELS = ("thermal", "coherent")
GRID_POINTS = 50
GRAD_TOL = 1e-10
REL_GRAD_TOL = 1e-6


# -- Fock distributions ------------------------------------------------------

@dataclass(frozen=True)
class FockDistribution:
    populations: np.ndarray  # P_n for n = 0..n_max
    kind: str = "explicit"
    parameter: float | None = None  # nbar (thermal) or |alpha| (coherent)

    def __post_init__(self):
        p = np.array(self.populations, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("populations must be a non-empty 1-D array")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("populations must be finite and non-negative")
        total = float(p.sum())
        if not (1 - TAIL_TOL <= total <= 1 + 1e-12):
            raise ValueError(f"populations sum to {total:.9f}, outside [1 - 1e-6, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "populations", p)

    @property
    def n_max(self):
        return self.populations.size - 1

    @property
    def mean(self):
        return float(np.arange(self.populations.size) @ self.populations)


def _thermal_pops(nbar, n_max):
    n = np.arange(n_max + 1)
    if nbar == 0:
        return (n == 0).astype(float)
    return np.exp(n * math.log(nbar / (nbar + 1)) - math.log1p(nbar))


def _coherent_pops(alpha_mag, n_max):
    n = np.arange(n_max + 1)
    if alpha_mag == 0:
        return (n == 0).astype(float)
    lam = alpha_mag ** 2
    return np.exp(-lam + xlogy(n, lam) - gammaln(n + 1))


def _auto_n_max(pops_fn, x, mean):
    """Smallest ``n_max`` whose dropped tail holds < 1e-6 of both the
    probability and the mean."""
    p = pops_fn(x, N_CAP)
    n = np.arange(N_CAP + 1)
    mass_tail = 1.0 - np.cumsum(p)
    mean_tail = mean - np.cumsum(n * p)
    ok = np.nonzero((mass_tail < TAIL_TOL) & (mean_tail < TAIL_TOL))[0]
    if ok.size == 0:
        raise ValueError(f"distribution with mean {mean:g} does not fit below the "
                         f"n_max = {N_CAP} cap")
    return int(ok[0])


def _build(pops_fn, x, mean, n_max, kind):
    if n_max is None:
        n_max = _auto_n_max(pops_fn, x, mean)
    n_max = int(n_max)
    if not 0 <= n_max <= N_CAP:
        raise ValueError(f"n_max must lie in [0, {N_CAP}]")
    p = pops_fn(x, n_max)
    if 1.0 - p.sum() >= TAIL_TOL:
        raise ValueError(f"n_max = {n_max} truncates more than 1e-6 of the distribution")
    return FockDistribution(p, kind, float(x))


def thermal_dist(nbar, n_max=None) -> FockDistribution:
    """Geometric populations ``nbar^n / (nbar + 1)^(n + 1)``."""
    if not nbar >= 0:
        raise ValueError("nbar must be non-negative")
    return _build(_thermal_pops, float(nbar), float(nbar), n_max, "thermal")


def coherent_dist(alpha_mag, n_max=None) -> FockDistribution:
    """Poisson populations of a coherent state with amplitude ``|alpha|``."""
    a = abs(float(alpha_mag))
    return _build(_coherent_pops, a, a * a, n_max, "coherent")


def max_nbar(model, n_max=N_CAP):
    """Largest mean occupation the ``model`` family can represent below ``n_max``."""
    pops_fn = _thermal_pops if model == "thermal" else _coherent_pops
    to_param = (lambda m: m) if model == "thermal" else math.sqrt
    n = np.arange(n_max + 1)

    def fits(m):
        p = pops_fn(to_param(m), n_max)
        return 1.0 - p.sum() < TAIL_TOL and m - float(n @ p) < TAIL_TOL
    lo, hi = 0.0, float(n_max)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if fits(mid) else (lo, mid)
    return lo


# -- Rabi rates and traces ---------------------------------------------------

def _check_sideband(sideband):
    if sideband not in SIDEBANDS:
        raise ValueError(f"sideband must be one of {SIDEBANDS}")


def rabi_rate(n, sideband, omega0, eta):
    """Sideband Rabi rate from ``|n>`` (rad/s, magnitude); ``sideband`` is MAS or MSS.

    Uses the full matrix element ``<n|exp(i eta (a + a^dag))|n + 1>``,
    ``Omega0 exp(-eta^2/2) eta (n + 1)^(-1/2) L_n^1(eta^2)``.
    """
    _check_sideband(sideband)
    n = np.asarray(n)
    if np.any(n < 0):
        raise ValueError("n must be non-negative")
    lower = n if sideband == "MAS" else n - 1
    safe = np.maximum(lower, 0)
    x = eta * eta
    rate = omega0 * math.exp(-0.5 * x) * eta * np.abs(eval_genlaguerre(safe, 1, x)) \
        / np.sqrt(safe + 1.0)
    rate = np.where(lower < 0, 0.0, rate)
    return float(rate) if rate.ndim == 0 else rate


@dataclass(frozen=True)
class FloppingTrace:
    times: np.ndarray  # s
    p_down: np.ndarray
    sideband: str = "MAS"
    eta: float | None = None
    omega0: float | None = None  # rad/s
    gamma: float | None = None  # 1/s

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        p = np.array(self.p_down, dtype=float)
        if t.ndim != 1 or t.shape != p.shape or t.size == 0:
            raise ValueError("times and p_down must be matching non-empty 1-D arrays")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly ascending")
        if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
            raise ValueError("p_down must lie in [0, 1]")
        _check_sideband(self.sideband)
        t.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "p_down", p)


def _signal(pops, rates, gamma, t):
    osc = np.cos(2.0 * np.outer(t, rates)) @ pops
    return 0.5 * (1.0 + np.exp(-gamma * t) * osc)


def flopping_trace(dist: FockDistribution, sideband, omega0, eta, gamma, times,
                   repetitions=None, seed=None) -> FloppingTrace:
    """``P_down(t) = (1 + exp(-gamma t) sum_n P_n cos(2 Omega_n t)) / 2``.

    With ``repetitions`` set, each point is replaced by the fraction of
    ``repetitions`` binomial draws (projection noise) using ``seed``.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    t = np.asarray(times, dtype=float)
    rates = rabi_rate(np.arange(dist.n_max + 1), sideband, omega0, eta)
    p = np.clip(_signal(dist.populations, rates, gamma, t), 0.0, 1.0)
    if repetitions is not None:
        if int(repetitions) < 1:
            raise ValueError("repetitions must be positive")
        rng = np.random.default_rng(seed)
        p = rng.binomial(int(repetitions), p) / int(repetitions)
    return FloppingTrace(t, p, sideband, eta, omega0, gamma)


# -- fitting -----------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    model: str
    nbar: float
    nbar_sigma: float | None  # None when the covariance is unusable
    gamma: float
    gamma_sigma: float | None
    residual: float  # Euclidean norm of the residual vector
    omega0: float
    omega0_sigma: float | None = None  # set when omega0 was fitted
    grad_norm: float = 0.0

    @property
    def alpha(self):
        return math.sqrt(self.nbar) if self.model == "coherent" else None

    @property
    def alpha_sigma(self):
        if self.model != "coherent" or self.nbar_sigma is None or self.nbar == 0:
            return None
        return self.nbar_sigma / (2.0 * math.sqrt(self.nbar))

    def to_dict(self):
        out = {"model": self.model, "nbar": self.nbar, "nbar_sigma": self.nbar_sigma,
               "gamma": self.gamma, "residual": self.residual}
        if self.model == "coherent":
            out["alpha"] = self.alpha
            out["alpha_sigma"] = self.alpha_sigma
        if self.omega0_sigma is not None:
            out["omega0"] = self.omega0
            out["omega0_sigma"] = self.omega0_sigma
        return out


def model_pops(model, nbar, n_max=N_CAP):
    if model == "thermal":
        return _thermal_pops(nbar, n_max)
    if model == "coherent":
        return _coherent_pops(math.sqrt(nbar), n_max)
    raise ValueError(f"model must be one of {MODELS}")


def _covariance(jac, resid, n_par):
    """Residual-scaled ``(J^T J)^-1``; ``None`` if it is not positive."""
    dof = resid.size - n_par
    if dof <= 0:
        return None
    s2 = float(resid @ resid) / dof
    try:
        cov = np.linalg.inv(jac.T @ jac) * s2
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(cov)) or np.any(np.diag(cov) < 0):
        return None
    return cov


def fit_distribution(trace: FloppingTrace, model, omega0=None, eta=None, fit_omega0=False,
                     gamma_guess=None, nbar_range=(1e-3, None)) -> FitResult:
    """Least-squares fit of ``(nbar, gamma)`` (and optionally ``Omega0``) to ``trace``.

    A 50-point logarithmic grid in ``nbar`` (times a few decay rates) seeds a
    bounded trust-region refinement. The 1-sigma uncertainties come from the
    Jacobian at the optimum scaled by the residual variance.
    """
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    omega0 = trace.omega0 if omega0 is None else omega0
    eta = trace.eta if eta is None else eta
    if omega0 is None or eta is None:
        raise ValueError("Omega0 and eta must be known (argument or trace attribute)")
    t, y = trace.times, trace.p_down
    if t.size < 20:
        raise FitError("a fit needs at least 20 time samples")
    # at least two periods of the slowest populated rate up to moderate n
    if 2 * omega0 * eta * math.exp(-0.5 * eta * eta) * (t[-1] - t[0]) < 4 * math.pi:
        raise FitError("trace spans fewer than two flopping periods")
    n_max = N_CAP
    n = np.arange(n_max + 1)
    nb_hi = max_nbar(model, n_max)
    lo = nbar_range[0]
    hi = nb_hi if nbar_range[1] is None else min(nbar_range[1], nb_hi)
    span = t[-1] - t[0]

    unit_rates = rabi_rate(n, trace.sideband, 1.0, eta)

    def resid(par):
        nb, g = par[0], par[1]
        w0 = par[2] if fit_omega0 else omega0
        pops = model_pops(model, nb, n_max)
        # populations below 1e-18 do not change the signal at double precision
        keep = np.nonzero(pops > 1e-18)[0]
        sl = slice(keep[0], keep[-1] + 1) if keep.size else slice(0, 1)
        return _signal(pops[sl], w0 * unit_rates[sl], g, t) - y

    # coarse grid
    gammas = [gamma_guess] if gamma_guess is not None else [0.0] + [
        f / span for f in (0.3, 3.0)]
    best = None
    for nb in np.logspace(math.log10(lo), math.log10(min(hi, 50.0)), GRID_POINTS):
        for g in gammas:
            r = resid([nb, g, omega0])
            cost = float(r @ r)
            if best is None or cost < best[0]:
                best = (cost, nb, g)
    x0 = [best[1], best[2]] + ([omega0] if fit_omega0 else [])
    lower = [0.0, 0.0] + ([0.0] if fit_omega0 else [])
    upper = [hi, np.inf] + ([np.inf] if fit_omega0 else [])
    scale = [max(best[1], 1e-2), 1.0 / span] + ([omega0] if fit_omega0 else [])
    try:
        sol = least_squares(resid, x0, bounds=(lower, upper), x_scale=scale, method="trf",
                            xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    except (ValueError, FloatingPointError) as exc:
        raise FitError(f"refinement failed: {exc}", best={"nbar": best[1], "gamma": best[2]})
    # gradient of the cost in parameter units scaled by x_scale
    grad = (sol.jac.T @ sol.fun) * np.asarray(scale)
    active = sol.active_mask != 0  # parameters pinned on a bound
    grad = np.where(active, 0.0, grad)
    grad_norm = float(np.max(np.abs(grad), initial=0.0))
    # scale-free test for fits that leave a large residual (wrong model, noise)
    col = np.linalg.norm(sol.jac * np.asarray(scale), axis=0)
    cosine = float(np.max(np.abs(grad) / np.maximum(col * np.linalg.norm(sol.fun), 1e-300),
                          initial=0.0))
    if sol.status <= 0 or (grad_norm > GRAD_TOL and cosine > REL_GRAD_TOL):
        raise FitError(f"fit did not converge (status {sol.status}, |grad| = {grad_norm:.2e}, "
                       f"cosine {cosine:.1e}, x = {sol.x})",
                       best={"nbar": best[1], "gamma": best[2]})
    cov = _covariance(sol.jac, sol.fun, sol.x.size)
    sig = [None] * sol.x.size if cov is None else [float(math.sqrt(v)) for v in np.diag(cov)]
    return FitResult(model=model, nbar=float(sol.x[0]), nbar_sigma=sig[0],
                     gamma=float(sol.x[1]), gamma_sigma=sig[1],
                     residual=float(np.linalg.norm(sol.fun)),
                     omega0=float(sol.x[2]) if fit_omega0 else float(omega0),
                     omega0_sigma=sig[2] if fit_omega0 else None, grad_norm=grad_norm)


# -- files -------------------------------------------------------------------

def write_trace_csv(path, trace: FloppingTrace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "p_down"])
        for t, p in zip(trace.times, trace.p_down):
            w.writerow([repr(float(t)), repr(float(p))])


def read_trace_csv(path, sideband="MAS", eta=None, omega0=None) -> FloppingTrace:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read trace: {exc.strerror}", path) from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise ParseError("trace file is empty", path)
    if [c.strip() for c in rows[0]] != ["t_s", "p_down"]:
        raise ParseError("header must be 't_s,p_down'", path, 1)
    times, probs = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise ParseError(f"expected 2 columns, found {len(row)}", path, lineno)
        try:
            t, p = float(row[0]), float(row[1])
        except ValueError:
            raise ParseError(f"non-numeric value in {row!r}", path, lineno) from None
        if not (math.isfinite(t) and math.isfinite(p)) or not 0 <= p <= 1:
            raise ParseError("p_down must be a probability and t_s finite", path, lineno)
        if times and t <= times[-1]:
            raise ParseError("times must be strictly ascending", path, lineno)
        times.append(t)
        probs.append(p)
    if not times:
        raise ParseError("trace file holds no data rows", path)
    return FloppingTrace(np.array(times), np.array(probs), sideband, eta, omega0)
