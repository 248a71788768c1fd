"""Pure-Python trajectory kernel (reference implementation and fallback).

Mirrors ``_kernels.pyx`` step for step: embedded Dormand-Prince 5(4)
stepping with extended-precision state accumulation. Steps never straddle
an entry of ``t_stops``; the state is recorded at every stop.
"""
import math

import numpy as np

LD = np.longdouble

# Dormand-Prince 5(4) tableau
C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)

OK, ESCAPED, COLLIDED, MAX_STEPS, STEP_FLOOR = 0, 1, 2, 3, 4

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
# largest step in units of 1 / omega_hint; keeps tiny oscillations inside the
# region where the method does not amplify them
MAX_PHASE_STEP = 0.5


class ForceModel:
    """Acceleration field for ions of equal charge-to-mass ratio."""

    def __init__(self, params):
        self.p = params
        self.source = params["source"]
        if self.source == 0:
            self.basis_kind = params["basis_kind"]
            self.samples = np.asarray(params["wf_samples"], dtype=float)
            self.wf_t0 = params["wf_t0"]
            self.wf_dt = params["wf_dt"]
            self.qm = params["q_over_m"]
            if self.basis_kind == 0:
                self.centers = np.asarray(params["centers"], dtype=float)
                self.widths = np.asarray(params["widths"], dtype=float)
            else:
                self.coef = np.asarray(params["coef"], dtype=float)
                self.breaks = np.asarray(params["breaks"], dtype=float)
                self.counts = np.asarray(params["counts"], dtype=np.int64)
        else:
            self.omega2 = params["omega2"]
            self.profile = params["profile"]
            self.z_start = params["z_start"]
            self.z_end = params["z_end"]
            self.t_t = params["t_T"]
        self.drive_acc = params.get("drive_acc", 0.0)
        self.drive_omega = params.get("drive_omega", 0.0)
        self.drive_phi = params.get("drive_phi", 0.0)
        self.t_on = params.get("t_on", 0.0)
        self.t_off = params.get("t_off", 0.0)
        self.kc = params.get("coulomb", 0.0)

    def voltages(self, t):
        n = self.samples.shape[0] - 1
        x = (t - self.wf_t0) / self.wf_dt
        if x <= 0:
            return self.samples[0]
        if x >= n:
            return self.samples[n]
        k = int(x)
        if k >= n:
            k = n - 1
        f = x - k
        return (1 - f) * self.samples[k] + f * self.samples[k + 1]

    def basis_slope(self, z):
        """d phi_e / dz at each ion, shape (n_ions, n_electrodes)."""
        if self.basis_kind == 0:
            u = (z[:, None] - self.centers) / self.widths
            return -u / self.widths * np.exp(-0.5 * u * u)
        out = np.zeros((z.size, self.coef.shape[0]))
        kdeg = self.coef.shape[1] - 1
        for e in range(self.coef.shape[0]):
            m = self.counts[e]
            brk = self.breaks[e, :m + 1]
            idx = np.clip(np.searchsorted(brk, z, side="right") - 1, 0, m - 1)
            dx = z - brk[idx]
            c = self.coef[e][:, idx]
            acc = np.zeros(z.size)
            for j in range(kdeg):
                acc = acc * dx + (kdeg - j) * c[j]
            out[:, e] = acc
        return out

    def well_center(self, t):
        if t <= 0:
            return self.z_start
        if t >= self.t_t:
            return self.z_end
        s = t / self.t_t
        if self.profile == 0:
            shape = s
        elif self.profile == 1:
            shape = math.sin(0.5 * math.pi * s) ** 2
        else:
            shape = s * s * s * (10 - 15 * s + 6 * s * s)
        return self.z_start + (self.z_end - self.z_start) * shape

    def __call__(self, t, t_mid, z):
        zf = np.asarray(z, dtype=float)
        if self.source == 0:
            acc = -self.qm * (self.basis_slope(zf) @ self.voltages(float(t)))
        else:
            acc = -self.omega2 * (z - LD(self.well_center(float(t))))
            acc = np.asarray(acc, dtype=float)
        if self.t_on <= t_mid < self.t_off:
            acc = acc + self.drive_acc * math.cos(self.drive_omega * (float(t) - self.t_on)
                                                  + self.drive_phi)
        if self.kc and zf.size > 1:
            d = zf[:, None] - zf[None, :]
            np.fill_diagonal(d, np.inf)
            acc = acc + self.kc * np.sum(np.sign(d) / (d * d), axis=1)
        return acc


def _err_norm(err_z, err_v, z, zn, v, vn, rtol, atol_z, atol_v):
    sz = atol_z + rtol * np.maximum(np.abs(z), np.abs(zn))
    sv = atol_v + rtol * np.maximum(np.abs(v), np.abs(vn))
    total = np.sum((err_z / sz) ** 2) + np.sum((err_v / sv) ** 2)
    return math.sqrt(float(total) / (2 * z.size))


def integrate(params, t_stops, z0, v0, rtol=1e-10, atol_z=1e-13, atol_v=None, h_init=0.0,
              max_steps=10_000_000, domain=(-np.inf, np.inf), min_spacing=1e-9):
    """Integrate ``z'' = a(t, z)`` through ``t_stops``.

    Returns ``(Z, V, status, i_last, n_steps)`` with states at each stop up to
    index ``i_last`` (inclusive).
    """
    f = ForceModel(params)
    t_stops = np.asarray(t_stops, dtype=float)
    n = len(z0)
    if atol_v is None:
        atol_v = atol_z * 1e8
    z = np.array(z0, dtype=LD)
    v = np.array(v0, dtype=LD)
    zout = np.zeros((t_stops.size, n))
    vout = np.zeros((t_stops.size, n))
    zout[0], vout[0] = z, v
    t = LD(t_stops[0])
    h_nat = float(h_init)
    n_steps = 0
    lo, hi = domain
    h_max = MAX_PHASE_STEP / params.get("omega_hint", 2 * math.pi * 1e6)
    for i in range(1, t_stops.size):
        t_end = LD(t_stops[i])
        span = float(t_end - t)
        if span <= 0:
            zout[i], vout[i] = z, v
            continue
        k1 = f(t, float(t) + 0.5 * span, z)
        if h_nat <= 0:
            h_nat = min(span, 1e-2 / params.get("omega_hint", 2 * math.pi * 1e6))
        while t < t_end:
            if n_steps >= max_steps:
                return zout, vout, MAX_STEPS, i - 1, n_steps
            h = min(h_nat, h_max, float(t_end - t))
            last = h >= float(t_end - t)
            hl = LD(h)
            t_mid = float(t) + 0.5 * h
            kz = [v.astype(float)]
            kv = [k1]
            for s in range(1, 7):
                dz = sum(a * k for a, k in zip(A[s], kz))
                dv = sum(a * k for a, k in zip(A[s], kv))
                zs = z + hl * LD(1) * dz
                vs = v + hl * LD(1) * dv
                kz.append(np.asarray(vs, dtype=float))
                ts = t_end if (s >= 5 and last) else t + LD(C[s] * h)
                kv.append(f(ts, t_mid, zs))
            dz = sum(b * k for b, k in zip(B, kz[:6]))
            dv = sum(b * k for b, k in zip(B, kv[:6]))
            ez = h * sum(e * k for e, k in zip(E, kz))
            ev = h * sum(e * k for e, k in zip(E, kv))
            zn = z + hl * dz.astype(LD)
            vn = v + hl * dv.astype(LD)
            err = _err_norm(ez, ev, np.asarray(z, float), np.asarray(zn, float),
                            np.asarray(v, float), np.asarray(vn, float), rtol, atol_z, atol_v)
            n_steps += 1
            if err <= 1.0:
                t = t_end if last else t + hl
                z, v = zn, vn
                k1 = kv[6]
                factor = MAX_FACTOR if err == 0 else min(MAX_FACTOR, SAFETY * err ** -0.2)
                if not last or h >= h_nat:
                    h_nat = h * factor
                zf = np.asarray(z, float)
                if np.any(zf < lo) or np.any(zf > hi) or not np.all(np.isfinite(zf)):
                    zout[i], vout[i] = z, v
                    return zout, vout, ESCAPED, i, n_steps
                if n > 1 and float(np.min(np.diff(zf))) < min_spacing:
                    zout[i], vout[i] = z, v
                    return zout, vout, COLLIDED, i, n_steps
            else:
                h_nat = h * max(MIN_FACTOR, SAFETY * err ** -0.2)
                if h_nat < 1e-18 * max(1.0, abs(float(t))) or h_nat < 1e-22:
                    return zout, vout, STEP_FLOOR, i - 1, n_steps
        zout[i], vout[i] = z, v
    return zout, vout, OK, t_stops.size - 1, n_steps
