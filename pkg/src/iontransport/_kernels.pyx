# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled trajectory kernel.

Same algorithm and calling convention as ``_pykernels.integrate``: embedded
Dormand-Prince 5(4) steps, ``long double`` state accumulation, steps that
never straddle a stop time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, cos, sin, sqrt, fabs, pow, M_PI
from libc.stdlib cimport malloc, free

cnp.import_array()

DEF OK = 0
DEF ESCAPED = 1
DEF COLLIDED = 2
DEF MAX_STEPS = 3
DEF STEP_FLOOR = 4

cdef double SAFETY = 0.9
cdef double MIN_FACTOR = 0.2
cdef double MAX_FACTOR = 5.0
cdef double MAX_PHASE_STEP = 0.5  # largest step in units of 1 / omega_hint

cdef double C2 = 1.0 / 5, C3 = 3.0 / 10, C4 = 4.0 / 5, C5 = 8.0 / 9
cdef double A21 = 1.0 / 5
cdef double A31 = 3.0 / 40, A32 = 9.0 / 40
cdef double A41 = 44.0 / 45, A42 = -56.0 / 15, A43 = 32.0 / 9
cdef double A51 = 19372.0 / 6561, A52 = -25360.0 / 2187, A53 = 64448.0 / 6561, A54 = -212.0 / 729
cdef double A61 = 9017.0 / 3168, A62 = -355.0 / 33, A63 = 46732.0 / 5247, A64 = 49.0 / 176
cdef double A65 = -5103.0 / 18656
cdef double B1 = 35.0 / 384, B3 = 500.0 / 1113, B4 = 125.0 / 192, B5 = -2187.0 / 6784
cdef double B6 = 11.0 / 84
cdef double E1 = 71.0 / 57600, E3 = -71.0 / 16695, E4 = 71.0 / 1920, E5 = -17253.0 / 339200
cdef double E6 = 22.0 / 525, E7 = -1.0 / 40


cdef class _Force:
    cdef int source, basis_kind, n_el, n_samp, kdeg, mmax, profile
    cdef double wf_t0, wf_dt, qm, omega2, z_start, z_end, t_t
    cdef double drive_acc, drive_omega, drive_phi, t_on, t_off, kc
    cdef const double[:, :] samples
    cdef const double[:] centers, widths
    cdef const double[:, :, :] coef
    cdef const double[:, :] breaks
    cdef const long[:] counts
    cdef double* vbuf

    def __cinit__(self, dict params):
        self.vbuf = NULL
        self.source = params["source"]
        self.n_el = 0
        if self.source == 0:
            self.basis_kind = params["basis_kind"]
            self.samples = np.ascontiguousarray(params["wf_samples"], dtype=np.float64)
            self.n_samp = self.samples.shape[0]
            self.n_el = self.samples.shape[1]
            self.wf_t0 = params["wf_t0"]
            self.wf_dt = params["wf_dt"]
            self.qm = params["q_over_m"]
            if self.basis_kind == 0:
                self.centers = np.ascontiguousarray(params["centers"], dtype=np.float64)
                self.widths = np.ascontiguousarray(params["widths"], dtype=np.float64)
            else:
                self.coef = np.ascontiguousarray(params["coef"], dtype=np.float64)
                self.breaks = np.ascontiguousarray(params["breaks"], dtype=np.float64)
                self.counts = np.ascontiguousarray(params["counts"], dtype=np.int_)
                self.kdeg = self.coef.shape[1] - 1
                self.mmax = self.coef.shape[2]
            self.vbuf = <double*> malloc(self.n_el * sizeof(double))
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

    def __dealloc__(self):
        if self.vbuf != NULL:
            free(self.vbuf)

    cdef void _voltages(self, double t) nogil:
        cdef int n = self.n_samp - 1, k, e
        cdef double x = (t - self.wf_t0) / self.wf_dt, f
        if x <= 0:
            for e in range(self.n_el):
                self.vbuf[e] = self.samples[0, e]
            return
        if x >= n:
            for e in range(self.n_el):
                self.vbuf[e] = self.samples[n, e]
            return
        k = <int> x
        if k >= n:
            k = n - 1
        f = x - k
        for e in range(self.n_el):
            self.vbuf[e] = (1 - f) * self.samples[k, e] + f * self.samples[k + 1, e]

    cdef double _slope(self, int e, double z) nogil:
        cdef double u, dx, acc
        cdef int lo, hi, mid, m, j
        if self.basis_kind == 0:
            u = (z - self.centers[e]) / self.widths[e]
            return -u / self.widths[e] * exp(-0.5 * u * u)
        m = self.counts[e]
        lo = 0
        hi = m - 1
        # last interval whose left break is <= z
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.breaks[e, mid] <= z:
                lo = mid
            else:
                hi = mid - 1
        dx = z - self.breaks[e, lo]
        acc = 0.0
        for j in range(self.kdeg):
            acc = acc * dx + (self.kdeg - j) * self.coef[e, j, lo]
        return acc

    cdef double _center(self, double t) nogil:
        cdef double s, shape
        if t <= 0:
            return self.z_start
        if t >= self.t_t:
            return self.z_end
        s = t / self.t_t
        if self.profile == 0:
            shape = s
        elif self.profile == 1:
            shape = sin(0.5 * M_PI * s)
            shape = shape * shape
        else:
            shape = s * s * s * (10 - 15 * s + 6 * s * s)
        return self.z_start + (self.z_end - self.z_start) * shape

    cdef void eval(self, long double t, double t_mid, long double* z, double* out, int n) nogil:
        cdef int i, j, e
        cdef double acc, zi, d, drive = 0.0
        cdef long double zc
        if self.t_on <= t_mid < self.t_off:
            drive = self.drive_acc * cos(self.drive_omega * (<double> t - self.t_on)
                                         + self.drive_phi)
        if self.source == 0:
            self._voltages(<double> t)
        else:
            zc = self._center(<double> t)
        for i in range(n):
            zi = <double> z[i]
            if self.source == 0:
                acc = 0.0
                for e in range(self.n_el):
                    acc += self.vbuf[e] * self._slope(e, zi)
                acc = -self.qm * acc
            else:
                acc = <double> (-self.omega2 * (z[i] - zc))
            acc += drive
            if self.kc != 0.0:
                for j in range(n):
                    if j != i:
                        d = zi - <double> z[j]
                        if d > 0:
                            acc += self.kc / (d * d)
                        else:
                            acc -= self.kc / (d * d)
            out[i] = acc


def integrate(dict params, t_stops, z0, v0, double rtol=1e-10, double atol_z=1e-13,
              atol_v=None, double h_init=0.0, long max_steps=10_000_000,
              domain=(-np.inf, np.inf), double min_spacing=1e-9):
    cdef _Force f = _Force(params)
    cdef const double[:] stops = np.ascontiguousarray(t_stops, dtype=np.float64)
    cdef int n = len(z0), ns = stops.shape[0]
    cdef double av = atol_z * 1e8 if atol_v is None else atol_v
    cdef double lo = domain[0], hi = domain[1]
    cdef double omega_hint = params.get("omega_hint", 2 * M_PI * 1e6)
    cdef double h_max = MAX_PHASE_STEP / omega_hint
    zout_arr = np.zeros((ns, n))
    vout_arr = np.zeros((ns, n))
    cdef double[:, :] zout = zout_arr
    cdef double[:, :] vout = vout_arr
    cdef long double* z = <long double*> malloc(n * sizeof(long double))
    cdef long double* v = <long double*> malloc(n * sizeof(long double))
    cdef long double* zs = <long double*> malloc(n * sizeof(long double))
    cdef long double* zn = <long double*> malloc(n * sizeof(long double))
    cdef long double* vn = <long double*> malloc(n * sizeof(long double))
    cdef double* k = <double*> malloc(14 * n * sizeof(double))
    cdef double* kz[7]
    cdef double* kv[7]
    cdef int i, j, s, status = OK, i_last = ns - 1
    cdef long n_steps = 0
    cdef long double t, t_end, hl, vs_j
    cdef double h, h_nat = h_init, span, t_mid, err, sz, sv, ez, ev, factor, zf, tmp
    cdef bint last
    for s in range(7):
        kz[s] = k + 2 * s * n
        kv[s] = k + (2 * s + 1) * n
    try:
        for j in range(n):
            z[j] = <long double> z0[j]
            v[j] = <long double> v0[j]
            zout[0, j] = <double> z[j]
            vout[0, j] = <double> v[j]
        t = stops[0]
        for i in range(1, ns):
            t_end = stops[i]
            span = <double> (t_end - t)
            if span <= 0:
                for j in range(n):
                    zout[i, j] = <double> z[j]
                    vout[i, j] = <double> v[j]
                continue
            f.eval(t, <double> t + 0.5 * span, z, kv[0], n)
            if h_nat <= 0:
                h_nat = min(span, 1e-2 / omega_hint)
            while t < t_end:
                if n_steps >= max_steps:
                    status = MAX_STEPS
                    i_last = i - 1
                    return zout_arr, vout_arr, status, i_last, n_steps
                h = min(h_nat, h_max, <double> (t_end - t))
                last = h >= <double> (t_end - t)
                hl = h
                t_mid = <double> t + 0.5 * h
                for j in range(n):
                    kz[0][j] = <double> v[j]
                # stage 2
                for j in range(n):
                    zs[j] = z[j] + hl * (A21 * kz[0][j])
                    kz[1][j] = <double> (v[j] + hl * (A21 * kv[0][j]))
                f.eval(t + hl * C2, t_mid, zs, kv[1], n)
                # stage 3
                for j in range(n):
                    zs[j] = z[j] + hl * (A31 * kz[0][j] + A32 * kz[1][j])
                    kz[2][j] = <double> (v[j] + hl * (A31 * kv[0][j] + A32 * kv[1][j]))
                f.eval(t + hl * C3, t_mid, zs, kv[2], n)
                # stage 4
                for j in range(n):
                    zs[j] = z[j] + hl * (A41 * kz[0][j] + A42 * kz[1][j] + A43 * kz[2][j])
                    kz[3][j] = <double> (v[j] + hl * (A41 * kv[0][j] + A42 * kv[1][j]
                                                      + A43 * kv[2][j]))
                f.eval(t + hl * C4, t_mid, zs, kv[3], n)
                # stage 5
                for j in range(n):
                    zs[j] = z[j] + hl * (A51 * kz[0][j] + A52 * kz[1][j] + A53 * kz[2][j]
                                         + A54 * kz[3][j])
                    kz[4][j] = <double> (v[j] + hl * (A51 * kv[0][j] + A52 * kv[1][j]
                                                      + A53 * kv[2][j] + A54 * kv[3][j]))
                f.eval(t + hl * C5, t_mid, zs, kv[4], n)
                # stage 6
                for j in range(n):
                    zs[j] = z[j] + hl * (A61 * kz[0][j] + A62 * kz[1][j] + A63 * kz[2][j]
                                         + A64 * kz[3][j] + A65 * kz[4][j])
                    kz[5][j] = <double> (v[j] + hl * (A61 * kv[0][j] + A62 * kv[1][j]
                                                      + A63 * kv[2][j] + A64 * kv[3][j]
                                                      + A65 * kv[4][j]))
                f.eval(t_end if last else t + hl, t_mid, zs, kv[5], n)
                # stage 7 (FSAL)
                for j in range(n):
                    zn[j] = z[j] + hl * (B1 * kz[0][j] + B3 * kz[2][j] + B4 * kz[3][j]
                                         + B5 * kz[4][j] + B6 * kz[5][j])
                    vn[j] = v[j] + hl * (B1 * kv[0][j] + B3 * kv[2][j] + B4 * kv[3][j]
                                         + B5 * kv[4][j] + B6 * kv[5][j])
                    kz[6][j] = <double> vn[j]
                f.eval(t_end if last else t + hl, t_mid, zn, kv[6], n)
                err = 0.0
                for j in range(n):
                    ez = h * (E1 * kz[0][j] + E3 * kz[2][j] + E4 * kz[3][j] + E5 * kz[4][j]
                              + E6 * kz[5][j] + E7 * kz[6][j])
                    ev = h * (E1 * kv[0][j] + E3 * kv[2][j] + E4 * kv[3][j] + E5 * kv[4][j]
                              + E6 * kv[5][j] + E7 * kv[6][j])
                    sz = atol_z + rtol * max(fabs(<double> z[j]), fabs(<double> zn[j]))
                    sv = av + rtol * max(fabs(<double> v[j]), fabs(<double> vn[j]))
                    err += (ez / sz) * (ez / sz) + (ev / sv) * (ev / sv)
                err = sqrt(err / (2 * n))
                n_steps += 1
                if err <= 1.0:
                    t = t_end if last else t + hl
                    for j in range(n):
                        z[j] = zn[j]
                        v[j] = vn[j]
                        kv[0][j] = kv[6][j]
                    factor = MAX_FACTOR if err == 0 else min(MAX_FACTOR, SAFETY * pow(err, -0.2))
                    if not last or h >= h_nat:
                        h_nat = h * factor
                    for j in range(n):
                        zf = <double> z[j]
                        if not (lo <= zf <= hi):
                            status = ESCAPED
                    if status == OK and n > 1:
                        for j in range(n - 1):
                            if <double> (z[j + 1] - z[j]) < min_spacing:
                                status = COLLIDED
                    if status != OK:
                        for j in range(n):
                            zout[i, j] = <double> z[j]
                            vout[i, j] = <double> v[j]
                        return zout_arr, vout_arr, status, i, n_steps
                else:
                    h_nat = h * max(MIN_FACTOR, SAFETY * pow(err, -0.2))
                    tmp = fabs(<double> t)
                    if h_nat < 1e-18 * max(1.0, tmp) or h_nat < 1e-22:
                        return zout_arr, vout_arr, STEP_FLOOR, i - 1, n_steps
            for j in range(n):
                zout[i, j] = <double> z[j]
                vout[i, j] = <double> v[j]
        return zout_arr, vout_arr, status, i_last, n_steps
    finally:
        free(z)
        free(v)
        free(zs)
        free(zn)
        free(vn)
        free(k)
