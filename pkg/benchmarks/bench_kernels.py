"""Compare the compiled and pure-Python trajectory kernels.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import math
import time

import numpy as np

from iontransport import _backend, _pykernels
from iontransport import motion_dynamics as md
from iontransport import waveform_synth as ws
from iontransport.constants import DEFAULT_CONSTANTS as C
from iontransport.trap_model import AxialPotential, ElectrodeBasis, find_well

TWO_PI = 2 * math.pi


def cases():
    """(name, params, stops, z0, v0, omega_hint) for each workload."""
    basis = ElectrodeBasis.default()
    t_t = 8e-6
    omega = TWO_PI * 31 / (2 * t_t)
    profile = ws.TransportProfile("sine_squared", -185e-6, 185e-6, t_t)
    wf = ws.synth_transport(basis, profile, omega)
    params = md._waveform_params(wf, basis, C)
    params["omega_hint"] = omega
    z0 = find_well(AxialPotential(basis, wf.samples[0]), -185e-6).z0
    yield "1 ion, 8 us transport", params, wf.times, [z0], [0.0], omega
    two = dict(params, coulomb=C.coulomb_k * C.elementary_charge * C.q_over_m)
    yield "2 ions, 8 us transport", two, wf.times, [z0 - 2.2e-6, z0 + 2.2e-6], [0.0, 0.0], omega
    moving = {"source": 1, "omega2": omega ** 2, "profile": 1, "z_start": -185e-6,
              "z_end": 185e-6, "t_T": t_t, "omega_hint": omega}
    yield "1 ion, ideal moving well", moving, np.linspace(0, t_t, 101), [-185e-6], [0.0], omega


def timed(fn, repeat):
    best = math.inf
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - start)
    return best, out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--repeat", type=int, default=3, help="runs per case (best is kept)")
    args = parser.parse_args(argv)
    if not _backend.compiled_available():
        print("compiled kernel not built; only the Python kernel is timed")
    kernels = {"python": _pykernels.integrate}
    if _backend.compiled_available():
        from iontransport import _kernels
        kernels["compiled"] = _kernels.integrate
    print(f"{'case':28s} {'kernel':9s} {'steps':>7s} {'time [s]':>10s} {'speed-up':>9s}")
    for name, params, stops, z0, v0, omega in cases():
        base = None
        for kname, fn in kernels.items():
            t, out = timed(lambda: fn(dict(params), np.asarray(stops, float),
                                      np.asarray(z0, float), np.asarray(v0, float),
                                      atol_v=1e-13 * omega), args.repeat)
            base = t if base is None else base
            print(f"{name:28s} {kname:9s} {out[4]:7d} {t:10.4f} {base / t:8.1f}x")


if __name__ == "__main__":
    main()
