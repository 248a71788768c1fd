"""Command-line front end.

Every subcommand reads its parameters from flags and/or a JSON config file
(``--config``), runs one pipeline and writes CSV/JSON artifacts plus a
``report.json`` into the output directory.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 physically infeasible request.
"""
from __future__ import annotations

import argparse
import datetime
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import crystal_modes as cm
from . import measurement_sim as ms
from . import motion_dynamics as md
from . import waveform_synth as ws
from .constants import DEFAULT_CONSTANTS
from .errors import ConfigError, IonTransportError
from .trap_model import (AxialPotential, ElectrodeBasis, UM, find_well, load_trap)

CONFIG_SCHEMA = "iontransport.config/1"
TWO_PI = 2 * math.pi

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PHYSICS = 0, 2, 3, 4


def _flag(value):
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("1", "true", "yes", "on"):
        return True
    if isinstance(value, str) and value.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


# name: (type, default, check, help); check returns an error string or None
def _range(lo=None, hi=None, lo_open=False):
    def check(x):
        if lo is not None and (x <= lo if lo_open else x < lo):
            return f"must be {'>' if lo_open else '>='} {lo}"
        if hi is not None and x > hi:
            return f"must be <= {hi}"
        return None
    return check


def _choice(*opts):
    return lambda x: None if x in opts else f"must be one of {', '.join(map(str, opts))}"


_any = lambda x: None  # noqa: E731

PARAMS = {
    "solve-well": {
        "z0_um": (float, 0.0, _any, "well position"),
        "omega_MHz": (float, 2.0, _range(0, 20, True), "target axial frequency / 2 pi"),
    },
    "transport": {
        "profile": (str, "sine_squared", _choice(*ws.PROFILE_KINDS), "well trajectory shape"),
        "z_start_um": (float, -185.0, _any, "start position"),
        "z_end_um": (float, 185.0, _any, "end position"),
        "t_T_us": (float, 8.0, _range(0, 1000, True), "transport duration"),
        "omega_MHz": (float, 1.9375, _range(0, 20, True), "well frequency / 2 pi"),
        "n_ions": (int, 1, _choice(1, 2), "number of ions"),
        "n_steps": (int, 0, _range(0), "voltage solves (0: every DAC sample)"),
        "compensate": (_flag, False, _any, "design and simulate a compensation pulse"),
        "max_E0_V_per_m": (float, 100.0, _range(0, None, True), "compensation field bound"),
    },
    "separate": {
        "n_ions": (int, 2, _choice(2), "number of ions"),
        "eps1": (float, 0.025, _range(0, 1, True), "stage-1 adiabaticity bound"),
        "eps2": (float, 0.015, _range(0, 1, True), "stage-2 adiabaticity bound"),
        "start_omega_MHz": (float, 2.0, _range(0, 20, True), "initial well frequency / 2 pi"),
        "end_omega_MHz": (float, 2.8, _range(0, 20, True), "final well frequencies / 2 pi"),
        "separation_um": (float, 185.0, _range(0, None, True), "final well distance from centre"),
        "o2_offset_mV": (float, 0.0, _range(-1000, 1000), "constant offset on O2"),
        "o2_ramp_mV": (float, 0.0, _range(-1000, 1000), "O2 change ramped over the path"),
        "x_offset_mV": (float, 0.0, _range(-1000, 1000), "X offset ramped in during stage 2"),
        "ab_differential_mV": (float, 0.0, _range(-1000, 1000),
                               "A minus B difference ramped in during stage 2"),
        "speed_scale_m_per_s": (float, 200.0, _range(0, None), "ion speed per unit eps "
                                "(0 disables the speed term)"),
        "taper": (float, 0.1, _range(0, 0.49), "fraction of each stage used to ramp"),
        "max_duration_us": (float, 1000.0, _range(0, None, True), "duration limit"),
    },
    "partition-scan": {
        "n_ions": (int, 9, _range(1, 30), "number of ions"),
        "offset_min_V": (float, -0.25, _any, "first offset"),
        "offset_max_V": (float, 0.35, _any, "last offset"),
        "n_offsets": (int, 61, _range(2, 10000), "number of offsets"),
        "electrode": (str, "O2", _any, "electrode carrying the offset"),
        "counts_per_ion": (float, 10.0, _range(0), "fluorescence counts of one ion"),
        "droop": (float, 0.03, _range(0, 1), "fractional count loss per extra ion"),
    },
    "flop": {
        "model": (str, "thermal", _choice(*ms.MODELS), "population model"),
        "nbar": (float, None, _range(0), "mean occupation (thermal)"),
        "alpha": (float, None, _range(0), "coherent amplitude |alpha|"),
        "sideband": (str, "MAS", _choice(*ms.SIDEBANDS), "sideband"),
        "eta": (float, 0.479, _range(0, 2, True), "Lamb-Dicke parameter"),
        "Omega0_kHz": (float, 100.0, _range(0, None, True), "carrier Rabi rate / 2 pi"),
        "gamma_per_ms": (float, 3.0, _range(0), "decay rate"),
        "t_max_us": (float, 100.0, _range(0, None, True), "last drive time"),
        "n_points": (int, 201, _range(2, 100000), "trace points"),
        "repetitions": (int, 0, _range(0), "binomial draws per point (0: noiseless)"),
    },
    "fit": {
        "trace": (str, None, _any, "trace CSV (t_s,p_down)"),
        "model": (str, "thermal", _choice(*ms.MODELS), "population model"),
        "sideband": (str, "MAS", _choice(*ms.SIDEBANDS), "sideband"),
        "eta": (float, 0.479, _range(0, 2, True), "Lamb-Dicke parameter"),
        "Omega0_kHz": (float, 100.0, _range(0, None, True), "carrier Rabi rate / 2 pi"),
        "fit_Omega0": (_flag, False, _any, "also fit the carrier Rabi rate"),
    },
}


# -- config handling -----------------------------------------------------------

def load_config(path, command):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    schema = data.pop("schema", None)
    if schema != CONFIG_SCHEMA:
        raise ConfigError(f"{path}: schema must be {CONFIG_SCHEMA!r}, found {schema!r}")
    cmd = data.pop("command", command)
    if cmd != command:
        raise ConfigError(f"{path}: config is for {cmd!r}, not {command!r}")
    unknown = sorted(set(data) - set(PARAMS[command]))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown} for {command}")
    return data


def resolve_params(command, cli_values, config=None):
    """Defaults, overridden by the config file, overridden by flags; then validated."""
    out = {}
    for name, (typ, default, check, _) in PARAMS[command].items():
        value = default
        if config and name in config:
            value = config[name]
        if cli_values.get(name) is not None:
            value = cli_values[name]
        if value is not None:
            try:
                if typ is int and isinstance(value, float) and not value.is_integer():
                    raise ValueError(f"not an integer: {value}")
                value = typ(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
            if isinstance(value, float) and not math.isfinite(value):
                raise ConfigError(f"{name}: must be finite")
            err = check(value)
            if err:
                raise ConfigError(f"{name} {err} (got {value})")
        out[name] = value
    return out


# -- helpers ---------------------------------------------------------------------

def _trap(args):
    if args.trap is None:
        return ElectrodeBasis.default(), DEFAULT_CONSTANTS
    path = Path(args.trap)
    if not path.exists():
        raise ConfigError(f"trap file not found: {path}")
    return load_trap(path)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, complex):
        return {"re": x.real, "im": x.imag}
    return x


def _write_json(path, data):
    Path(path).write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def _mode_rows(alphas, labels=None):
    rows = []
    for k, a in enumerate(alphas):
        row = {"index": k, "omega": a.omega, "frequency_MHz": a.omega / TWO_PI / 1e6,
               "re_alpha": a.alpha.real, "im_alpha": a.alpha.imag, "nbar": a.nbar}
        if labels is not None:
            row["label"] = labels[k]
        rows.append(row)
    return rows


# -- subcommands ---------------------------------------------------------------------

def cmd_solve_well(p, basis, constants, out):
    omega = TWO_PI * p["omega_MHz"] * 1e6
    z0 = p["z0_um"] * UM
    v = ws.solve_voltages(basis, {"z0": z0, "omega": omega}, constants=constants)
    well = find_well(AxialPotential(basis, v), z0, constants)
    result = {"z0_m": well.z0, "omega_rad_s": well.omega,
              "frequency_MHz": well.omega / TWO_PI / 1e6,
              "requested_frequency_MHz": p["omega_MHz"],
              "voltages_V": dict(zip(basis.electrode_names, v))}
    _write_json(out / "well.json", result)
    return result, {}


def _final_alphas(traj_final, pot, n_ions, constants):
    if n_ions == 1:
        well = find_well(pot, traj_final.positions[0], constants)
        a = md.alpha_from_state(traj_final.positions[0] - well.z0, traj_final.velocities[0],
                                well.omega, constants)
        return [md.CoherentAmplitude(a, 0, well.omega, "well")], ("COM",), well.omega
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        crystal = cm.equilibrium_positions(pot, n_ions, traj_final.positions, constants)
    spectrum = cm.mode_spectrum(pot, crystal, constants)
    return md.extract_mode_alphas(traj_final, crystal, spectrum, constants), spectrum.labels, \
        float(spectrum.frequencies[0])


def cmd_transport(p, basis, constants, out):
    omega = TWO_PI * p["omega_MHz"] * 1e6
    n_ions = p["n_ions"]
    if p["compensate"] and n_ions != 1:
        raise ConfigError("compensate is supported for single-ion transport only")
    profile = ws.TransportProfile(p["profile"], p["z_start_um"] * UM, p["z_end_um"] * UM,
                                  p["t_T_us"] * 1e-6)
    wf = ws.synth_transport(basis, profile, omega, n_steps=p["n_steps"] or None,
                            constants=constants)
    pot0 = AxialPotential(basis, wf.samples[0])
    if n_ions == 1:
        z_init = [find_well(pot0, profile.z_start, constants).z0]
    else:
        z_init = cm.crystal_in_well(pot0, n_ions, profile.z_start, constants).positions
    init = md.TrajectoryState(0.0, z_init, np.zeros(n_ions))
    integrate = md.integrate_classical if n_ions == 1 else md.integrate_crystal
    traj = integrate(wf, basis, init, constants, omega_hint=omega)
    pot_end = AxialPotential(basis, wf.samples[-1])
    alphas, labels, w_end = _final_alphas(traj.final, pot_end, n_ions, constants)
    ws.write_waveform_csv(out / "waveform.csv", wf)
    md.write_trajectory_csv(out / "trajectory.csv", traj)
    result = {"duration_s": wf.duration, "n_samples": wf.samples.shape[0],
              "integrator_backend": traj.backend, "integrator_steps": traj.n_steps,
              "modes": _mode_rows(alphas, labels),
              "spectral_criterion": abs(ws.spectral_criterion(profile, omega))}
    excitation = {"modes": _mode_rows(alphas, labels)}
    if p["compensate"]:
        t_end = wf.duration

        def simulate(pulse):
            comp = md.integrate_classical(wf, basis, init, constants, pulse=pulse,
                                          pulse_start=t_end, omega_hint=omega)
            return _final_alphas(comp.final, pot_end, 1, constants)[0][0].alpha
        pulse, residual, history = md.refine_compensation(
            simulate, alphas[0].alpha, w_end, p["max_E0_V_per_m"], constants)
        result["compensation"] = {"E0_V_per_m": pulse.E0, "t_E_s": pulse.t_E,
                                  "phi_E_rad": pulse.phi_E, "omega_rad_s": pulse.omega,
                                  "residual_nbar": abs(residual) ** 2,
                                  "analytic_residual_nbar": history[0] ** 2,
                                  "refinements": len(history) - 1}
        excitation["compensation"] = result["compensation"]
    _write_json(out / "excitation.json", excitation)
    cert = {"spectral_criterion": result["spectral_criterion"]}
    return result, cert


def _ramp(p):
    return ws.SeparationRamp(
        start_omega=TWO_PI * p["start_omega_MHz"] * 1e6, end_omega=TWO_PI * p["end_omega_MHz"] * 1e6,
        separation=p["separation_um"] * UM, eps1=p["eps1"], eps2=p["eps2"],
        o2_ramp=p["o2_ramp_mV"] * 1e-3, o2_offset=p["o2_offset_mV"] * 1e-3,
        x_offset=p["x_offset_mV"] * 1e-3, ab_differential=p["ab_differential_mV"] * 1e-3,
        speed_scale=p["speed_scale_m_per_s"] or None, taper=p["taper"],
        max_duration=p["max_duration_us"] * 1e-6)


def cmd_separate(p, basis, constants, out):
    ramp = _ramp(p)
    res = ws.synth_separation(basis, ramp, p["n_ions"], constants=constants)
    wf = res.waveform
    pot0 = AxialPotential(basis, wf.samples[0])
    crystal = cm.crystal_in_well(pot0, p["n_ions"], 0.0, constants)
    init = md.TrajectoryState(0.0, crystal.positions, np.zeros(p["n_ions"]))
    traj = md.integrate_crystal(wf, basis, init, constants)
    alphas = md.extract_well_alphas(traj.final, AxialPotential(basis, wf.samples[-1]), constants)
    ws.write_waveform_csv(out / "waveform.csv", wf)
    cert = {"adiabaticity": res.certificate_report(),
            "s_crossing": res.s_crossing, "b_at_crossing_V_per_m4": res.b_at_crossing,
            "s_boundary": res.s_boundary,
            "min_mode_frequency_MHz": res.min_mode_frequency / TWO_PI / 1e6}
    _write_json(out / "certificate.json", cert)
    zones = ["A", "B"] if p["n_ions"] == 2 else [str(k) for k in range(p["n_ions"])]
    rows = _mode_rows(alphas, zones)
    _write_json(out / "excitation.json", {"modes": rows})
    result = {"duration_s": res.duration, "stage_durations_s": res.stage_durations,
              "stage_samples": res.stage_samples, "integrator_backend": traj.backend,
              "final_positions_m": traj.final.positions,
              "well_frequencies_MHz": [w / TWO_PI / 1e6 for w in res.well_omegas],
              "ions": rows, "nbar": {z: r["nbar"] for z, r in zip(zones, rows)}}
    return result, cert


def cmd_partition_scan(p, basis, constants, out):
    if p["electrode"] not in basis.electrode_names:
        raise ConfigError(f"electrode {p['electrode']!r} not in trap {basis.electrode_names}")
    family = ws.partition_family(basis, electrode=p["electrode"], constants=constants)
    offsets = np.linspace(p["offset_min_V"], p["offset_max_V"], p["n_offsets"])
    sep = ws.SeparationRamp().separation
    rows = cm.partition_scan(family, p["n_ions"], offsets, (-sep, sep), 0.0, constants,
                             p["counts_per_ion"], p["droop"])
    with (out / "staircase.csv").open("w") as fh:
        fh.write("offset_V,left_count,counts\n")
        for off, left, counts in rows:
            fh.write(f"{off!r},{left},{counts!r}\n")
    lefts = [r[1] for r in rows]
    monotone = all(b >= a for a, b in zip(lefts, lefts[1:]))
    result = {"n_offsets": len(rows), "counts_visited": sorted(set(lefts)),
              "monotone": monotone}
    return result, {"monotone": monotone}


def cmd_flop(p, basis, constants, out, seed=None):
    if p["model"] == "thermal":
        if p["nbar"] is None:
            raise ConfigError("thermal model needs nbar")
        dist = ms.thermal_dist(p["nbar"])
    else:
        if p["alpha"] is None:
            raise ConfigError("coherent model needs alpha")
        dist = ms.coherent_dist(p["alpha"])
    times = np.linspace(0.0, p["t_max_us"] * 1e-6, p["n_points"])
    trace = ms.flopping_trace(dist, p["sideband"], TWO_PI * p["Omega0_kHz"] * 1e3, p["eta"],
                              p["gamma_per_ms"] * 1e3, times,
                              repetitions=p["repetitions"] or None, seed=seed)
    ms.write_trace_csv(out / "trace.csv", trace)
    result = {"n_points": times.size, "n_max": dist.n_max, "mean_n": dist.mean,
              "noisy": bool(p["repetitions"])}
    return result, {}


def cmd_fit(p, basis, constants, out):
    if p["trace"] is None:
        raise ConfigError("fit needs a trace file")
    trace = ms.read_trace_csv(p["trace"], p["sideband"], p["eta"],
                              TWO_PI * p["Omega0_kHz"] * 1e3)
    fit = ms.fit_distribution(trace, p["model"], fit_omega0=p["fit_Omega0"])
    report = fit.to_dict()
    _write_json(out / "fit.json", report)
    return report, {"grad_norm": fit.grad_norm}


HELP = {"solve-well": "solve electrode voltages for a harmonic well",
        "transport": "synthesise and simulate a transport waveform",
        "separate": "synthesise and simulate splitting a two-ion crystal",
        "partition-scan": "count ions on each side of a split versus an electrode offset",
        "flop": "simulate a sideband flopping trace",
        "fit": "fit a motional distribution to a flopping trace"}

COMMANDS = {"solve-well": cmd_solve_well, "transport": cmd_transport, "separate": cmd_separate,
            "partition-scan": cmd_partition_scan, "flop": cmd_flop, "fit": cmd_fit}


# -- entry point ---------------------------------------------------------------------------

def _seed(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="iontransport", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--trap", help="trap definition JSON (default: built-in five-electrode trap)")
    parser.add_argument("--out", default=".", help="output directory (created if missing)")
    parser.add_argument("--seed", type=_seed, default=0, help="RNG seed (u64)")
    parser.add_argument("--json", action="store_true", help="print the report as JSON")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, params in PARAMS.items():
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", help="JSON config file")
        for key, (typ, default, _, text) in params.items():
            flag = "--" + key.replace("_", "-")
            hint = f"{text} (default: {default})"
            if typ is _flag:
                sp.add_argument(flag, dest=key, nargs="?", const="true", default=None, help=hint)
            else:
                sp.add_argument(flag, dest=key, type=typ, default=None, help=hint)
    return parser


def run(argv=None):
    """Run one subcommand; returns ``(exit_code, report)``."""
    return _run(build_parser().parse_args(argv))


def _run(args):
    command = args.command
    cli_values = {k: getattr(args, k) for k in PARAMS[command]}
    config = load_config(args.config, command) if args.config else None
    params = resolve_params(command, cli_values, config)
    basis, constants = _trap(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kwargs = {"seed": args.seed} if command == "flop" else {}
    result, cert = COMMANDS[command](params, basis, constants, out, **kwargs)
    report = {"command": command, "version": __version__, "inputs": params,
              "trap": args.trap, "seed": args.seed, "outputs": result, "certificates": cert,
              "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    _write_json(out / "report.json", report)
    return EXIT_OK, _jsonable(report)


def _summary(report):
    out = report["outputs"]
    parts = [report["command"], "ok"]
    for key in ("frequency_MHz", "duration_s", "nbar", "counts_visited", "n_points"):
        if key in out:
            parts.append(f"{key}={out[key]}")
    return " ".join(parts)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        code, report = _run(args)
    except IonTransportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(report, indent=2, sort_keys=True) if args.json else _summary(report))
    return code


if __name__ == "__main__":
    sys.exit(main())
