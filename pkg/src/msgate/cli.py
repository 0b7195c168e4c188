"""Command-line entry point: ``msgate {modes,design,analyze,simulate,scan}``.

Configuration
-------------
Every command reads one or more JSON files with the sections below; later
files override earlier ones key by key.  Frequencies carry an ``_hz``
suffix, times are in seconds and angles in radians.

* ``chain``: ``n_ions``, ``axial_freq_hz``, ``radial_freq_hz``,
  ``wavevector_radial`` (rad/m), optional ``ion_mass`` (kg),
  ``wavevector_axial``, ``illuminated_pair`` (zero-based), ``charge`` (C);
* ``gate``: ``mu_hz``, ``t_gate``, optional ``t0``, ``psi``, ``phi_target``;
* ``design``: optional ``n_seg``, ``transform``;
* ``simulation``: optional ``hamiltonian``, ``state``, ``cutoffs``,
  ``steps_per_period``, ``check_halving``, ``max_dim``;
* ``scan``: optional grid fields of :class:`msgate.scan.GridSpec`, ``n_seg``,
  ``spin_flip_points`` (list of ``[t_gate, mu_hz]``), ``n_ions_list``,
  ``threshold``, ``lowest_radial_hz``.

A manifest written by a previous run is accepted as a config: its
``resolved`` section holds the complete parameter set that run used.

Outputs
-------
Each run writes ``manifest_<command>.json`` to ``--out-dir``.  Its ``hash`` is the
SHA-256 of the canonical manifest without config paths and wall clock, and every
other output file carries it (``manifest_hash`` key in JSON, a leading
``# manifest_hash=`` line in CSV).  Errors print a JSON object on stderr and
exit with 2 (infeasible or outside the allowed area), 3 (no convergence) or
4 (configuration).
"""
import argparse
import csv
import hashlib
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, MSGateError
from .gate_analytics import fidelity_breakdown, trajectories
from .ion_chain import ChainConfig, chain_modes, modes_csv_rows, modes_to_dict
from .pulse_basis import default_n_seg, pulse_from_dict, pulse_to_dict, sample_pulse
from .pulse_solver import GateSpec, design_pulse, inverse_transform, transform_constant
from .scan import GridSpec, min_gate_times, scan_grid, spin_flip_points
from .tdse_sim import (NAMED_STATES, build_space, default_cutoffs, extract_channels,
                       product_state, propagate, write_state)

SAMPLE_RATE = 100e6

# ---------------------------------------------------------------------------
# configuration


def load_configs(paths):
    """Merge config files section by section; a manifest contributes its ``resolved`` part."""
    merged = {}
    for path in paths:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}", "config") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc.msg} (line {exc.lineno})",
                              "config") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object", "config")
        data = data.get("resolved", data)
        for section, values in data.items():
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be an object", section)
            merged.setdefault(section, {}).update(values)
    return merged


def _section(cfg, name, required=True):
    if name not in cfg:
        if required:
            raise ConfigError(f"missing config section {name!r}", name)
        return {}
    return cfg[name]


def _check_keys(section, values, allowed):
    extra = sorted(set(values) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key {extra[0]!r} in section {section!r}", f"{section}.{extra[0]}")


def chain_from_config(cfg):
    values = _section(cfg, "chain")
    names = [f.name for f in fields(ChainConfig)]
    _check_keys("chain", values, names)
    for req in ("n_ions", "axial_freq_hz", "radial_freq_hz", "wavevector_radial"):
        if req not in values:
            raise ConfigError(f"missing field chain.{req}", f"chain.{req}")
    try:
        return ChainConfig(**values)
    except TypeError as exc:
        raise ConfigError(f"bad chain field: {exc}", "chain") from None


def chain_to_config(chain):
    d = asdict(chain)
    d["illuminated_pair"] = list(chain.illuminated_pair)
    return d


def gate_from_config(cfg, pulse=None):
    """Gate from the ``gate`` section; the interval defaults to the pulse's."""
    values = _section(cfg, "gate")
    _check_keys("gate", values, ("mu_hz", "t_gate", "t0", "psi", "phi_target"))
    if "mu_hz" not in values:
        raise ConfigError("missing field gate.mu_hz", "gate.mu_hz")
    t0 = float(values.get("t0", pulse.t0 if pulse is not None else 0.0))
    if "t_gate" in values:
        t_gate = float(values["t_gate"])
    elif pulse is not None:
        t_gate = pulse.tf - pulse.t0
    else:
        raise ConfigError("missing field gate.t_gate", "gate.t_gate")
    gate = GateSpec.from_hz(float(values["mu_hz"]), t_gate, psi=float(values.get("psi", 0.0)),
                            phi_target=float(values.get("phi_target", np.pi / 4)), t0=t0)
    if pulse is not None and (abs(pulse.t0 - gate.t0) > 1e-15 or abs(pulse.tf - gate.tf) > 1e-15):
        raise ConfigError("pulse interval does not match gate.t0 / gate.t_gate", "gate.t_gate")
    return gate


def gate_to_config(gate):
    return {"mu_hz": gate.mu / (2 * np.pi), "t_gate": gate.tf - gate.t0, "t0": gate.t0,
            "psi": gate.psi, "phi_target": gate.phi_target}


def grid_from_config(cfg):
    values = dict(_section(cfg, "scan", required=False))
    names = [f.name for f in fields(GridSpec)]
    extra = ("n_seg", "spin_flip_points", "n_ions_list", "threshold", "lowest_radial_hz")
    _check_keys("scan", values, names + list(extra))
    return GridSpec(**{k: values[k] for k in names if k in values}), values


# ---------------------------------------------------------------------------
# manifest and writers


def _clean(obj):
    """JSON-safe copy: NaN/inf become ``None``, numpy scalars and tuples become plain types."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _dumps(obj):
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


class Run:
    """Output directory bound to one manifest."""

    def __init__(self, out_dir, command, config_paths, resolved):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        body = {
            "tool": "msgate",
            "version": __version__,
            "command": command,
            "resolved": resolved,
            "deterministic": True,
        }
        # paths and wall clock stay out of the hash so a re-fed snapshot reproduces it
        self.hash = hashlib.sha256(_dumps(body).encode()).hexdigest()
        self.manifest = dict(body, hash=self.hash, config_paths=[str(p) for p in config_paths],
                             wall_clock=datetime.now(timezone.utc).isoformat())
        self.written = []

    def json(self, name, obj):
        path = self.out_dir / name
        path.write_text(_dumps(dict(obj, manifest_hash=self.hash)))
        self.written.append(name)
        return path

    def csv(self, name, header, rows):
        path = self.out_dir / name
        with path.open("w", newline="") as fh:
            fh.write(f"# manifest_hash={self.hash}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        self.written.append(name)
        return path

    def binary(self, name, writer):
        path = self.out_dir / name
        writer(path)
        (self.out_dir / (name + ".json")).write_text(
            _dumps({"file": name, "manifest_hash": self.hash}))
        self.written.append(name)
        return path

    def close(self):
        self.manifest["outputs"] = sorted(self.written)
        (self.out_dir / f"manifest_{self.manifest['command']}.json").write_text(_dumps(self.manifest))


def _num(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# commands


def cmd_modes(args, cfg):
    chain = chain_from_config(cfg)
    modes = chain_modes(chain)
    run = Run(args.out_dir, "modes", args.config, {"chain": chain_to_config(chain)})
    run.json("modes.json", modes_to_dict(chain, modes))
    header, rows = modes_csv_rows(modes)
    run.csv("modes.csv", header, rows)
    return run


def cmd_design(args, cfg):
    chain = chain_from_config(cfg)
    gate = gate_from_config(cfg)
    design_cfg = dict(_section(cfg, "design", required=False))
    _check_keys("design", design_cfg, ("n_seg", "transform"))
    n_seg = args.segments or design_cfg.get("n_seg") or default_n_seg(chain.n_ions)
    if args.transform is None:
        args.transform = bool(design_cfg.get("transform", True))
    resolved = {"chain": chain_to_config(chain), "gate": gate_to_config(gate),
                "design": {"n_seg": int(n_seg), "transform": args.transform}}
    run = Run(args.out_dir, "design", args.config, resolved)
    modes = chain_modes(chain)
    d = design_pulse(modes, gate, n_seg=int(n_seg), transform=False)
    lin = d.linear
    report = {"linear": lin.to_dict(), "allowed_ratio": d.allowed_ratio,
              "transform_constant": transform_constant(), "transformed": None}
    run.json("pulse_linear.json", pulse_to_dict(lin.pulse))
    t, omega_lin = sample_pulse(lin.pulse, SAMPLE_RATE)
    try:
        tr = inverse_transform(lin.pulse, gate.mu) if args.transform else None
    except MSGateError:
        report["allowed"] = False
        run.json("design_report.json", report)
        run.csv("pulse_samples.csv", ["t", "omega_lin"],
                [[_num(a), _num(b)] for a, b in zip(t, omega_lin)])
        run.close()
        raise
    report["allowed"] = bool(d.allowed_ratio <= 1.0)
    if tr is None:
        run.csv("pulse_samples.csv", ["t", "omega_lin"],
                [[_num(a), _num(b)] for a, b in zip(t, omega_lin)])
    else:
        from .pulse_solver import carrier_transform

        omega_tr = tr.evaluate_grid(t)
        back = carrier_transform(omega_tr, gate.mu)
        report["transformed"] = {
            "max_abs": float(np.abs(omega_tr).max()),
            "roundtrip_residual_over_mu": float(np.abs(back - omega_lin).max() / gate.mu),
        }
        run.json("pulse_transformed.json", pulse_to_dict(tr))
        run.csv("pulse_samples.csv", ["t", "omega_lin", "omega_tr"],
                [[_num(a), _num(b), _num(c)] for a, b, c in zip(t, omega_lin, omega_tr)])
    run.json("design_report.json", report)
    return run


def _load_pulse(path):
    try:
        return pulse_from_dict(json.loads(Path(path).read_text()))
    except OSError as exc:
        raise ConfigError(f"cannot read pulse {path}: {exc.strerror}", "pulse") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in pulse {path}: {exc.msg}", "pulse") from None


def cmd_analyze(args, cfg):
    chain = chain_from_config(cfg)
    pulse = _load_pulse(args.pulse)
    gate = gate_from_config(cfg, pulse)
    resolved = {"chain": chain_to_config(chain), "gate": gate_to_config(gate),
                "analyze": {"pulse": pulse_to_dict(pulse), "spin_flip": args.spin_flip}}
    run = Run(args.out_dir, "analyze", args.config, resolved)
    modes = chain_modes(chain)
    run.json("breakdown.json", fidelity_breakdown(pulse, modes, gate, spin_flip=args.spin_flip).to_dict())
    if args.trajectories:
        traj = trajectories(pulse, modes, gate, carrier_on=True)
        n_modes = modes.n_modes
        header = ["t"] + [f"{part}_alpha_{i}_{m}" for i in range(2) for m in range(n_modes)
                          for part in ("re", "im")] + ["chi12", "phi"]
        rows = []
        for k, t in enumerate(traj.times):
            row = [_num(t)]
            for i in range(2):
                for m in range(n_modes):
                    a = traj.alpha[k, i, m]
                    row += [_num(a.real), _num(a.imag)]
            rows.append(row + [_num(traj.chi12[k]), _num(traj.phi_carrier[k])])
        run.csv(Path(args.trajectories).name, header, rows)
    return run


def _parse_cutoffs(text, modes, mu):
    if text is None:
        return default_cutoffs(modes, mu)
    if isinstance(text, (list, tuple)):
        return tuple(int(c) for c in text)
    try:
        return tuple(int(c) for c in str(text).split(","))
    except ValueError:
        raise ConfigError(f"cutoffs must be comma-separated integers, got {text!r}",
                          "cutoffs") from None


def _initial_state(name):
    if name in NAMED_STATES:
        return NAMED_STATES[name]()
    path = Path(name)
    try:
        data = json.loads(path.read_text())
    except OSError:
        raise ConfigError(f"state must be one of {sorted(NAMED_STATES)} or a JSON file, got {name!r}",
                          "state") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in state {name}: {exc.msg}", "state") from None
    amps = data.get("qubit_state")
    if not isinstance(amps, list) or len(amps) != 4:
        raise ConfigError("state file needs 'qubit_state': four [re, im] pairs", "state")
    return np.array([complex(re, im) for re, im in amps])


def cmd_simulate(args, cfg):
    chain = chain_from_config(cfg)
    pulse = _load_pulse(args.pulse)
    gate = gate_from_config(cfg, pulse)
    sim = dict(_section(cfg, "simulation", required=False))
    _check_keys("simulation", sim, ("hamiltonian", "state", "cutoffs", "steps_per_period",
                                    "check_halving", "max_dim"))
    modes = chain_modes(chain)
    kind = args.hamiltonian or sim.get("hamiltonian", "ld")
    states = args.state or sim.get("state", "11z")
    states = states if isinstance(states, list) else str(states).split(",")
    cut = _parse_cutoffs(args.cutoffs if args.cutoffs is not None else sim.get("cutoffs"),
                         modes, gate.mu)
    spp = args.steps_per_period or sim.get("steps_per_period")
    spp = int(spp) if spp else None
    halving = sim.get("check_halving", True) if args.check_halving is None else args.check_halving
    max_dim = int(sim.get("max_dim", 1_000_000))
    space = build_space(modes, cut, max_dim=max_dim)
    qubit = [_initial_state(s) for s in states]
    resolved = {
        "chain": chain_to_config(chain), "gate": gate_to_config(gate),
        "simulation": {"hamiltonian": kind, "state": states, "cutoffs": list(cut),
                       "steps_per_period": spp, "check_halving": bool(halving), "max_dim": max_dim},
        "pulse": pulse_to_dict(pulse),
    }
    run = Run(args.out_dir, "simulate", args.config, resolved)

    def one(q):
        return propagate(space, kind, pulse, gate, product_state(space, q),
                         steps_per_period=spp, check_halving=bool(halving))

    if args.threads > 1 and len(qubit) > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(one, qubit))
    else:
        results = [one(q) for q in qubit]
    out = {}
    for name, res in zip(states, results):
        rec = res.to_dict()
        if res.x_string is not None:
            rec["phonon_excitation_prob"], rec["spin_flip_prob"] = extract_channels(res)
        out[Path(name).stem if name not in NAMED_STATES else name] = rec
    run.json("simulation.json", {"results": out})
    if args.dump:
        for name, res in zip(states, results):
            label = Path(name).stem if name not in NAMED_STATES else name
            run.binary(f"state_{label}.bin", lambda p, r=res: write_state(p, r.final_state))
    return run


def cmd_scan(args, cfg):
    chain = chain_from_config(cfg)
    spec, extra = grid_from_config(cfg)
    gate_values = _section(cfg, "gate", required=False)
    psi = float(gate_values.get("psi", 0.0))
    phi = float(gate_values.get("phi_target", np.pi / 4))
    n_seg = extra.get("n_seg")
    resolved = {"chain": chain_to_config(chain), "gate": {"psi": psi, "phi_target": phi},
                "scan": dict(extra, **asdict(spec))}
    run = Run(args.out_dir, "scan", args.config, resolved)
    modes = chain_modes(chain)
    grid = scan_grid(modes, spec, psi=psi, phi_target=phi, n_seg=n_seg, workers=args.threads)
    cols = ["t_gate", "mu", "feasible", "allowed", "inf_lin", "inf_tr", "max_omega_ratio"]
    rows = [[_num(r["t_gate"]), _num(r["mu"]), int(r["feasible"]), int(r["allowed"]),
             _num(r["inf_lin"]), _num(r["inf_tr"]), _num(r["max_omega_ratio"])]
            for r in grid.rows()]
    run.csv("scan.csv", cols, rows)
    run.json("scan_summary.json", grid.summary())
    if extra.get("spin_flip_points"):
        pts = [(float(t), 2 * np.pi * float(f)) for t, f in extra["spin_flip_points"]]
        run.json("spin_flip.json", {"points": spin_flip_points(modes, pts, psi=psi,
                                                                phi_target=phi, n_seg=n_seg)})
    if extra.get("n_ions_list"):
        rows = min_gate_times(chain, extra["n_ions_list"], spec,
                              threshold=float(extra.get("threshold", 1e-5)),
                              lowest_radial_hz=float(extra.get("lowest_radial_hz", 0.75e6)),
                              workers=args.threads, psi=psi, phi_target=phi)
        run.json("min_gate_times.json", {"chains": rows})
    return run


COMMANDS = {"modes": cmd_modes, "design": cmd_design, "analyze": cmd_analyze,
            "simulate": cmd_simulate, "scan": cmd_scan}


def build_parser():
    p = argparse.ArgumentParser(prog="msgate", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"msgate {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", nargs="+", help="JSON config files, merged in order")
    common.add_argument("--out-dir", default=".", help="output directory (default: cwd)")
    common.add_argument("--threads", type=int, default=1, help="worker count for scan/simulate")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("modes", parents=[common], help="equilibrium, normal modes, Lamb-Dicke")

    d = sub.add_parser("design", parents=[common], help="solve and transform the pulse")
    d.add_argument("--transform", action=argparse.BooleanOptionalAction, default=None)
    d.add_argument("--segments", type=int, default=None, help="spline segment count")

    a = sub.add_parser("analyze", parents=[common], help="analytic fidelity breakdown")
    a.add_argument("--pulse", required=True)
    a.add_argument("--spin-flip", action=argparse.BooleanOptionalAction, default=True)
    a.add_argument("--trajectories", default=None, help="CSV file name for alpha/chi/phi curves")

    s = sub.add_parser("simulate", parents=[common], help="time-dependent Schrodinger simulation")
    s.add_argument("--pulse", required=True)
    s.add_argument("--hamiltonian", choices=("full", "ld"), default=None)
    s.add_argument("--state", default=None,
                   help="11z, 11x, 1m1x or a JSON file; comma-separate to run several")
    s.add_argument("--cutoffs", default=None, help="comma-separated Fock cutoffs per mode")
    s.add_argument("--steps-per-period", type=int, default=None)
    s.add_argument("--check-halving", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--dump", action="store_true", help="write final state vectors")

    sub.add_parser("scan", parents=[common], help="(t_gate, mu) grid scan")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_configs(args.config)
        run = COMMANDS[args.command](args, cfg)
        run.close()
    except MSGateError as exc:
        sys.stderr.write(json.dumps(_clean(exc.to_dict()), sort_keys=True) + "\n")
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        sys.stderr.write(json.dumps({"error": "ConfigError", "message": str(exc)}) + "\n")
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
