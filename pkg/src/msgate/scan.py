"""Sweeps over gate duration and detuning: allowed areas, infidelity maps, minimal gate times.

A cell ``(t_gate, mu)`` runs the whole design pipeline: solve for
``Omega_lin``, test ``max |Omega_lin| <= C mu``, transform, and evaluate the
carrier-on zero-order infidelity of ``|11>_z`` for both pulses.  Every cell
depends only on its own parameters and on the grid-wide ``mu_max`` that
fixes the quadrature panels, so cells can be recomputed in isolation and
the result does not depend on how the work is split between processes.
"""
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleError
from .gate_analytics import infidelity_z, spin_flip_probability, trajectories
from .ion_chain import ChainConfig, axial_freq_for_lowest_radial, chain_modes
from .pulse_basis import build_basis, default_n_seg
from .pulse_solver import (GateSpec, allowed_ratio, assemble_A, assemble_B, gate_grid,
                           inverse_transform, solve_linear_pulse, transform_constant)


@dataclass(frozen=True)
class GridSpec:
    """Rectangular ``(t_gate, mu)`` grid; ``mu`` bounds in Hz."""

    t_min: float = 5e-6
    t_max: float = 150e-6
    n_t: int = 120
    mu_min_hz: float = 0.6e6
    mu_max_hz: float = 1.2e6
    n_mu: int = 80

    @property
    def t_gates(self):
        return np.linspace(self.t_min, self.t_max, self.n_t)

    @property
    def mus(self):
        return 2.0 * np.pi * np.linspace(self.mu_min_hz, self.mu_max_hz, self.n_mu)


@dataclass(frozen=True, eq=False)
class ScanGrid:
    """Per-cell results, arrays indexed ``[t_index, mu_index]``.

    ``inf_lin`` is defined on feasible cells, ``inf_tr`` only on allowed
    cells (NaN elsewhere); ``max_omega_ratio`` is ``max|Omega_lin| / (C mu)``.
    """

    t_gates: np.ndarray = field(repr=False)
    mus: np.ndarray = field(repr=False)
    feasible: np.ndarray = field(repr=False)
    allowed: np.ndarray = field(repr=False)
    inf_lin: np.ndarray = field(repr=False)
    inf_tr: np.ndarray = field(repr=False)
    max_omega_ratio: np.ndarray = field(repr=False)
    nullspace_dim: np.ndarray = field(repr=False)
    transform_constant: float = None
    psi: float = 0.0
    phi_target: float = np.pi / 4

    def rows(self):
        """Long-format records in ``(t, mu)`` index order."""
        for a, t in enumerate(self.t_gates):
            for b, mu in enumerate(self.mus):
                yield {
                    "t_gate": float(t),
                    "mu": float(mu),
                    "feasible": bool(self.feasible[a, b]),
                    "allowed": bool(self.allowed[a, b]),
                    "inf_lin": float(self.inf_lin[a, b]),
                    "inf_tr": float(self.inf_tr[a, b]),
                    "max_omega_ratio": float(self.max_omega_ratio[a, b]),
                }

    def interior(self):
        """Allowed cells whose four grid neighbours are allowed as well."""
        a = self.allowed
        inner = a.copy()
        inner[0, :] = inner[-1, :] = False
        inner[:, 0] = inner[:, -1] = False
        inner[1:-1, 1:-1] &= a[:-2, 1:-1] & a[2:, 1:-1] & a[1:-1, :-2] & a[1:-1, 2:]
        return inner

    def lower_edge(self):
        """Shortest allowed gate duration (``None`` if nothing is allowed)."""
        rows = np.flatnonzero(self.allowed.any(axis=1))
        return float(self.t_gates[rows[0]]) if rows.size else None

    def t_min_star(self, threshold=1e-5):
        """Shortest duration with an allowed cell reaching ``inf_tr <= threshold``."""
        ok = self.allowed & (np.nan_to_num(self.inf_tr, nan=np.inf) <= threshold)
        rows = np.flatnonzero(ok.any(axis=1))
        return float(self.t_gates[rows[0]]) if rows.size else None

    def summary(self):
        inner = self.interior()
        n_in = int(inner.sum())
        frac = lambda mask: float(mask[inner].mean()) if n_in else None
        return {
            "transform_constant": self.transform_constant,
            "n_cells": int(self.feasible.size),
            "n_feasible": int(self.feasible.sum()),
            "n_allowed": int(self.allowed.sum()),
            "n_interior": n_in,
            "t_min": self.lower_edge(),
            "t_min_star": self.t_min_star(),
            "mu_range_allowed": _mu_range(self),
            "interior_frac_inf_tr_le_1e-4": frac(np.nan_to_num(self.inf_tr, nan=np.inf) <= 1e-4),
            "interior_frac_inf_lin_ge_1e-3": frac(np.nan_to_num(self.inf_lin, nan=-np.inf) >= 1e-3),
        }


def _mu_range(grid):
    cols = np.flatnonzero(grid.allowed.any(axis=0))
    if not cols.size:
        return None
    return [float(grid.mus[cols[0]]), float(grid.mus[cols[-1]])]


def _row(args):
    """All cells sharing one gate duration (one basis, one quadrature grid)."""
    modes, t_gate, mus, mu_max, psi, phi, n_seg = args
    prepared = _prepare(modes, t_gate, mu_max, n_seg)
    return [scan_cell(modes, t_gate, mu, mu_max, psi=psi, phi_target=phi, n_seg=n_seg,
                      prepared=prepared) for mu in mus]


def _prepare(modes, t_gate, mu_max, n_seg):
    n_seg = default_n_seg(modes.n_modes) if n_seg is None else n_seg
    basis = build_basis(0.0, t_gate, n_seg)
    probe = GateSpec(mu=mu_max, t0=0.0, tf=t_gate)
    grid = gate_grid(basis, probe, mu_max=mu_max)
    return basis, grid, basis.values(grid.flat_nodes)


def scan_cell(modes, t_gate, mu, mu_max, psi=0.0, phi_target=np.pi / 4, n_seg=None,
              prepared=None):
    """One grid cell; returns ``(feasible, allowed, inf_lin, inf_tr, ratio, null_dim)``.

    ``prepared`` reuses the basis and quadrature grid of the row, which
    depend only on ``t_gate`` and ``mu_max``.
    """
    gate = GateSpec(mu=mu, t0=0.0, tf=t_gate, psi=psi, phi_target=phi_target)
    basis, grid, bv = _prepare(modes, t_gate, mu_max, n_seg) if prepared is None else prepared
    A = assemble_A(basis, modes, gate, grid, bv)
    B = assemble_B(basis, modes, gate, grid, bv)
    try:
        lin = solve_linear_pulse(A, B, gate, basis)
    except InfeasibleError:
        return False, False, np.nan, np.nan, np.nan, 0
    ratio = allowed_ratio(lin.pulse, mu)
    inf_lin = infidelity_z(trajectories(lin.pulse, modes, gate, True, grid))
    if ratio > 1.0:
        return True, False, inf_lin, np.nan, ratio, lin.nullspace_dim
    tr = inverse_transform(lin.pulse, mu)
    inf_tr = infidelity_z(trajectories(tr, modes, gate, True, grid))
    return True, True, inf_lin, inf_tr, ratio, lin.nullspace_dim


def scan_grid(modes, spec=GridSpec(), psi=0.0, phi_target=np.pi / 4, n_seg=None, workers=1,
              progress=None):
    """Run every cell of ``spec``.

    Parameters
    ----------
    workers : int
        Process count; rows are distributed in order and reassembled by
        index, so the output is identical for any worker count.
    progress : callable, optional
        Called with the number of finished rows.
    """
    t_gates, mus = spec.t_gates, spec.mus
    mu_max = float(mus.max())
    jobs = [(modes, float(t), mus, mu_max, psi, phi_target, n_seg) for t in t_gates]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = []
            for k, r in enumerate(pool.map(_row, jobs, chunksize=1)):
                results.append(r)
                if progress:
                    progress(k + 1)
    else:
        results = []
        for k, job in enumerate(jobs):
            results.append(_row(job))
            if progress:
                progress(k + 1)
    get = lambda j, dt: np.array([[c[j] for c in row] for row in results], dtype=dt)
    return ScanGrid(
        t_gates=t_gates, mus=mus,
        feasible=get(0, bool), allowed=get(1, bool),
        inf_lin=get(2, float), inf_tr=get(3, float),
        max_omega_ratio=get(4, float), nullspace_dim=get(5, int),
        transform_constant=transform_constant(), psi=psi, phi_target=phi_target,
    )


def retuned_chain(n_ions, template, lowest_radial_hz=0.75e6):
    """Copy of ``template`` with the axial frequency placing the lowest radial mode.

    The radial band then spans ``(lowest_radial_hz, radial_freq_hz)`` for
    every chain length.
    """
    axial = axial_freq_for_lowest_radial(n_ions, template.radial_freq_hz, lowest_radial_hz)
    pair = template.illuminated_pair
    if max(pair) >= n_ions:
        pair = (0, 1)
    return ChainConfig(n_ions=n_ions, axial_freq_hz=axial, radial_freq_hz=template.radial_freq_hz,
                       wavevector_radial=template.wavevector_radial, ion_mass=template.ion_mass,
                       wavevector_axial=template.wavevector_axial, illuminated_pair=pair,
                       charge=template.charge)


def min_gate_times(template, n_ions_list, spec=GridSpec(), threshold=1e-5, lowest_radial_hz=0.75e6,
                   workers=1, psi=0.0, phi_target=np.pi / 4):
    """``t_min`` and ``t_min*`` per chain length.

    Returns a list of dicts with ``n_ions``, ``axial_freq_hz``, ``t_min`` and
    ``t_min_star`` (``None`` when the allowed area is empty or never reaches
    the threshold) plus ``monotone`` flags for both series.
    """
    out = []
    for n in n_ions_list:
        cfg = retuned_chain(n, template, lowest_radial_hz)
        grid = scan_grid(chain_modes(cfg), spec, psi=psi, phi_target=phi_target, workers=workers)
        out.append({"n_ions": int(n), "axial_freq_hz": cfg.axial_freq_hz,
                    "t_min": grid.lower_edge(), "t_min_star": grid.t_min_star(threshold)})
    for key in ("t_min", "t_min_star"):
        vals = [r[key] for r in out if r[key] is not None]
        mono = all(b >= a for a, b in zip(vals, vals[1:]))
        for r in out:
            r[f"{key}_monotone"] = mono
    return out


def spin_flip_points(modes, points, s=(1, 1), psi=0.0, phi_target=np.pi / 4, n_seg=None):
    """Carrier-compensated spin-flip probability at selected ``(t_gate, mu)`` points.

    Points outside the allowed area (or infeasible) get ``None``.
    """
    from .pulse_solver import design_pulse

    rows = []
    for t_gate, mu in points:
        gate = GateSpec(mu=mu, t0=0.0, tf=t_gate, psi=psi, phi_target=phi_target)
        rec = {"t_gate": float(t_gate), "mu": float(mu), "p_flip": None}
        try:
            d = design_pulse(modes, gate, n_seg=n_seg)
        except InfeasibleError as exc:
            rec["error"] = type(exc).__name__
            rows.append(rec)
            continue
        rec["p_flip"] = spin_flip_probability(d.transformed, modes, gate, s)
        rows.append(rec)
    return rows


def default_workers():
    return max(1, os.cpu_count() or 1)
