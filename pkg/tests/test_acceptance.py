"""Acceptance criteria 1-8, each recorded as one pass/fail line in the terminal summary.

The TDSE and full-scan checks take tens of minutes on one CPU; they carry the
``slow`` marker so ``pytest -m "not slow"`` skips them.
"""
import json
import math
import time

import numpy as np
import pytest

from msgate.cli import main
from msgate.gate_analytics import (STRINGS, displacement_element, fidelity_breakdown,
                                   infidelity_z, spin_flip_probability, trajectories)
from msgate.ion_chain import ChainConfig, chain_modes
from msgate.pulse_basis import Pulse, build_basis, zero_pulse
from msgate.pulse_solver import (GateSpec, assemble_A, assemble_B, carrier_transform,
                                 design_pulse, inverse_carrier_transform, transform_constant)
from msgate.scan import GridSpec, default_workers, scan_grid
from msgate.tdse_sim import (HALVING_FACTOR, NAMED_STATES, adaptive_cutoffs, build_space, extract_channels,
                             product_state, propagate)

from .conftest import FIVE_ION, K_RADIAL, record
from .oracles import dense_displacement_element, dense_spin_flip


def _fmt(x):
    return f"{x:.3g}"


# ---------------------------------------------------------------------------
# 1. transform constant


def test_criterion_1_transform_constant():
    start = time.perf_counter()
    c = transform_constant()
    elapsed = time.perf_counter() - start
    ok = abs(c - 0.581865) <= 1e-5 and elapsed < 1.0
    record(1, "C", ok, f"{c:.7f} (target 0.581865 +- 1e-5), {elapsed * 1e3:.1f} ms")
    assert ok


# ---------------------------------------------------------------------------
# 2. 5-ion |11>_z infidelities


def test_criterion_2_wavevector_recorded_in_manifest(tmp_path):
    from pathlib import Path
    cfg = Path(__file__).resolve().parents[1] / "configs" / "ion5.json"
    assert main(["design", str(cfg), "--out-dir", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest_design.json").read_text())
    report = json.loads((tmp_path / "design_report.json").read_text())
    k = manifest["resolved"]["chain"]["wavevector_radial"]
    ok = k == pytest.approx(K_RADIAL, rel=1e-12) and report["allowed_ratio"] < 1
    record(2, "calibration", ok,
           f"k={k:.6e} 1/m in manifest, max|Omega_lin|/(C mu)={report['allowed_ratio']:.4f}")
    assert ok


def test_criterion_2_analytic(five_design, five_modes, five_gate):
    tr = infidelity_z(trajectories(five_design.transformed, five_modes, five_gate, True))
    lin = infidelity_z(trajectories(five_design.linear.pulse, five_modes, five_gate, True))
    ok = tr <= 1e-5 and 0.4 * 1.2e-2 <= lin <= 2.5 * 1.2e-2
    record(2, "analytic", ok, f"tr {_fmt(tr)} (<=1e-5), lin {_fmt(lin)} (1.2e-2 x[0.4,2.5])")
    assert ok


def _tdse(kind, pulse, modes, gate, bump=0):
    cut = tuple(c + bump for c in adaptive_cutoffs(pulse, modes, gate))
    space = build_space(modes, cut)
    psi0 = product_state(space, NAMED_STATES["11z"]())
    if bump == 0:
        return propagate(space, kind, pulse, gate, psi0)
    # single pass at the tolerance of the refined half of the halving check
    return propagate(space, kind, pulse, gate, psi0, check_halving=False,
                     rtol=1e-10 / HALVING_FACTOR, atol=1e-12 / HALVING_FACTOR)


@pytest.fixture(scope="module")
def tdse_runs(five_design, five_modes, five_gate):
    """``{(kind, pulse): (result, result_with_cutoffs_plus_2)}``, computed lazily."""
    cache = {}
    pulses = {"tr": five_design.transformed, "lin": five_design.linear.pulse}

    def get(kind, name):
        if (kind, name) not in cache:
            base = _tdse(kind, pulses[name], five_modes, five_gate)
            bumped = _tdse(kind, pulses[name], five_modes, five_gate, bump=2)
            cache[kind, name] = (base, bumped)
        return cache[kind, name]
    return get


def _converged(pair):
    base, bumped = pair
    return abs(bumped.infidelity - base.infidelity) / base.infidelity


@pytest.mark.slow
def test_criterion_2_tdse_lamb_dicke(tdse_runs, five_design, five_modes, five_gate):
    tr, lin = tdse_runs("ld", "tr"), tdse_runs("ld", "lin")
    analytic = infidelity_z(trajectories(five_design.linear.pulse, five_modes, five_gate, True))
    ratio = lin[0].infidelity / analytic
    conv = max(_converged(tr), _converged(lin))
    drift = max(tr[0].norm_drift, lin[0].norm_drift)
    ok = (tr[0].infidelity <= 1e-5 and 0.5 <= ratio <= 2.0 and conv < 0.05 and drift < 1e-9)
    record(2, "TDSE-LD", ok,
           f"tr {_fmt(tr[0].infidelity)} (<=1e-5), lin {_fmt(lin[0].infidelity)} "
           f"= {ratio:.3f} x analytic, cutoffs {tr[0].cutoffs}, +2 cutoffs change "
           f"{conv:.1%}, norm drift {drift:.1e}")
    assert ok


@pytest.mark.slow
def test_criterion_2_tdse_full(tdse_runs):
    tr, lin = tdse_runs("full", "tr"), tdse_runs("full", "lin")
    ld_tr = tdse_runs("ld", "tr")[0]
    conv = max(_converged(tr), _converged(lin))
    drift = max(tr[0].norm_drift, lin[0].norm_drift)
    # higher Lamb-Dicke orders only add error for the compensated pulse
    gap = tr[0].infidelity >= ld_tr.infidelity - 1e-7
    ok = (tr[0].infidelity <= 1e-4 and 0.4 * 1.4e-2 <= lin[0].infidelity <= 2.5 * 1.4e-2
          and conv < 0.05 and drift < 1e-9 and gap)
    record(2, "TDSE-full", ok,
           f"tr {_fmt(tr[0].infidelity)} (<=1e-4), lin {_fmt(lin[0].infidelity)} "
           f"(1.4e-2 x[0.4,2.5]), +2 cutoffs change {conv:.1%}, norm drift {drift:.1e}, "
           f"full >= LD for tr: {gap}")
    assert ok


# ---------------------------------------------------------------------------
# 3. |1,+-1>_x contributions

TABLE_ANALYTIC = {
    ("tr", (1, 1)): (1.9e-6, 9.3e-7),
    ("tr", (1, -1)): (6.3e-7, 5.7e-7),
    ("lin", (1, 1)): (8.8e-4, 3.6e-7),
    ("lin", (1, -1)): (1.1e-4, 2.5e-7),
}


def test_criterion_3_x_string_contributions(five_design, five_modes, five_gate):
    got = {}
    for name, pulse in (("tr", five_design.transformed), ("lin", five_design.linear.pulse)):
        b = fidelity_breakdown(pulse, five_modes, five_gate)
        for s in ((1, 1), (1, -1)):
            got[name, s] = (b.P_ph_per_string[s], b.P_flip_per_string[s])
    factors = [max(v / ref, ref / v) for key, refs in TABLE_ANALYTIC.items()
               for v, ref in zip(got[key], refs)]
    within = max(factors) <= 3.0
    tr_total = max(sum(got["tr", s]) for s in ((1, 1), (1, -1)))
    dominance = min(got["lin", s][0] / got["lin", s][1] for s in ((1, 1), (1, -1)))
    ok = within and tr_total <= 1e-5 and dominance >= 100
    record(3, "x strings", ok,
           f"worst factor {max(factors):.2f} (<=3) over 8 entries, tr total "
           f"{_fmt(tr_total)} (<=1e-5), lin P_ph/P_flip >= {dominance:.0f} (>=100)")
    assert ok


# ---------------------------------------------------------------------------
# 4. spin-flip integral against the dense construction


def test_criterion_4_spin_flip_oracle(two_design, two_modes, two_gate):
    start = time.perf_counter()
    worst = 0.0
    ok = True
    for s in ((1, 1), (1, -1)):
        got = spin_flip_probability(two_design.transformed, two_modes, two_gate, s)
        ref = dense_spin_flip(two_design.transformed, two_modes, two_gate, s, cutoff=10)
        tol = max(1e-8, 1e-2 * abs(ref))
        ok &= abs(got - ref) <= tol
        worst = max(worst, abs(got - ref) / ref)
    elapsed = time.perf_counter() - start
    ok = ok and elapsed < 60
    record(4, "2 ions, cutoff 10", ok,
           f"worst relative difference {worst:.1e}, {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------------------
# 5. displacement identities


def test_criterion_5_displacement_identities():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        a1, a2, a3 = (0.3 * (rng.uniform(-1, 1, 3) + 1j * rng.uniform(-1, 1, 3))
                      for _ in range(3))
        for beta1 in (1, 2):
            for beta2 in (1, 2):
                got = displacement_element(beta1, beta2, a1, a2, a3)
                for m1 in range(3):
                    for m2 in range(3):
                        ref = dense_displacement_element(beta1, beta2, m1, m2, a1, a2, a3)
                        worst = max(worst, abs(got[m1, m2] - ref))
    ok = worst < 1e-8
    record(5, "100 instances x 4 identities", ok, f"worst |difference| {worst:.1e} (<1e-8)")
    assert ok


# ---------------------------------------------------------------------------
# 6. solver residuals


def test_criterion_6_solver_residuals(five_modes, two_modes):
    cases = [(five_modes, 1.034e6, 41.74e-6), (five_modes, 1.06e6, 100e-6),
             (five_modes, 1.05e6, 150e-6), (two_modes, 1.05e6, 40e-6),
             (two_modes, 1.05e6, 60e-6)]
    worst_a = worst_phi = worst_s = 0.0
    for modes, mu_hz, t in cases:
        gate = GateSpec.from_hz(mu_hz, t)
        d = design_pulse(modes, gate)
        omega = d.linear.pulse.coefficients
        A = assemble_A(d.linear.pulse.basis, modes, gate)
        B = assemble_B(d.linear.pulse.basis, modes, gate)
        worst_a = max(worst_a, np.abs(A @ omega).max() / np.abs(omega).max())
        worst_phi = max(worst_phi, abs(omega @ B @ omega - gate.phi_target))
        times = np.linspace(gate.t0, gate.tf, 4001)
        diff = carrier_transform(d.transformed.evaluate_grid(times), gate.mu) \
            - d.linear.pulse.evaluate_grid(times)
        worst_s = max(worst_s, np.abs(diff).max() / gate.mu)
    ok = worst_a < 1e-8 and worst_phi < 1e-9 and worst_s < 1e-10
    record(6, f"{len(cases)} designs", ok,
           f"|A Omega|/|Omega| {worst_a:.1e}, |phase error| {worst_phi:.1e}, "
           f"|S(Omega_tr) - Omega_lin|/mu {worst_s:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 7. scan trends


@pytest.mark.slow
def test_criterion_7_scan_trends(five_modes):
    start = time.perf_counter()
    grid = scan_grid(five_modes, GridSpec(), workers=default_workers())
    elapsed = time.perf_counter() - start
    s = grid.summary()
    edge = s["t_min"]
    frac_tr = s["interior_frac_inf_tr_le_1e-4"]
    frac_lin = s["interior_frac_inf_lin_ge_1e-3"]
    ok = (edge is not None and 0.75 * 30e-6 <= edge <= 1.25 * 30e-6
          and frac_tr is not None and frac_tr >= 0.9 and frac_lin >= 0.9)
    record(7, "120x80 grid", ok,
           f"lower edge {edge * 1e6:.1f} us (30 us +-25%), interior cells {s['n_interior']}: "
           f"inf_tr<=1e-4 on {frac_tr:.1%}, inf_lin>=1e-3 on {frac_lin:.1%}, "
           f"{elapsed / 60:.1f} min on {default_workers()} worker(s)")
    assert ok


# ---------------------------------------------------------------------------
# 8. fast property suite


def test_criterion_8_property_suite(two_modes, two_gate):
    start = time.perf_counter()
    checks = {}
    rng = np.random.default_rng(8)

    for n in (2, 5, 7):
        m = chain_modes(ChainConfig(**dict(FIVE_ION, n_ions=n, illuminated_pair=(0, 1))))
        v = m.mode_vectors_radial
        checks[f"orthonormal n={n}"] = np.abs(v.T @ v - np.eye(n)).max() < 1e-10

    wz, wx = 2 * math.pi * 0.5e6, 2 * math.pi * 1.0e6
    checks["2-ion frequencies"] = np.allclose(two_modes.mode_freqs_radial,
                                              [math.sqrt(wx ** 2 - wz ** 2), wx], rtol=1e-12)

    basis = build_basis(two_gate.t0, two_gate.tf, 5)
    c1, c2 = rng.normal(size=(2, 5)) * 1e6
    alpha = lambda c: trajectories(Pulse(basis, c), two_modes, two_gate, False).alpha_final
    checks["alpha additivity"] = np.allclose(alpha(c1 + c2), alpha(c1) + alpha(c2),
                                             rtol=0, atol=1e-12)

    y = rng.uniform(-1, 1, 200) * transform_constant() * two_gate.mu
    back = carrier_transform(inverse_carrier_transform(y, two_gate.mu), two_gate.mu)
    checks["S round trip"] = np.abs(back - y).max() < 1e-12 * two_gate.mu

    space = build_space(two_modes, (4, 4))
    d = design_pulse(two_modes, two_gate)
    res = propagate(space, "full", d.transformed, two_gate,
                    product_state(space, NAMED_STATES["11x"]()), check_halving=False)
    checks["TDSE norm drift"] = res.norm_drift < 1e-9

    zero = zero_pulse(two_gate.t0, two_gate.tf, 5)
    psi0 = product_state(space, NAMED_STATES["1m1x"]())
    still = propagate(space, "ld", zero, two_gate, psi0, check_halving=False)
    p_ph, p_flip = extract_channels(still)
    traj = trajectories(zero, two_modes, two_gate, True)
    checks["zero pulse"] = (np.array_equal(still.final_state, psi0) and p_ph == 0 and p_flip == 0
                            and not traj.alpha_final.any()
                            and all(spin_flip_probability(zero, two_modes, two_gate, s) == 0
                                    for s in STRINGS))

    elapsed = time.perf_counter() - start
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and elapsed < 60
    record(8, f"{len(checks)} properties", ok,
           (f"failed: {', '.join(failed)}" if failed else "all hold") + f", {elapsed:.1f} s")
    assert ok
