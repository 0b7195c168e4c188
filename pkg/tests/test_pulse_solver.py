import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from msgate.errors import InfeasibleError, OutsideAllowedAreaError, PhaseUnreachableError
from msgate.gate_analytics import trajectories
from msgate.pulse_basis import Pulse, build_basis
from msgate.pulse_solver import (GateSpec, allowed_ratio, assemble_A, assemble_B,
                                 carrier_transform, carrier_transform_bessel_sum, design_pulse,
                                 inverse_carrier_transform, inverse_transform, nullspace,
                                 peak_drive, solve_linear_pulse, spline_extremum,
                                 transform_constant, transform_maximum)

MU = 2 * math.pi * 1.034e6


def _j1_series(x, terms=40):
    return sum((-1) ** k * (x / 2) ** (2 * k + 1) / (math.factorial(k) * math.factorial(k + 1))
               for k in range(terms))


def test_transform_constant_value():
    assert transform_constant() == pytest.approx(0.581865, abs=1e-5)
    # first zero of J1', a tabulated constant
    assert transform_maximum()[0] == pytest.approx(1.8411837813406593, abs=1e-12)
    assert peak_drive(MU) == pytest.approx(0.5 * 1.8411837813406593 * MU, rel=1e-12)


@pytest.mark.parametrize("x", [0.0, 0.1, 0.7, 1.3, 1.84, 2.5, 3.9])
def test_transform_matches_power_series(x):
    omega = x * MU / 2
    assert carrier_transform(omega, MU) == pytest.approx(MU * _j1_series(x), abs=1e-12 * MU)


@given(x=st.floats(-5, 5))
def test_transform_bessel_sum_form(x):
    omega = x * MU / 2
    assert carrier_transform_bessel_sum(omega, MU) == pytest.approx(
        carrier_transform(omega, MU), abs=1e-12 * MU)


def test_transform_small_amplitude_limit():
    omega = 1e-4 * MU
    assert carrier_transform(omega, MU) == pytest.approx(omega, rel=1e-7)


@given(frac=st.floats(-1.0, 1.0))
def test_inverse_round_trip(frac):
    y = frac * transform_constant() * MU
    omega = inverse_carrier_transform(np.array([y]), MU)
    assert abs(omega[0]) <= peak_drive(MU) * (1 + 1e-12)
    assert carrier_transform(omega, MU)[0] == pytest.approx(y, abs=1e-12 * MU)
    assert np.sign(omega[0]) == np.sign(y)


def test_inverse_outside_range_raises():
    with pytest.raises(OutsideAllowedAreaError) as info:
        inverse_carrier_transform(np.array([0.59 * MU]), MU)
    assert info.value.margin == pytest.approx(0.59 - transform_constant(), abs=1e-12)


def _exact_A(basis, freqs, gate):
    """Closed-form segment integrals of cubic x exponential."""
    seg = basis.coefficients  # [k, power, s]
    A = np.zeros((len(freqs), basis.n_seg), dtype=complex)
    h = basis.h
    for m, w in enumerate(freqs):
        for lam, ph in ((w + gate.mu, gate.psi), (w - gate.mu, -gate.psi)):
            il = 1j * lam
            for k in range(basis.n_segments):
                c = seg[k]
                # derivatives of the local cubic at u = 0 and u = h
                def derivs(u):
                    return [c[0] + c[1] * u + c[2] * u ** 2 + c[3] * u ** 3,
                            c[1] + 2 * c[2] * u + 3 * c[3] * u ** 2,
                            2 * c[2] + 6 * c[3] * u,
                            6 * c[3] + 0 * u]
                F = lambda u: np.exp(il * u) * sum((-1) ** j * d / il ** (j + 1)
                                                   for j, d in enumerate(derivs(u)))
                A[m] += 0.5 * np.exp(1j * (lam * basis.knots[k] + ph)) * (F(h) - F(0.0))
    return A


@pytest.mark.parametrize("psi", [0.0, 0.4])
def test_closure_matrix_matches_closed_form(five_modes, psi):
    gate = GateSpec.from_hz(1.034e6, 41.74e-6, psi=psi)
    basis = build_basis(gate.t0, gate.tf, 11)
    A = assemble_A(basis, five_modes, gate)
    ref = _exact_A(basis, five_modes.freqs, gate)
    assert np.max(np.abs(A - ref)) < 1e-11 * np.max(np.abs(ref))


def _ode_phase(pulse, modes, gate):
    """chi_12(tf) without carrier by direct ODE integration."""
    M = modes.n_modes
    eta = modes.eta

    def rhs(t, y):
        alpha = y[:2 * M].reshape(2, M)
        g = pulse.evaluate(t) * math.cos(gate.mu * t + gate.psi)
        f = eta * g * np.exp(1j * modes.freqs * t)
        dchi = 2 * np.real(np.sum(alpha[0] * np.conj(f[1])))
        return np.r_[(-1j * f).ravel(), dchi]

    y0 = np.zeros(2 * M + 1, dtype=complex)
    sol = solve_ivp(rhs, (gate.t0, gate.tf), y0, method="DOP853", rtol=1e-12, atol=1e-15)
    return sol.y[:, -1]


def test_phase_form_matches_ode(two_modes, two_gate, rng):
    basis = build_basis(two_gate.t0, two_gate.tf, 5)
    pulse = Pulse(basis, rng.normal(size=5) * 1e6)
    B = assemble_B(basis, two_modes, two_gate)
    y = _ode_phase(pulse, two_modes, two_gate)
    chi_ode = y[-1].real
    chi_form = pulse.coefficients @ B @ pulse.coefficients
    assert chi_form == pytest.approx(chi_ode, rel=1e-8, abs=1e-12)
    traj = trajectories(pulse, two_modes, two_gate, carrier_on=False)
    assert traj.chi12[-1] == pytest.approx(chi_ode, rel=1e-8, abs=1e-12)
    np.testing.assert_allclose(traj.alpha_final.ravel(), y[:-1], atol=1e-10)


@given(c1=st.lists(st.floats(-1, 1), min_size=5, max_size=5),
       c2=st.lists(st.floats(-1, 1), min_size=5, max_size=5))
def test_closure_is_linear_in_amplitudes(two_modes, two_gate, c1, c2):
    basis = build_basis(two_gate.t0, two_gate.tf, 5)
    A = assemble_A(basis, two_modes, two_gate)
    a1, a2 = np.array(c1), np.array(c2)
    np.testing.assert_allclose(A @ (a1 + a2), A @ a1 + A @ a2, atol=1e-18)


def test_five_ion_solution_residuals(five_design, five_modes, five_gate):
    lin = five_design.linear
    omega = lin.pulse.coefficients
    A = assemble_A(lin.pulse.basis, five_modes, five_gate)
    assert np.max(np.abs(A @ omega)) < 1e-8 * np.max(np.abs(omega))
    assert lin.closure_residual_rel < 1e-12
    assert abs(lin.phase_residual) < 1e-9
    assert lin.nullspace_dim == 1
    vals = lin.pulse.evaluate_grid(np.linspace(five_gate.t0, five_gate.tf, 2001))
    assert vals.max() >= -vals.min()


def test_five_ion_allowed_and_transform_pointwise(five_design, five_gate):
    assert five_design.allowed
    assert five_design.allowed_ratio == pytest.approx(0.7203, abs=5e-4)
    t = np.linspace(five_gate.t0, five_gate.tf, 4001)
    lin = five_design.linear.pulse.evaluate_grid(t)
    tr = five_design.transformed.evaluate_grid(t)
    assert np.max(np.abs(carrier_transform(tr, five_gate.mu) - lin)) < 1e-10 * five_gate.mu
    assert np.all(np.abs(tr) >= np.abs(lin) - 1e-9)


def test_spline_extremum_matches_dense_sampling(five_design):
    pulse = five_design.linear.pulse
    peak, where = spline_extremum(pulse)
    t = np.linspace(pulse.t0, pulse.tf, 200001)
    dense = np.abs(pulse.evaluate_grid(t))
    assert peak >= dense.max() * (1 - 1e-12)
    assert peak == pytest.approx(dense.max(), rel=1e-8)
    assert abs(pulse.evaluate(where)) == pytest.approx(peak, rel=1e-12)


def test_minimal_norm_in_degenerate_nullspace(rng):
    basis = build_basis(0.0, 1.0, 3)
    gate = GateSpec(mu=1.0, t0=0.0, tf=1.0, phi_target=0.5)
    A = np.array([[1.0, 2.0, -1.0]], dtype=complex)  # real row: nullspace of dimension 2
    Q = rng.normal(size=(3, 3))
    B = Q + Q.T + 4 * np.eye(3)
    sol = solve_linear_pulse(A, B, gate, basis)
    assert sol.nullspace_dim == 2
    omega = sol.pulse.coefficients
    assert omega @ B @ omega == pytest.approx(0.5, rel=1e-12)
    assert np.abs(A @ omega).max() < 1e-12
    N, _ = nullspace(A)
    best = np.inf
    for th in np.linspace(0, np.pi, 200001):
        v = N @ np.array([np.cos(th), np.sin(th)])
        q = v @ B @ v
        if q > 0:
            best = min(best, math.sqrt(0.5 / q))
    assert np.linalg.norm(omega) == pytest.approx(best, rel=1e-9)


def test_phase_of_wrong_sign_unreachable():
    basis = build_basis(0.0, 1.0, 3)
    gate = GateSpec(mu=1.0, t0=0.0, tf=1.0, phi_target=0.5)
    A = np.array([[1.0, 0.0, 0.0]], dtype=complex)
    with pytest.raises(PhaseUnreachableError):
        solve_linear_pulse(A, -np.eye(3), gate, basis)


def test_too_few_segments_is_infeasible(five_modes, five_gate):
    with pytest.raises(InfeasibleError) as info:
        design_pulse(five_modes, five_gate, n_seg=6)
    assert info.value.smallest_singular_value > 0


def test_short_gate_outside_allowed_area(five_modes):
    gate = GateSpec.from_hz(1.034e6, 10e-6)
    d = design_pulse(five_modes, gate, transform=False)
    assert d.allowed_ratio > 1 and d.transformed is None
    with pytest.raises(OutsideAllowedAreaError) as info:
        inverse_transform(d.linear.pulse, gate.mu)
    assert gate.t0 <= info.value.worst_time <= gate.tf
    assert info.value.margin == pytest.approx((d.allowed_ratio - 1) * transform_constant(),
                                              rel=1e-9)


@given(scale=st.floats(0.1, 10.0))
def test_allowed_ratio_scales_linearly(five_design, scale):
    p = five_design.linear.pulse
    q = p.with_coefficients(p.coefficients * scale)
    assert allowed_ratio(q, MU) == pytest.approx(scale * allowed_ratio(p, MU), rel=1e-12)
