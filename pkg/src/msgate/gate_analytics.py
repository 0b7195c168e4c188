"""Closed-form propagator quantities and the gate-fidelity expressions built on them.

With the carrier drive removed by the interaction picture generated by
``Omega(t) cos(mu t + psi) sum_i sigma_y^i`` the leading-order Hamiltonian is
a spin-dependent force with

* ``f_im(t) = eta_im Omega(t) cos(mu t + psi) exp(i w_m t) cos(2 Phi(t))``,
* ``alpha_im(t) = -i int_t0^t f_im``,
* ``chi_ij(t) = 2 Re int_t0^t sum_m alpha_im f_jm^*``,

where ``Phi`` is the running integral of the carrier drive.  Without the
carrier factor (``carrier_on=False``) these reduce to the plain
spin-dependent-force quantities used for pulse design.

The left-over ``sin(2 Phi) sigma_z`` coupling flips ``x``-basis spins; its
first-order contribution is a two-time integral evaluated by
:func:`spin_flip_probability`.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np

from .pulse_solver import carrier_transform
from .quadrature import grid_for_gate, partial_integrals, refine

# x-basis Pauli strings (s1, s2) for the illuminated pair.
STRINGS = ((1, 1), (1, -1), (-1, 1), (-1, -1))
NEGATIVE_CLAMP = 1e-12


def default_grid(pulse, gate, panels_per_period=4, order=12):
    """Panels aligned to the pulse's spline knots and resolving the carrier."""
    n_segments = pulse.basis.n_segments if pulse.kind != "raw-samples" else 1
    return grid_for_gate(pulse.t0, pulse.tf, gate.mu, n_segments,
                         panels_per_period=panels_per_period, order=order)


def _drive(pulse, gate, times):
    return pulse.evaluate_grid(times) * np.cos(gate.mu * times + gate.psi)


def carrier_phase(pulse, gate, times):
    """``Phi(t) = int_t0^t Omega(t') cos(mu t' + psi) dt'`` at arbitrary times."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    pulse.basis.check_domain(times)
    grid = default_grid(pulse, gate)
    return partial_integrals(grid, lambda t: _drive(pulse, gate, t), times)


def forces(pulse, modes, gate, carrier_on, times):
    """Spin-dependent forces ``f[t, i, m]`` for the illuminated pair.

    ``carrier_on`` multiplies the bare force by ``cos(2 Phi(t))``.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    g = _drive(pulse, gate, times)
    if carrier_on:
        g = g * np.cos(2.0 * carrier_phase(pulse, gate, times))
    common = g[:, None] * np.exp(1j * np.outer(times, modes.freqs))
    return modes.eta[None, :, :] * common[:, None, :]


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    """Phase-space trajectories and spin-spin phases along the gate.

    ``times`` are the panel edges of ``grid`` (so ``times[0] == t0`` and
    ``times[-1] == tf``); ``alpha``, ``chi12`` and ``phi_carrier`` are
    sampled there.  The ``*_nodes`` arrays hold the same quantities on the
    flattened quadrature nodes, which the spin-flip integral consumes.

    Attributes
    ----------
    alpha : complex ndarray, shape (n_times, 2, n_modes)
    chi : ndarray, shape (n_times, 2, 2)
        Full ``chi_ij(t, t0)`` including the diagonal.
    """

    times: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    chi: np.ndarray = field(repr=False)
    phi_carrier: np.ndarray = field(repr=False)
    carrier_on: bool
    phi_target: float
    grid: object = field(repr=False)
    drive_nodes: np.ndarray = field(repr=False)
    phi_nodes: np.ndarray = field(repr=False)
    alpha_nodes: np.ndarray = field(repr=False)
    chi_nodes: np.ndarray = field(repr=False)

    @property
    def chi12(self):
        return self.chi[:, 0, 1]

    @property
    def alpha_final(self):
        return self.alpha[-1]

    @property
    def chi_final(self):
        return self.chi[-1]

    @property
    def delta_chi(self):
        """``phi - chi_12(tf)``."""
        return float(self.phi_target - self.chi[-1, 0, 1])


def trajectories(pulse, modes, gate, carrier_on=True, grid=None):
    """Integrate ``alpha`` and ``chi`` for both illuminated ions.

    The force factorises as ``f_im = eta_im g_m(t)``, so one running
    integral per mode gives ``alpha`` for both ions and one nested running
    integral per mode gives every ``chi_ij``.
    """
    grid = default_grid(pulse, gate) if grid is None else grid
    t = grid.flat_nodes
    drive = _drive(pulse, gate, t)
    phi_nodes, phi_edges = grid.cumulative(drive)
    phi_nodes = phi_nodes.ravel()
    g = drive * np.cos(2.0 * phi_nodes) if carrier_on else drive
    gm = g[:, None] * np.exp(1j * np.outer(t, modes.freqs))
    G_nodes, G_edges = grid.cumulative(-1j * gm)
    G_nodes = G_nodes.reshape(len(t), -1)
    K_nodes, K_edges = grid.cumulative(2.0 * np.real(G_nodes * np.conj(gm)))
    K_nodes = K_nodes.reshape(len(t), -1)
    eta = modes.eta
    ee = eta[:, None, :] * eta[None, :, :]

    def alpha_of(G):
        return eta[None, :, :] * G[:, None, :]

    def chi_of(K):
        return np.einsum("ijm,tm->tij", ee, K)

    return TrajectoryRecord(
        times=grid.edges.copy(),
        alpha=alpha_of(G_edges),
        chi=chi_of(K_edges),
        phi_carrier=phi_edges,
        carrier_on=bool(carrier_on),
        phi_target=float(gate.phi_target),
        grid=grid,
        drive_nodes=drive,
        phi_nodes=phi_nodes,
        alpha_nodes=alpha_of(G_nodes),
        chi_nodes=chi_of(K_nodes),
    )


def averaged_alpha(pulse, modes, gate, grid=None):
    """Final ``alpha`` using the carrier-averaged force.

    The fast ``cos(2 Phi)`` factor is replaced by its average over one
    carrier period, which turns ``Omega`` into ``S(Omega) = mu J1(2 Omega / mu)``.
    """
    grid = default_grid(pulse, gate) if grid is None else grid
    t = grid.flat_nodes
    g = carrier_transform(pulse.evaluate_grid(t), gate.mu) * np.cos(gate.mu * t + gate.psi)
    G = grid.integrate(-1j * g[:, None] * np.exp(1j * np.outer(t, modes.freqs)))
    return modes.eta * G[None, :]


def chi_between(alpha_b, alpha_a, chi_b, chi_a):
    """``chi_ij(t_b, t_a)`` from tables referenced to ``t0``.

    ``chi(tb, ta) = chi(tb, t0) - chi(ta, t0)
    - 2 Im sum_m alpha_im(ta) (alpha_jm(tb) - alpha_jm(ta))^*``.
    Broadcasts over leading axes; ``alpha_*`` are ``(..., 2, M)`` and
    ``chi_*`` are ``(..., 2, 2)``.
    """
    cross = np.einsum("...im,...jm->...ij", alpha_a, np.conj(alpha_b - alpha_a))
    return chi_b - chi_a - 2.0 * np.imag(cross)


# ---------------------------------------------------------------------------
# zero-order fidelities


def infidelity_z(traj):
    """``1 - F0`` for a ``z``-basis Pauli string: ``sum |alpha|^2 + dchi^2``."""
    return float(np.sum(np.abs(traj.alpha_final) ** 2) + traj.delta_chi ** 2)


def infidelity_x(traj, s):
    """Phonon-excitation probability ``sum_m |sum_i alpha_im s_i|^2`` for string ``s``."""
    s = np.asarray(s, dtype=float)
    return float(np.sum(np.abs(s @ traj.alpha_final) ** 2))


def _delta_chi_matrix(traj):
    d = np.zeros((2, 2))
    d[0, 1] = d[1, 0] = traj.delta_chi
    return d


def infidelity_superposition(traj, coefficients, strings=STRINGS):
    """``1 - F0`` for ``sum_s c_s |s>_x`` (any normalisation of ``c``).

    Phonon term plus a quarter of the variance of ``x_s = s^T dchi s`` over the
    weights ``|c_s|^2``; only the off-diagonal ``dchi_12`` enters because
    the diagonal phases are common to all strings.
    """
    c = np.asarray(coefficients, dtype=complex)
    p = np.abs(c) ** 2
    p = p / p.sum()
    S = np.asarray(strings, dtype=float)
    phon = np.array([np.sum(np.abs(s @ traj.alpha_final) ** 2) for s in S])
    x = np.einsum("si,ij,sj->s", S, _delta_chi_matrix(traj), S)
    return float(p @ phon + 0.25 * (p @ x ** 2 - (p @ x) ** 2))


def average_infidelity_zero_order(traj):
    """State-averaged ``1 - <F0> = sum |alpha|^2 + (4/5) dchi^2``."""
    return float(np.sum(np.abs(traj.alpha_final) ** 2) + 0.8 * traj.delta_chi ** 2)


def average_infidelity_bound(traj, spin_flip_per_string):
    """Upper bound on the state-averaged infidelity.

    ``spin_flip_per_string`` holds ``P_flip`` for all four ``x`` strings;
    the flip term is their mean.
    """
    pf = np.asarray(spin_flip_per_string, dtype=float)
    return average_infidelity_zero_order(traj) + 0.25 * float(pf.sum())


def triangle_bound(F0, Fc):
    """Diagnostic lower bound ``cos(arccos F0 + arccos Fc)`` on ``F_tot``."""
    a = np.arccos(np.clip(F0, -1.0, 1.0)) + np.arccos(np.clip(Fc, -1.0, 1.0))
    return float(np.cos(min(a, np.pi)))


# ---------------------------------------------------------------------------
# displacement-operator matrix elements


def displacement_overlap(a1, a2, a3):
    """``<0| D^dag(a1) D(a2) D(a3) |0>`` for multimode displacements.

    Broadcasts over leading axes; the last axis runs over modes.
    """
    ph = np.imag(np.sum(a2 * np.conj(a3) - a1 * np.conj(a2) - a1 * np.conj(a3), axis=-1))
    beta = a2 + a3 - a1
    return np.exp(1j * ph - 0.5 * np.sum(np.abs(beta) ** 2, axis=-1))


def displacement_element(beta1, beta2, a1, a2, a3):
    """``<0| D^dag(a1) A1_m1 D(a2) A2_m2 D(a3) |0>`` as a matrix over ``(m1, m2)``.

    ``beta = 1`` selects an annihilator and ``beta = 2`` a creator.  The
    factors multiplying the plain overlap are

    ===========  =========================================
    a  ... a     ``(a2 + a3)_m1 (a3)_m2``
    a  ... a^+   ``delta + (a2 + a3)_m1 (a1 - a2)^*_m2``
    a^+ ... a    ``(a1)^*_m1 (a3)_m2``
    a^+ ... a^+  ``(a1)^*_m1 (a1 - a2)^*_m2``
    ===========  =========================================
    """
    a1, a2, a3 = (np.asarray(a, dtype=complex) for a in (a1, a2, a3))
    left = a2 + a3 if beta1 == 1 else np.conj(a1)
    right = a3 if beta2 == 1 else np.conj(a1 - a2)
    out = left[:, None] * right[None, :]
    if beta1 == 1 and beta2 == 2:
        out = out + np.eye(len(a1))
    return displacement_overlap(a1, a2, a3) * out


# ---------------------------------------------------------------------------
# spin flip


def _flip_tables(traj, modes, gate):
    t = traj.grid.flat_nodes
    s2 = np.sin(2.0 * traj.phi_nodes)
    amp = traj.drive_nodes * s2
    V1 = modes.eta[None, :, :] * (amp[:, None] * np.exp(-1j * np.outer(t, modes.freqs)))[:, None, :]
    return V1, np.conj(V1)


def _flip_kernel_rows(rows, cols, tabs):
    """Kernel ``g(t1, t2)`` for node blocks ``rows`` x ``cols`` (one flipped ion).

    With ``a1 = A_s(t1)``, ``a3 = A_s(t2)`` and ``a2 = A_s'(t1) - A_s'(t2)``
    every mode sum is bilinear in row and column quantities, so the block is
    assembled from matrix products.
    """
    As, Ap, chis, chip, V1, V2 = tabs
    D = Ap - As
    As1, Ap1, D1, v11, v21 = As[rows], Ap[rows], D[rows], V1[rows], V2[rows]
    As2, Ap2, D2, v12, v22 = As[cols], Ap[cols], D[cols], V1[cols], V2[cols]
    dot = lambda x, y: x @ y.T
    row = lambda x, y: np.sum(x * y, axis=-1)
    # Im[a2.a3* - a1.a2* - a1.a3*] plus the chi_s'(t1, t2) cross term
    phase = np.imag(dot(Ap1, np.conj(As2)) + dot(As1, np.conj(Ap2)) - dot(As1, np.conj(As2))
                    + dot(np.conj(Ap1), Ap2))
    phase -= np.imag(row(As1, np.conj(Ap1)))[:, None] + np.imag(row(Ap2, np.conj(As2)))[None, :]
    phase += (chis[rows] - chip[rows])[:, None] - (chis[cols] - chip[cols])[None, :]
    beta2 = (row(D1, np.conj(D1))[:, None] + row(D2, np.conj(D2))[None, :]
             - 2.0 * np.real(dot(D1, np.conj(D2))))
    base = np.exp(1j * phase - 0.5 * np.real(beta2))
    L = (row(v11, Ap1) + row(v21, np.conj(As1)))[:, None] - dot(v11, D2)
    R = (row(v12, As2) + row(v22, np.conj(Ap2)))[None, :] - dot(np.conj(D1), v22)
    return base * (L * R + dot(v11, v22))


def _spin_flip_on_grid(traj, modes, gate, s, full_square=False, block_elems=8_000_000):
    s = np.asarray(s, dtype=float)
    w = traj.grid.flat_weights
    n = len(w)
    V1, V2 = _flip_tables(traj, modes, gate)
    total = 0.0
    for i in range(2):
        sp = s.copy()
        sp[i] = -sp[i]
        As = np.einsum("i,tim->tm", s, traj.alpha_nodes)
        Ap = np.einsum("i,tim->tm", sp, traj.alpha_nodes)
        chis = 0.5 * np.einsum("i,tij,j->t", s, traj.chi_nodes, s)
        chip = 0.5 * np.einsum("i,tij,j->t", sp, traj.chi_nodes, sp)
        tabs = (As, Ap, chis, chip, V1[:, i, :], V2[:, i, :])
        block = max(1, block_elems // n)
        for r0 in range(0, n, block):
            r1 = min(n, r0 + block)
            rows = np.arange(r0, r1)
            if full_square:
                cols = np.arange(n)
                k = _flip_kernel_rows(rows, cols, tabs)
                total += float(np.real(w[rows] @ k @ w))
            else:
                cols = np.arange(r1)
                k = _flip_kernel_rows(rows, cols, tabs)
                mult = np.where(cols[None, :] < rows[:, None], 2.0,
                                np.where(cols[None, :] == rows[:, None], 1.0, 0.0))
                total += float(np.real(np.sum(w[rows][:, None] * w[cols][None, :] * mult * k)))
    return total


def spin_flip_probability(pulse, modes, gate, s, grid=None, traj=None, check_convergence=False,
                          full_square=False):
    """First-order spin-flip probability ``<s,0| T1^dag T1 |s,0>`` for an ``x`` string.

    The two-time integral runs over the quadrature nodes of the trajectory
    grid.  By Hermitian symmetry of the kernel only the ordered half
    ``t2 <= t1`` is evaluated unless ``full_square`` is set.

    Parameters
    ----------
    s : pair of +1/-1
    traj : TrajectoryRecord, optional
        Carrier-on trajectories on the grid to use; computed if omitted.
    check_convergence : bool
        Re-evaluate on a twice-refined grid and warn when the two values
        differ by more than 10 %.
    """
    if traj is None:
        traj = trajectories(pulse, modes, gate, carrier_on=True, grid=grid)
    p = _spin_flip_on_grid(traj, modes, gate, s, full_square=full_square)
    if check_convergence:
        fine = trajectories(pulse, modes, gate, carrier_on=True, grid=refine(traj.grid, 2))
        p2 = _spin_flip_on_grid(fine, modes, gate, s, full_square=full_square)
        if abs(p2 - p) > 0.1 * max(abs(p2), 1e-300):
            warnings.warn(f"spin-flip integral not converged: {p:.3e} vs {p2:.3e} on refined grid",
                          RuntimeWarning, stacklevel=2)
        p = p2
    if p < 0:
        if p < -NEGATIVE_CLAMP:
            warnings.warn(f"negative spin-flip probability {p:.3e} clamped to zero",
                          RuntimeWarning, stacklevel=2)
        p = 0.0
    return p


def spin_flip_all_strings(pulse, modes, gate, traj=None, **kwargs):
    """``P_flip`` for the four ``x`` strings.

    The integrand is invariant under ``s -> -s`` (every displacement and
    phase flips sign together), so two evaluations cover all four strings.
    """
    if traj is None:
        traj = trajectories(pulse, modes, gate, carrier_on=True)
    p11 = spin_flip_probability(pulse, modes, gate, (1, 1), traj=traj, **kwargs)
    p1m = spin_flip_probability(pulse, modes, gate, (1, -1), traj=traj, **kwargs)
    return {STRINGS[0]: p11, STRINGS[1]: p1m, STRINGS[2]: p1m, STRINGS[3]: p11}


# ---------------------------------------------------------------------------
# summary


@dataclass
class FidelityBreakdown:
    """All analytic error contributions for one pulse."""

    alpha_residuals: np.ndarray
    chi_error: float
    F0_z: float
    F0_x_per_string: dict
    P_ph_per_string: dict
    P_flip_per_string: dict
    F_tot_x_per_string: dict
    avg_bound: float
    phi_final: float

    def to_dict(self):
        key = lambda s: f"{s[0]:+d},{s[1]:+d}"
        return {
            "alpha_residuals": self.alpha_residuals.tolist(),
            "chi_error": self.chi_error,
            "infidelity_z": 1.0 - self.F0_z,
            "F0_z": self.F0_z,
            "F0_x_per_string": {key(s): v for s, v in self.F0_x_per_string.items()},
            "P_ph_per_string": {key(s): v for s, v in self.P_ph_per_string.items()},
            "P_flip_per_string": {key(s): v for s, v in self.P_flip_per_string.items()},
            "F_tot_x_per_string": {key(s): v for s, v in self.F_tot_x_per_string.items()},
            "avg_bound": self.avg_bound,
            "phi_final": self.phi_final,
        }


def fidelity_breakdown(pulse, modes, gate, spin_flip=True, grid=None):
    """Carrier-on analytics for one pulse (optionally without the spin-flip integral)."""
    traj = trajectories(pulse, modes, gate, carrier_on=True, grid=grid)
    p_ph = {s: infidelity_x(traj, s) for s in STRINGS}
    if spin_flip:
        p_flip = spin_flip_all_strings(pulse, modes, gate, traj=traj)
    else:
        p_flip = {s: 0.0 for s in STRINGS}
    return FidelityBreakdown(
        alpha_residuals=np.abs(traj.alpha_final) ** 2,
        chi_error=traj.delta_chi,
        F0_z=1.0 - infidelity_z(traj),
        F0_x_per_string={s: 1.0 - v for s, v in p_ph.items()},
        P_ph_per_string=p_ph,
        P_flip_per_string=p_flip,
        F_tot_x_per_string={s: 1.0 - p_ph[s] - p_flip[s] for s in STRINGS},
        avg_bound=average_infidelity_bound(traj, [p_flip[s] for s in STRINGS]),
        phi_final=float(traj.phi_carrier[-1]),
    )
