"""Linear gate conditions, spin-phase normalisation and carrier compensation.

Pipeline for one gate point ``(t_gate, mu)``:

1. ``assemble_A`` / ``assemble_B`` reduce trajectory closure and the
   spin-spin phase to a matrix equation on the spline amplitudes;
2. ``solve_linear_pulse`` picks the nullspace vector of the real-stacked
   closure matrix and rescales it to the target phase (``Omega_lin``);
3. ``inverse_transform`` applies the inverse of
   ``S(Omega) = mu * J1(2 Omega / mu)`` pointwise (``Omega_tr``).
"""
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import optimize, special

from .errors import ConfigError, InfeasibleError, OutsideAllowedAreaError, PhaseUnreachableError
from .pulse_basis import Pulse, build_basis, default_n_seg
from .quadrature import grid_for_gate

NULL_RTOL = 1e-10


@dataclass(frozen=True)
class GateSpec:
    """Bichromatic drive parameters; ``mu`` in rad/s, times in seconds."""

    mu: float
    t0: float
    tf: float
    psi: float = 0.0
    phi_target: float = np.pi / 4

    def __post_init__(self):
        if not self.mu > 0:
            raise ConfigError("mu must be positive", "mu_hz")
        if not self.tf > self.t0:
            raise ConfigError("tf must exceed t0", "tf")

    @property
    def duration(self):
        return self.tf - self.t0

    @property
    def period(self):
        return 2.0 * np.pi / self.mu

    @classmethod
    def from_hz(cls, mu_hz, t_gate, psi=0.0, phi_target=np.pi / 4, t0=0.0):
        return cls(mu=2.0 * np.pi * mu_hz, t0=t0, tf=t0 + t_gate, psi=psi, phi_target=phi_target)


# ---------------------------------------------------------------------------
# carrier transform


def carrier_transform(omega, mu):
    """Effective drive ``mu * J1(2 omega / mu)``; odd in ``omega``."""
    return mu * special.j1(2.0 * np.asarray(omega, dtype=float) / mu)


def carrier_transform_bessel_sum(omega, mu):
    """Same map written as ``omega * (J0(x) + J2(x))`` with ``x = 2 omega / mu``."""
    omega = np.asarray(omega, dtype=float)
    x = 2.0 * omega / mu
    return omega * (special.j0(x) + special.jv(2, x))


@lru_cache(maxsize=None)
def transform_maximum():
    """Location and value of the maximum of ``J1`` on its first lobe.

    Golden-section search brackets the maximiser, then the root of
    ``J1' = (J0 - J2) / 2`` is polished with Brent's method.

    Returns
    -------
    x_star : float
        Argument of the maximum, so ``Omega* = x_star * mu / 2``.
    C : float
        ``max S(Omega) / mu``.
    """
    res = optimize.minimize_scalar(lambda x: -special.j1(x), bracket=(0.5, 1.8, 3.0),
                                   method="golden", tol=1e-10)
    x0 = res.x
    deriv = lambda x: special.j0(x) - special.jv(2, x)
    x_star = optimize.brentq(deriv, x0 - 1e-3, x0 + 1e-3, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return float(x_star), float(special.j1(x_star))


def transform_constant():
    """``C = max_Omega S(Omega) / mu`` (about 0.5819)."""
    return transform_maximum()[1]


def peak_drive(mu):
    """``Omega*``, the amplitude at which ``S`` peaks."""
    return 0.5 * transform_maximum()[0] * mu


def inverse_carrier_transform(y, mu, max_iter=100):
    """Invert ``S`` on its monotone branch, odd-extended to negative inputs.

    Safeguarded Newton iteration on ``J1(z) = |y| / mu`` with a bisection
    fallback inside the bracket ``[0, z*]``.

    Raises
    ------
    OutsideAllowedAreaError
        If ``|y| > C mu`` anywhere.
    """
    y = np.asarray(y, dtype=float)
    x_star, C = transform_maximum()
    target = np.abs(y) / mu
    worst = float(np.max(target)) if target.size else 0.0
    if worst > C:
        raise OutsideAllowedAreaError(
            f"|Omega| / mu = {worst:.6f} exceeds transform maximum C = {C:.6f}",
            margin=float(worst - C))
    lo = np.zeros_like(target)
    hi = np.full_like(target, x_star)
    z = np.minimum(2.0 * target, x_star)
    for _ in range(max_iter):
        g = special.j1(z) - target
        lo = np.where(g <= 0, z, lo)
        hi = np.where(g > 0, z, hi)
        dg = 0.5 * (special.j0(z) - special.jv(2, z))
        with np.errstate(divide="ignore", invalid="ignore"):
            z_new = z - g / dg
        bad = ~np.isfinite(z_new) | (z_new <= lo) | (z_new >= hi)
        z_new = np.where(bad, 0.5 * (lo + hi), z_new)
        z_new = np.where(g == 0, z, z_new)
        done = np.abs(z_new - z) <= 1e-15 * np.maximum(1.0, z)
        z = z_new
        if np.all(done):
            break
    return np.sign(y) * 0.5 * mu * z


# ---------------------------------------------------------------------------
# linear system


def gate_grid(basis, gate, mu_max=None, panels_per_period=4, order=12):
    """Panel grid aligned to the spline knots and resolving the carrier."""
    return grid_for_gate(basis.t0, basis.tf, gate.mu, basis.n_segments,
                         panels_per_period=panels_per_period, order=order, mu_max=mu_max)


def _drive_envelope(times, gate):
    return np.cos(gate.mu * times + gate.psi)


def assemble_A(basis, modes, gate, grid=None, basis_values=None):
    """Closure matrix ``A[m, s] = int b_s(t) cos(mu t + psi) exp(i w_m t) dt``."""
    grid = gate_grid(basis, gate) if grid is None else grid
    t = grid.flat_nodes
    bv = basis.values(t) if basis_values is None else basis_values
    u = bv * _drive_envelope(t, gate)[:, None]
    phase = np.exp(1j * np.outer(t, modes.freqs))
    integrand = u[:, :, None] * phase[:, None, :]
    return grid.integrate(integrand).T


def assemble_B(basis, modes, gate, grid=None, basis_values=None):
    """Symmetric quadratic form with ``Omega^T B Omega = chi_12(tf)`` (no carrier).

    ``B[s, s'] = -2 sum_m eta_1m eta_2m int dt int^t dt' u_s(t) u_s'(t')
    sin(w_m (t - t'))`` with ``u_s = b_s cos(mu t + psi)``, symmetrised.
    """
    grid = gate_grid(basis, gate) if grid is None else grid
    t = grid.flat_nodes
    bv = basis.values(t) if basis_values is None else basis_values
    u = bv * _drive_envelope(t, gate)[:, None]
    uw = u * grid.flat_weights[:, None]
    eta = modes.eta
    B = np.zeros((basis.n_seg, basis.n_seg))
    for m, w in enumerate(modes.freqs):
        e = np.exp(1j * w * t)
        inner, _ = grid.cumulative(u * np.conj(e)[:, None])
        inner = inner.reshape(len(t), -1)
        B += -2.0 * eta[0, m] * eta[1, m] * (uw.T @ np.imag(e[:, None] * inner))
    return 0.5 * (B + B.T)


@dataclass(frozen=True, eq=False)
class LinearSolution:
    """Solved ``Omega_lin`` with diagnostics."""

    pulse: Pulse
    singular_values: np.ndarray = field(repr=False)
    nullspace_dim: int
    closure_residual: float
    closure_residual_rel: float
    phase_residual: float
    sign_changes: bool

    def to_dict(self):
        return {
            "nullspace_dim": self.nullspace_dim,
            "singular_values": self.singular_values.tolist(),
            "closure_residual": self.closure_residual,
            "closure_residual_rel": self.closure_residual_rel,
            "phase_residual": self.phase_residual,
            "sign_changes": self.sign_changes,
        }


def stacked(A):
    """Real-stacked closure matrix ``[Re A; Im A]``."""
    return np.vstack([A.real, A.imag])


def nullspace(A, rtol=NULL_RTOL):
    """Orthonormal nullspace basis (columns) of the real-stacked ``A``."""
    M = stacked(A)
    _, sv, vh = np.linalg.svd(M, full_matrices=True)
    rank = int(np.sum(sv > rtol * sv[0])) if sv.size else 0
    return vh[rank:].T, sv


def _sign_changes(values, scale):
    v = values[np.abs(values) > 1e-6 * scale]
    return bool(v.size and np.any(np.sign(v[1:]) != np.sign(v[:-1])))


def solve_linear_pulse(A, B, gate, basis):
    """Amplitudes closing every trajectory and producing ``chi_12 = phi_target``.

    Within the nullspace ``N`` the minimal-norm amplitude vector with
    ``Omega^T B Omega = phi`` lies along the extreme eigenvector of
    ``N^T B N`` whose eigenvalue has the sign of ``phi``.  The overall sign
    is fixed so that ``max Omega >= |min Omega|``.

    Raises
    ------
    InfeasibleError
        If the closure matrix has a trivial nullspace.
    PhaseUnreachableError
        If no nullspace direction gives a phase of the required sign.
    """
    N, sv = nullspace(A)
    if N.shape[1] == 0:
        raise InfeasibleError(
            f"infeasible at (t_gate={gate.duration:.6e} s, mu={gate.mu:.6e} rad/s): "
            f"closure matrix has full column rank, smallest singular value "
            f"{sv[-1] / sv[0]:.3e} (relative)", smallest_singular_value=float(sv[-1]))
    Bn = N.T @ B @ N
    lam, vecs = np.linalg.eigh(0.5 * (Bn + Bn.T))
    phi = gate.phi_target
    k = -1 if phi >= 0 else 0
    if lam[k] * np.sign(phi if phi != 0 else 1) <= 0:
        raise PhaseUnreachableError(
            f"spin-spin phase {phi:.4f} unreachable: nullspace quadratic form has no "
            f"eigenvalue of matching sign (extreme {lam[k]:.3e})")
    c = vecs[:, k] * np.sqrt(phi / lam[k])
    omega = N @ c
    probe = np.linspace(basis.t0, basis.tf, 20 * basis.n_segments + 1)
    vals = basis.values(probe) @ omega
    if vals.max() < -vals.min():
        omega = -omega
        vals = -vals
    pulse = Pulse(basis, omega)
    res = np.max(np.abs(stacked(A) @ omega))
    scale = np.max(np.abs(stacked(A))) * np.max(np.abs(omega))
    return LinearSolution(
        pulse=pulse,
        singular_values=sv,
        nullspace_dim=int(N.shape[1]),
        closure_residual=float(res),
        closure_residual_rel=float(res / scale) if scale > 0 else 0.0,
        phase_residual=float(omega @ B @ omega - phi),
        sign_changes=_sign_changes(vals, np.max(np.abs(vals))),
    )


# ---------------------------------------------------------------------------
# carrier compensation


def spline_extremum(pulse):
    """Exact ``max |Omega_lin(t)|`` of the spline and where it occurs."""
    basis = pulse.basis
    seg = basis.combine(pulse.coefficients)
    best, where = 0.0, basis.t0
    for k in range(basis.n_segments):
        c0, c1, c2, c3 = seg[k]
        cands = [0.0, basis.h]
        roots = np.roots([3 * c3, 2 * c2, c1]) if abs(c3) + abs(c2) > 0 else []
        cands += [r.real for r in np.atleast_1d(roots)
                  if abs(r.imag) < 1e-12 * basis.h and 0 < r.real < basis.h]
        for u in cands:
            v = abs(((c3 * u + c2) * u + c1) * u + c0)
            if v > best:
                best, where = v, basis.knots[k] + u
    return float(best), float(where)


def allowed_ratio(pulse, mu):
    """``max |Omega_lin| / (C mu)``; the point is allowed when this is <= 1."""
    peak, _ = spline_extremum(pulse)
    return peak / (transform_constant() * mu)


def inverse_transform(pulse, mu):
    """Carrier-compensated pulse ``Omega_tr = S^-1(Omega_lin)``.

    Raises
    ------
    OutsideAllowedAreaError
        With the time of the worst violation and the margin in units of mu.
    """
    if pulse.kind != "linear":
        raise ConfigError("inverse transform expects a linear pulse", "kind")
    peak, where = spline_extremum(pulse)
    C = transform_constant()
    if peak > C * mu:
        raise OutsideAllowedAreaError(
            f"outside allowed area: max |Omega_lin| = {peak / mu:.6f} mu at t = {where:.6e} s "
            f"exceeds C mu = {C:.6f} mu", worst_time=where, margin=float(peak / mu - C))
    return Pulse(pulse.basis, pulse.coefficients, kind="transformed", mu=mu)


@dataclass(frozen=True, eq=False)
class Design:
    """Result of the two-step design at one gate point."""

    gate: GateSpec
    linear: LinearSolution
    transformed: Pulse = None
    allowed_ratio: float = None

    @property
    def allowed(self):
        return self.transformed is not None


def design_pulse(modes, gate, n_seg=None, transform=True, grid=None):
    """Run the full design: assemble, solve for ``Omega_lin``, optionally transform.

    When ``transform`` is true and the point lies outside the allowed area
    the :class:`OutsideAllowedAreaError` propagates.
    """
    n_seg = default_n_seg(modes.n_modes) if n_seg is None else n_seg
    basis = build_basis(gate.t0, gate.tf, n_seg)
    grid = gate_grid(basis, gate) if grid is None else grid
    bv = basis.values(grid.flat_nodes)
    A = assemble_A(basis, modes, gate, grid, bv)
    B = assemble_B(basis, modes, gate, grid, bv)
    lin = solve_linear_pulse(A, B, gate, basis)
    ratio = allowed_ratio(lin.pulse, gate.mu)
    tr = inverse_transform(lin.pulse, gate.mu) if transform else None
    return Design(gate=gate, linear=lin, transformed=tr, allowed_ratio=ratio)
