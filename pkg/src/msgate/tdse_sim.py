"""Direct Schrodinger-equation simulation on two qubits times truncated phonon modes.

State layout
------------
A state is a complex array of shape ``(4, c_0, ..., c_{M-1})`` (flattened in
C order for storage).  The leading index is the two-qubit index
``2 * q1 + q2`` with ``q = 0`` for spin up (``sigma_z = +1``) and ``q = 1``
for spin down; the remaining axes are Fock occupations of the radial modes
in ascending frequency order.  The layout is frozen so state dumps are
comparable between runs.

Hamiltonians (interaction picture, ``c(t) = Omega(t) cos(mu t + psi)``)
-----------------------------------------------------------------------
* ``full``: ``-i c(t) sum_i (E_i sigma_+^i - E_i^dag sigma_-^i)`` with
  ``E_i = exp(i sum_m eta_im (a_m e^{-i w_m t} + a_m^dag e^{i w_m t}))``;
* ``ld``: ``c(t) sum_i [sigma_y^i + sigma_x^i sum_m eta_im (a_m e^{-i w_m t} + h.c.)]``.

``E_i`` factorises over modes as ``P_m(t) G_im P_m(t)^dag`` with
``G_im = exp(i eta_im (a + a^dag))`` evaluated once on the truncated space
and ``P_m(t) = diag(exp(i w_m t n))``.
"""
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp

from .errors import ConfigError, ConvergenceError, SizeError

DEFAULT_MAX_DIM = 1_000_000
HALVING_FACTOR = 2.0 ** 8
HALVING_TOL = 1e-7
DUMP_MAGIC = b"MSSV"
DUMP_VERSION = 1

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_PLUS = np.array([[0, 1], [0, 0]], dtype=complex)
HADAMARD = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2.0)


def annihilation(cutoff):
    return np.diag(np.sqrt(np.arange(1, cutoff, dtype=float)), 1).astype(complex)


@dataclass(frozen=True, eq=False)
class SimSpace:
    """Two qubits times ``n_modes`` truncated oscillators."""

    cutoffs: tuple
    freqs: np.ndarray = field(repr=False)
    eta: np.ndarray = field(repr=False)

    @property
    def n_modes(self):
        return len(self.cutoffs)

    @property
    def qubit_dim(self):
        return 4

    @property
    def phonon_dim(self):
        return int(np.prod(self.cutoffs))

    @property
    def total_dim(self):
        return 4 * self.phonon_dim

    @property
    def shape(self):
        return (4,) + tuple(self.cutoffs)

    @cached_property
    def ladders(self):
        return [annihilation(c) for c in self.cutoffs]

    @cached_property
    def displacement_factors(self):
        """``G[i][m] = exp(i eta_im (a + a^dag))`` on the truncated mode space."""
        out = []
        for i in range(2):
            row = []
            for m, a in enumerate(self.ladders):
                vals, vecs = np.linalg.eigh(a + a.conj().T)
                row.append((vecs * np.exp(1j * self.eta[i, m] * vals)) @ vecs.conj().T)
            out.append(row)
        return out

    # sparse operators in the full space (used for checks and small systems)

    def _embed(self, qubit_op, mode_ops):
        out = sparse.csr_matrix(qubit_op)
        for op in mode_ops:
            out = sparse.kron(out, sparse.csr_matrix(op), format="csr")
        return out

    def mode_operator(self, m, op=None):
        """``a_m`` (or ``op`` on mode ``m``) embedded in the full space."""
        ops = [np.eye(c) for c in self.cutoffs]
        ops[m] = self.ladders[m] if op is None else op
        return self._embed(np.eye(4), ops)

    def qubit_operator(self, i, op):
        """Single-qubit ``op`` on qubit ``i`` (0 or 1) embedded in the full space."""
        q = np.kron(op, np.eye(2)) if i == 0 else np.kron(np.eye(2), op)
        return self._embed(q, [np.eye(c) for c in self.cutoffs])


def default_cutoffs(modes, mu, high=6, low=4):
    """``high`` for the two modes closest to ``mu``, ``low`` elsewhere."""
    order = np.argsort(np.abs(modes.freqs - mu), kind="stable")
    cut = [low] * modes.n_modes
    for m in order[:2]:
        cut[m] = high
    return tuple(cut)


def adaptive_cutoffs(pulse, modes, gate, tail=1e-9, low=4):
    """Cutoffs holding the coherent-state truncation loss below ``tail``.

    The LD trajectory of spin string ``s`` is a coherent state of amplitude
    ``alpha_s(t)`` per mode, so the population lost above cutoff ``c`` is the
    Poisson tail ``P(n >= c)`` at mean ``max_t |alpha_s(t)|^2``, maximised
    over the four strings.
    """
    from scipy.stats import poisson

    from .gate_analytics import STRINGS, trajectories

    traj = trajectories(pulse, modes, gate, carrier_on=True)
    s = np.array(STRINGS, dtype=float)
    mean = (np.abs(np.einsum("si,tim->tsm", s, traj.alpha)) ** 2).max(axis=(0, 1))
    cut = []
    for lam in mean:
        c = low
        while poisson.sf(c - 1, lam) > tail:
            c += 1
        cut.append(c)
    return tuple(cut)


def build_space(modes, cutoffs, max_dim=DEFAULT_MAX_DIM):
    """Validate cutoffs against the memory cap and build the operator carriers.

    Raises
    ------
    SizeError
        If ``4 * prod(cutoffs)`` exceeds ``max_dim``; the error carries a
        reduced set of cutoffs that fits.
    """
    cutoffs = tuple(int(c) for c in cutoffs)
    if len(cutoffs) != modes.n_modes:
        raise ConfigError(f"expected {modes.n_modes} cutoffs, got {len(cutoffs)}", "cutoffs")
    if min(cutoffs) < 2:
        raise ConfigError("every cutoff must be at least 2", "cutoffs")
    dim = 4 * int(np.prod(cutoffs))
    if dim > max_dim:
        sugg = list(cutoffs)
        while 4 * int(np.prod(sugg)) > max_dim and max(sugg) > 2:
            sugg[int(np.argmax(sugg))] -= 1
        raise SizeError(f"Hilbert space dimension {dim} exceeds cap {max_dim}",
                        suggested_cutoffs=sugg)
    return SimSpace(cutoffs=cutoffs, freqs=np.asarray(modes.freqs, dtype=float),
                    eta=np.asarray(modes.eta, dtype=float))


# ---------------------------------------------------------------------------
# matrix-free application


def _apply_mode(mat, psi, axis):
    """Apply a ``c x c`` matrix (or a leading batch of them) along ``axis``.

    ``mat`` may carry a batch axis matching ``psi.shape[0]``; the contraction
    uses ``matmul`` on a ``(batch, pre, c, post)`` view to avoid transposes.
    """
    shape = psi.shape
    pre = int(np.prod(shape[1:axis], dtype=int))
    post = int(np.prod(shape[axis + 1:], dtype=int))
    if post == 1:
        x = psi.reshape(shape[0], pre, shape[axis])
        return np.matmul(x, np.swapaxes(mat, -1, -2)).reshape(shape)
    x = psi.reshape(shape[0], pre, shape[axis], post)
    m = mat[:, None] if mat.ndim == 3 else mat
    return np.matmul(m, x).reshape(shape)


def _apply_qubit(op, psi, i):
    """Single-qubit ``op`` on qubit ``i`` of a state of shape ``(4, ...)``."""
    rest = psi.shape[1:]
    q = psi.reshape((2, 2) + rest)
    q = np.moveaxis(np.tensordot(op, q, axes=([1], [i])), 0, i)
    return q.reshape(psi.shape)


def _phases(space, t):
    return [np.exp(1j * w * t * np.arange(c)) for w, c in zip(space.freqs, space.cutoffs)]


def _force_matrices(space, t):
    """``a_m e^{-i w t} + a_m^dag e^{i w t}`` per mode."""
    out = []
    for a, w in zip(space.ladders, space.freqs):
        e = np.exp(-1j * w * t)
        out.append(a * e + a.conj().T * np.conj(e))
    return out


def _displacement_matrices(space, t):
    """``E_i`` factors ``P G_im P^dag`` per ion and mode."""
    ph = _phases(space, t)
    return [[p[:, None] * G * np.conj(p)[None, :] for p, G in zip(ph, row)]
            for row in space.displacement_factors]


def _apply_ld(space, c, t, psi):
    q = psi.reshape((2, 2) + psi.shape[1:])
    # sigma_y on each qubit
    out = np.empty_like(q)
    out[0] = -1j * q[1]
    out[1] = 1j * q[0]
    out[:, 0] += -1j * q[:, 1]
    out[:, 1] += 1j * q[:, 0]
    out *= c
    if c == 0:
        return out.reshape(psi.shape)
    F = _force_matrices(space, t)
    X = [np.zeros_like(psi), np.zeros_like(psi)]
    for m, Fm in enumerate(F):
        Y = _apply_mode(Fm, psi, m + 1)
        X[0] += space.eta[0, m] * Y
        X[1] += space.eta[1, m] * Y
    x0 = X[0].reshape(q.shape)
    x1 = X[1].reshape(q.shape)
    out[0] += c * x0[1]
    out[1] += c * x0[0]
    out[:, 0] += c * x1[:, 1]
    out[:, 1] += c * x1[:, 0]
    return out.reshape(psi.shape)


def _apply_full(space, c, t, psi):
    if c == 0:
        return np.zeros_like(psi)
    E = _displacement_matrices(space, t)
    q = psi.reshape((2, 2) + psi.shape[1:])
    out = np.zeros_like(q)
    # batch 0 raises the flipped qubit with E_i, batch 1 lowers it with E_i^dag;
    # axis 1 of the batch is the spectator qubit
    for i in range(2):
        xs = np.stack([q[1], q[0]]) if i == 0 else np.stack([q[:, 1], q[:, 0]])
        for m, M in enumerate(E[i]):
            xs = _apply_mode(np.stack([M, M.conj().T]), xs, m + 2)
        if i == 0:
            out[0] += -1j * c * xs[0]
            out[1] += 1j * c * xs[1]
        else:
            out[:, 0] += -1j * c * xs[0]
            out[:, 1] += 1j * c * xs[1]
    return out.reshape(psi.shape)


APPLY = {"full": _apply_full, "ld": _apply_ld}


def _envelope_function(pulse, gate):
    """Scalar ``t -> Omega(t) cos(mu t + psi)`` with per-call overhead kept small."""
    from scipy import special

    from .pulse_solver import transform_maximum

    if pulse.kind == "raw-samples":
        return lambda t: float(pulse.evaluate_grid(np.array([t]))[0]) * np.cos(gate.mu * t + gate.psi)
    basis = pulse.basis
    seg = basis.combine(pulse.coefficients)
    knots = basis.knots
    h = basis.h
    n_last = basis.n_segments - 1
    t0, mu, psi = basis.t0, gate.mu, gate.psi
    x_star = transform_maximum()[0]

    def lin(t):
        k = min(max(int((t - t0) / h), 0), n_last)
        u = t - knots[k]
        c0, c1, c2, c3 = seg[k]
        return ((c3 * u + c2) * u + c1) * u + c0

    if pulse.kind == "linear":
        return lambda t: lin(t) * np.cos(mu * t + psi)

    pmu = pulse.mu

    def inv(y):
        target = abs(y) / pmu
        if target == 0.0:
            return 0.0
        lo, hi, z = 0.0, x_star, min(2.0 * target, x_star)
        for _ in range(60):
            g = special.j1(z) - target
            if g == 0.0:
                break
            if g < 0:
                lo = z
            else:
                hi = z
            dg = 0.5 * (special.j0(z) - special.jv(2, z))
            zn = z - g / dg if dg != 0 else 0.5 * (lo + hi)
            if not lo < zn < hi:
                zn = 0.5 * (lo + hi)
            if abs(zn - z) <= 1e-15 * max(1.0, z):
                z = zn
                break
            z = zn
        return np.copysign(0.5 * pmu * z, y)

    return lambda t: inv(lin(t)) * np.cos(mu * t + psi)


def _envelope(pulse, gate, t):
    return float(pulse.evaluate_grid(np.array([t]))[0]) * np.cos(gate.mu * t + gate.psi)


def apply_hamiltonian(space, kind, pulse, gate, t, psi):
    """``H(t) psi`` without building the operator; ``psi`` has shape ``space.shape``."""
    if kind not in APPLY:
        raise ConfigError(f"unknown hamiltonian {kind!r} (use 'full' or 'ld')", "hamiltonian")
    return APPLY[kind](space, _envelope(pulse, gate, t), t, psi)


# ---------------------------------------------------------------------------
# sparse operators


def hamiltonian_ld(space, pulse, gate, t):
    """Lamb-Dicke Hamiltonian at time ``t`` as a sparse matrix."""
    c = _envelope(pulse, gate, t)
    H = c * (space.qubit_operator(0, SIGMA_Y) + space.qubit_operator(1, SIGMA_Y))
    F = _force_matrices(space, t)
    for i in range(2):
        X = sum(space.eta[i, m] * space.mode_operator(m, F[m]) for m in range(space.n_modes))
        H = H + c * space.qubit_operator(i, SIGMA_X) @ X
    return H.tocsr()


def hamiltonian_full(space, pulse, gate, t):
    """Full interaction-picture Hamiltonian at time ``t`` as a sparse matrix."""
    c = _envelope(pulse, gate, t)
    E = _displacement_matrices(space, t)
    H = sparse.csr_matrix((space.total_dim, space.total_dim), dtype=complex)
    for i in range(2):
        Ei = sparse.csr_matrix(np.ones((1, 1)))
        for M in E[i]:
            Ei = sparse.kron(Ei, sparse.csr_matrix(M), format="csr")
        term = space.qubit_operator(i, SIGMA_PLUS) @ sparse.kron(sparse.eye(4), Ei, format="csr")
        H = H + (-1j * c) * term
        H = H + (1j * c) * term.conj().T
    return H.tocsr()


# ---------------------------------------------------------------------------
# states


def product_state(space, qubit_state):
    """``|q> (x) |0 ... 0>`` for a 4-component qubit state in the z basis."""
    q = np.asarray(qubit_state, dtype=complex)
    if q.shape != (4,):
        raise ConfigError("qubit state needs 4 amplitudes", "state")
    norm = np.linalg.norm(q)
    if not norm > 0:
        raise ConfigError("qubit state has zero norm", "state")
    psi = np.zeros(space.shape, dtype=complex)
    psi[(slice(None),) + (0,) * space.n_modes] = q / norm
    return psi


def z_string_state(s):
    """``|s1 s2>_z`` with ``s = +1`` for spin up."""
    idx = 2 * (0 if s[0] > 0 else 1) + (0 if s[1] > 0 else 1)
    q = np.zeros(4, dtype=complex)
    q[idx] = 1.0
    return q


def x_string_state(s):
    """``|s1 s2>_x`` written in the z basis."""
    plus = np.array([1, 1]) / np.sqrt(2.0)
    minus = np.array([1, -1]) / np.sqrt(2.0)
    return np.kron(plus if s[0] > 0 else minus, plus if s[1] > 0 else minus).astype(complex)


NAMED_STATES = {
    "11z": lambda: z_string_state((1, 1)),
    "11x": lambda: x_string_state((1, 1)),
    "1m1x": lambda: x_string_state((1, -1)),
}


def rxx(phi):
    """``exp(-i phi sigma_x (x) sigma_x)``."""
    xx = np.kron(SIGMA_X, SIGMA_X)
    return np.cos(phi) * np.eye(4) - 1j * np.sin(phi) * xx


def target_state(space, psi0, phi):
    q = psi0.reshape(4, -1)
    return (rxx(phi) @ q).reshape(psi0.shape)


# ---------------------------------------------------------------------------
# propagation


@dataclass(frozen=True, eq=False)
class SimResult:
    """Outcome of one TDSE run.

    ``spin_flip_prob`` is filled only for ``x``-basis Pauli-string inputs.
    """

    final_state: np.ndarray = field(repr=False)
    initial_state: np.ndarray = field(repr=False)
    fidelity_vs_target: float
    phonon_excitation_prob: float
    spin_flip_prob: float
    norm_drift: float
    hamiltonian: str
    cutoffs: tuple
    max_step: float
    fidelity_check: float = None
    x_string: tuple = None

    @property
    def infidelity(self):
        return 1.0 - self.fidelity_vs_target

    def to_dict(self):
        return {
            "hamiltonian": self.hamiltonian,
            "cutoffs": list(self.cutoffs),
            "fidelity_vs_target": self.fidelity_vs_target,
            "infidelity": self.infidelity,
            "phonon_excitation_prob": self.phonon_excitation_prob,
            "spin_flip_prob": self.spin_flip_prob,
            "norm_drift": self.norm_drift,
            "max_step": self.max_step,
            "fidelity_check": self.fidelity_check,
            "x_string": list(self.x_string) if self.x_string else None,
        }


def _integrate(space, kind, pulse, gate, psi0, max_step, rtol, atol):
    apply = APPLY[kind]
    shape = space.shape
    env = _envelope_function(pulse, gate)

    def rhs(t, y):
        c = env(t)
        return -1j * apply(space, c, t, y.reshape(shape)).ravel()

    sol = solve_ivp(rhs, (gate.t0, gate.tf), psi0.ravel().astype(complex), method="DOP853",
                    max_step=max_step, rtol=rtol, atol=atol, t_eval=[gate.tf],
                    first_step=min(max_step, gate.period) / 4)
    if not sol.success:
        raise ConvergenceError(f"time stepping failed: {sol.message}")
    return sol.y[:, -1].reshape(shape)


def _detect_x_string(q):
    for s in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        if abs(abs(np.vdot(x_string_state(s), q)) - 1.0) < 1e-12:
            return s
    return None


def to_x_basis(psi):
    """Rotate both qubits into the ``x`` basis (index 0 is ``s = +1``)."""
    return _apply_qubit(HADAMARD, _apply_qubit(HADAMARD, psi, 0), 1)


def extract_channels(result, s=None):
    """Phonon-excitation and spin-flip probabilities for an ``x``-string input.

    Returns ``(P_ph, P_flip)`` where ``P_ph`` sums ``|psi|^2`` over the input
    string with any phonon excited and ``P_flip`` sums over every other
    string.  Together with the fidelity they add to the state norm.
    """
    s = result.x_string if s is None else tuple(s)
    if s is None:
        raise ConfigError("channel extraction needs an x-basis Pauli string input", "state")
    px = np.abs(to_x_basis(result.final_state)) ** 2
    idx = 2 * (0 if s[0] > 0 else 1) + (0 if s[1] > 0 else 1)
    vac = (0,) * (px.ndim - 1)
    same = px[idx]
    p_ph = float(same.sum() - same[vac])
    p_flip = float(px.sum() - same.sum())
    return p_ph, p_flip


def _result(space, kind, psi0, psi, gate, max_step, check):
    target = target_state(space, psi0, gate.phi_target)
    fid = float(abs(np.vdot(target.ravel(), psi.ravel())) ** 2)
    norm = float(np.linalg.norm(psi.ravel()))
    vac = (slice(None),) + (0,) * space.n_modes
    p_phonon = float(norm ** 2 - np.sum(np.abs(psi[vac]) ** 2))
    q0 = psi0[vac]
    s = _detect_x_string(q0)
    res = SimResult(final_state=psi, initial_state=psi0, fidelity_vs_target=fid,
                    phonon_excitation_prob=max(p_phonon, 0.0), spin_flip_prob=None,
                    norm_drift=abs(norm - 1.0), hamiltonian=kind, cutoffs=space.cutoffs,
                    max_step=max_step, fidelity_check=check, x_string=s)
    if s is not None:
        _, p_flip = extract_channels(res, s)
        res = replace(res, spin_flip_prob=p_flip)
    return res


def propagate(space, kind, pulse, gate, psi0, steps_per_period=None,
              check_halving=True, rtol=1e-10, atol=1e-12, halving_tol=HALVING_TOL):
    """Evolve ``psi0`` over the gate with the chosen Hamiltonian.

    The explicit DOP853 stepper is error controlled by ``rtol``/``atol``;
    ``steps_per_period`` additionally caps the step at
    ``(2 pi / mu) / steps_per_period``.  With ``check_halving`` the run is
    repeated with the cap halved and both tolerances divided by
    ``2**8`` (the step reduction that halving gives an eighth-order method),
    and the two fidelities must agree to ``halving_tol``; the finer run is
    returned.

    Raises
    ------
    ConvergenceError
        Carrying both fidelities when the halving check fails.
    """
    if kind not in APPLY:
        raise ConfigError(f"unknown hamiltonian {kind!r} (use 'full' or 'ld')", "hamiltonian")
    psi0 = np.asarray(psi0, dtype=complex).reshape(space.shape)
    if abs(np.linalg.norm(psi0.ravel()) - 1.0) > 1e-12:
        raise ConfigError("initial state must have unit norm", "state")
    h = gate.period / steps_per_period if steps_per_period else np.inf
    psi = _integrate(space, kind, pulse, gate, psi0, h, rtol, atol)
    if not check_halving:
        return _result(space, kind, psi0, psi, gate, h, None)
    coarse = _result(space, kind, psi0, psi, gate, h, None)
    h = h / 2
    psi = _integrate(space, kind, pulse, gate, psi0, h, rtol / HALVING_FACTOR,
                     max(atol / HALVING_FACTOR, 1e-16))
    fine = _result(space, kind, psi0, psi, gate, h, coarse.fidelity_vs_target)
    if abs(fine.fidelity_vs_target - coarse.fidelity_vs_target) > halving_tol:
        raise ConvergenceError(
            "fidelity changed under step halving: "
            f"{coarse.fidelity_vs_target:.12f} vs {fine.fidelity_vs_target:.12f}",
            [coarse.fidelity_vs_target, fine.fidelity_vs_target])
    return fine


# ---------------------------------------------------------------------------
# state dump


def write_state(path, psi):
    """Binary dump: 16-byte header then little-endian ``(re, im)`` float64 pairs.

    Header: magic ``b"MSSV"``, ``uint32`` version, ``uint64`` dimension.
    """
    flat = np.ascontiguousarray(np.asarray(psi, dtype=complex).ravel())
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC + struct.pack("<IQ", DUMP_VERSION, flat.size))
        fh.write(flat.astype("<c16").tobytes())


def read_state(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != DUMP_MAGIC:
            raise ConfigError(f"{path} is not a state dump", "state")
        version, dim = struct.unpack("<IQ", head[4:])
        if version != DUMP_VERSION:
            raise ConfigError(f"unsupported state dump version {version}", "state")
        raw = fh.read()
    if len(raw) != 16 * dim:
        raise ConfigError(f"state dump {path} has the wrong length", "state")
    return np.frombuffer(raw, dtype="<c16").astype(complex)
