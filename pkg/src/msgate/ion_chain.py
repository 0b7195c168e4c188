"""Equilibrium positions, normal modes and Lamb-Dicke parameters of a linear ion chain.

Lengths are scaled by ``ell = (e^2 / (4 pi eps0 M omega_ax^2))^(1/3)`` and
frequencies by the axial trap frequency while solving; results are returned
in SI units (metres, rad/s).
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import constants

from .errors import ConfigError, ConvergenceError, InstabilityError

AMU = constants.physical_constants["atomic mass constant"][0]
CA40_MASS = 39.962590863 * AMU - constants.m_e


@dataclass(frozen=True)
class ChainConfig:
    """Linear chain in a harmonic trap driven on one radial axis.

    Frequencies are ordinary frequencies in Hz; wavevector components in
    rad/m; ``illuminated_pair`` uses zero-based ion indices counted from the
    most negative equilibrium position.
    """

    n_ions: int
    axial_freq_hz: float
    radial_freq_hz: float
    wavevector_radial: float
    ion_mass: float = CA40_MASS
    wavevector_axial: float = 0.0
    illuminated_pair: tuple = (0, 1)
    charge: float = constants.e

    def __post_init__(self):
        object.__setattr__(self, "illuminated_pair", tuple(int(i) for i in self.illuminated_pair))
        if int(self.n_ions) != self.n_ions or self.n_ions < 2:
            raise ConfigError("n_ions must be an integer >= 2", "n_ions")
        for name in ("axial_freq_hz", "radial_freq_hz", "ion_mass", "charge"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive", name)
        if not self.radial_freq_hz > self.axial_freq_hz:
            raise ConfigError("radial_freq_hz must exceed axial_freq_hz for a linear chain",
                              "radial_freq_hz")
        k1, k2 = self.illuminated_pair if len(self.illuminated_pair) == 2 else (None, None)
        if k1 is None or k1 == k2 or not (0 <= k1 < self.n_ions and 0 <= k2 < self.n_ions):
            raise ConfigError("illuminated_pair must hold two distinct indices below n_ions",
                              "illuminated_pair")

    @property
    def omega_axial(self):
        return 2.0 * np.pi * self.axial_freq_hz

    @property
    def omega_radial(self):
        return 2.0 * np.pi * self.radial_freq_hz

    @property
    def length_scale(self):
        return (self.charge ** 2 / (4 * np.pi * constants.epsilon_0 * self.ion_mass
                                    * self.omega_axial ** 2)) ** (1.0 / 3.0)


@dataclass(frozen=True, eq=False)
class ModeData:
    """Equilibrium configuration and both normal-mode branches.

    Mode vectors are stored column-wise, ``vectors[ion, mode]``; modes are
    sorted by ascending frequency.  ``lamb_dicke_full`` is ``[ion, mode]`` for
    the radial branch and ``lamb_dicke_pair`` keeps the two illuminated rows.
    """

    positions: np.ndarray
    mode_freqs_axial: np.ndarray
    mode_freqs_radial: np.ndarray
    mode_vectors_axial: np.ndarray
    mode_vectors_radial: np.ndarray
    lamb_dicke_full: np.ndarray
    lamb_dicke_pair: np.ndarray
    lamb_dicke_axial: np.ndarray = field(default=None)

    @property
    def n_modes(self):
        return len(self.mode_freqs_radial)

    # Drive couples to the radial branch only.
    @property
    def freqs(self):
        return self.mode_freqs_radial

    @property
    def eta(self):
        return self.lamb_dicke_pair


def _coulomb_hessian(x):
    """``G[k, l]`` of the scaled Coulomb energy (off-diagonal -1/|d|^3)."""
    d = np.abs(x[:, None] - x[None, :])
    np.fill_diagonal(d, 1.0)
    inv3 = d ** -3
    np.fill_diagonal(inv3, 0.0)
    G = -inv3
    np.fill_diagonal(G, inv3.sum(axis=1))
    return G


def _gradient(x):
    d = x[:, None] - x[None, :]
    np.fill_diagonal(d, 1.0)
    pair = np.sign(d) / d ** 2
    np.fill_diagonal(pair, 0.0)
    return x - pair.sum(axis=1)


def _energy(x):
    d = np.abs(x[:, None] - x[None, :])
    iu = np.triu_indices(len(x), 1)
    return 0.5 * np.sum(x ** 2) + np.sum(1.0 / d[iu])


def scaled_equilibrium(n_ions, tol=1e-12, max_iter=200):
    """Equilibrium positions in units of ``ell`` by damped Newton iteration.

    Starts from equally spaced ions; each step is backtracked until the
    energy decreases and the ordering is preserved.
    """
    spacing = 2.0 * n_ions ** -0.56 if n_ions > 2 else 2.0 ** (1.0 / 3.0)
    x = spacing * (np.arange(n_ions) - 0.5 * (n_ions - 1))
    energy = _energy(x)
    grad = _gradient(x)
    for _ in range(max_iter):
        if np.max(np.abs(grad)) < tol:
            break
        hess = np.eye(n_ions) + 2.0 * _coulomb_hessian(x)
        step = np.linalg.solve(hess, grad)
        lam = 1.0
        while True:
            trial = x - lam * step
            if np.all(np.diff(trial) > 0):
                e_trial = _energy(trial)
                if e_trial <= energy + 1e-14 * abs(energy) or lam < 1e-8:
                    break
            lam *= 0.5
            if lam < 1e-12:
                raise ConvergenceError("Newton line search failed in equilibrium search",
                                       [float(np.max(np.abs(grad)))])
        x = trial
        x = 0.5 * (x - x[::-1])
        energy = _energy(x)
        grad = _gradient(x)
    residual = float(np.max(np.abs(grad)))
    if residual >= tol:
        raise ConvergenceError(
            f"equilibrium search did not converge: max gradient {residual:.3e}", [residual])
    return x


def equilibrium_positions(config):
    """Equilibrium positions in metres, ascending and centred on zero."""
    return scaled_equilibrium(config.n_ions) * config.length_scale


def _sign_fix(vectors):
    """Flip each column so its largest-magnitude component is positive.

    Near-ties (within 1e-9 relative) are resolved towards the lowest index so
    symmetric and antisymmetric modes get a reproducible sign.
    """
    out = vectors.copy()
    for m in range(out.shape[1]):
        mags = np.abs(out[:, m])
        idx = int(np.argmax(mags >= mags.max() * (1 - 1e-9)))
        if out[idx, m] < 0:
            out[:, m] *= -1
    return out


def _diagonalize(K, branch):
    vals, vecs = np.linalg.eigh(K)
    bad = np.flatnonzero(vals <= 0)
    if bad.size:
        m = int(bad[0])
        raise InstabilityError(
            f"{branch} mode {m} has non-positive squared frequency {vals[m]:.4e} "
            "(chain unstable at this trap ratio)", mode=m, eigenvalue=float(vals[m]))
    return vals, _sign_fix(vecs)


def mode_matrices(config, positions):
    """Axial and radial dynamical matrices in units of ``omega_ax^2``."""
    x = np.asarray(positions, dtype=float) / config.length_scale
    G = _coulomb_hessian(x)
    n = config.n_ions
    K_ax = np.eye(n) + 2.0 * G
    ratio = (config.radial_freq_hz / config.axial_freq_hz) ** 2
    K_rad = ratio * np.eye(n) - G
    return K_ax, K_rad


def lamb_dicke(config, freqs, vectors, wavevector):
    """``eta[k, m] = k * sqrt(hbar / (2 M omega_m)) * b[k, m]``."""
    zpf = np.sqrt(constants.hbar / (2.0 * config.ion_mass * np.asarray(freqs)))
    return wavevector * vectors * zpf[None, :]


def normal_modes(config, positions=None):
    """Diagonalize both branches and attach Lamb-Dicke matrices.

    Raises
    ------
    InstabilityError
        If a radial (or axial) squared frequency is not positive.
    """
    if positions is None:
        positions = equilibrium_positions(config)
    positions = np.asarray(positions, dtype=float)
    K_ax, K_rad = mode_matrices(config, positions)
    lam_ax, b_ax = _diagonalize(K_ax, "axial")
    lam_rad, b_rad = _diagonalize(K_rad, "radial")
    w_ax = config.omega_axial * np.sqrt(lam_ax)
    w_rad = config.omega_axial * np.sqrt(lam_rad)
    eta_rad = lamb_dicke(config, w_rad, b_rad, config.wavevector_radial)
    eta_ax = lamb_dicke(config, w_ax, b_ax, config.wavevector_axial)
    k1, k2 = config.illuminated_pair
    return ModeData(
        positions=positions,
        mode_freqs_axial=w_ax,
        mode_freqs_radial=w_rad,
        mode_vectors_axial=b_ax,
        mode_vectors_radial=b_rad,
        lamb_dicke_full=eta_rad,
        lamb_dicke_pair=eta_rad[[k1, k2], :],
        lamb_dicke_axial=eta_ax,
    )


def chain_modes(config):
    """Convenience: positions, modes and Lamb-Dicke parameters in one call."""
    return normal_modes(config, equilibrium_positions(config))


def axial_freq_for_lowest_radial(n_ions, radial_freq_hz, lowest_radial_hz):
    """Axial trap frequency (Hz) placing the lowest radial mode at ``lowest_radial_hz``.

    Uses the scaled Coulomb Hessian, whose largest eigenvalue ``g`` sets
    ``w_low^2 = w_rad^2 - g * w_ax^2``; positions in units of ``ell`` do not
    depend on the trap, so this is a closed-form solve.
    """
    x = scaled_equilibrium(n_ions)
    g = np.linalg.eigvalsh(_coulomb_hessian(x)).max()
    return float(np.sqrt((radial_freq_hz ** 2 - lowest_radial_hz ** 2) / g))


def modes_to_dict(config, modes):
    return {
        "n_ions": config.n_ions,
        "illuminated_pair": list(config.illuminated_pair),
        "positions_m": modes.positions.tolist(),
        "mode_freqs_axial_rad_s": modes.mode_freqs_axial.tolist(),
        "mode_freqs_radial_rad_s": modes.mode_freqs_radial.tolist(),
        "mode_vectors_axial": modes.mode_vectors_axial.tolist(),
        "mode_vectors_radial": modes.mode_vectors_radial.tolist(),
        "lamb_dicke_full": modes.lamb_dicke_full.tolist(),
        "lamb_dicke_pair": modes.lamb_dicke_pair.tolist(),
    }


def modes_csv_rows(modes):
    """Rows ``branch, mode, freq_rad_s, freq_hz, b_0 ... b_{n-1}``."""
    n = len(modes.positions)
    header = ["branch", "mode", "freq_rad_s", "freq_hz"] + [f"b_{k}" for k in range(n)] + \
        [f"eta_{k}" for k in range(n)]
    rows = []
    for branch, freqs, vecs, eta in (
            ("axial", modes.mode_freqs_axial, modes.mode_vectors_axial, modes.lamb_dicke_axial),
            ("radial", modes.mode_freqs_radial, modes.mode_vectors_radial, modes.lamb_dicke_full)):
        for m, w in enumerate(freqs):
            rows.append([branch, m, repr(float(w)), repr(float(w / (2 * np.pi)))]
                        + [repr(float(v)) for v in vecs[:, m]]
                        + [repr(float(v)) for v in eta[:, m]])
    return header, rows
