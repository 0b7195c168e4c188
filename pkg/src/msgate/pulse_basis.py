"""Clamped cubic-spline basis for amplitude envelopes and the Pulse container.

A pulse is ``Omega(t) = sum_s Omega_s b_s(t)`` where ``b_s`` is the C2 cubic
spline through evenly spaced knots with value one at knot ``s``, zero at
every other knot, and zero value and slope at both ends of the gate.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import solve_banded

from .errors import ConfigError, OutOfDomainError

KINDS = ("linear", "transformed", "raw-samples")


def _knot_slopes(values, h):
    """Slopes at all knots of the clamped (zero end slope) C2 spline.

    ``values`` has shape ``(n_knots, k)``; interior rows satisfy
    ``d[j-1] + 4 d[j] + d[j+1] = 3 (y[j+1] - y[j-1]) / h``.
    """
    n = values.shape[0]
    slopes = np.zeros_like(values, dtype=float)
    if n <= 2:
        return slopes
    inner = n - 2
    rhs = 3.0 * (values[2:] - values[:-2]) / h
    ab = np.zeros((3, inner))
    ab[0, 1:] = 1.0
    ab[1, :] = 4.0
    ab[2, :-1] = 1.0
    slopes[1:-1] = solve_banded((1, 1), ab, rhs)
    return slopes


def _hermite_coefficients(values, slopes, h):
    """Power-basis coefficients ``c[seg, 4, k]`` in the local variable ``t - knot``."""
    y0, y1 = values[:-1], values[1:]
    d0, d1 = slopes[:-1], slopes[1:]
    delta = (y1 - y0) / h
    c2 = (3.0 * delta - 2.0 * d0 - d1) / h
    c3 = (d0 + d1 - 2.0 * delta) / h ** 2
    return np.stack([y0, d0, c2, c3], axis=1)


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Basis functions ``b_1 ... b_n_seg`` on ``n_seg + 1`` equal segments.

    ``coefficients[seg, power, s]`` holds the local cubic of ``b_s`` on
    segment ``seg``.
    """

    t0: float
    tf: float
    n_seg: int
    knots: np.ndarray = field(repr=False)
    coefficients: np.ndarray = field(repr=False)

    @property
    def n_segments(self):
        return self.n_seg + 1

    @property
    def h(self):
        return (self.tf - self.t0) / self.n_segments

    def segment_index(self, t):
        idx = np.floor((t - self.t0) / self.h).astype(int)
        return np.clip(idx, 0, self.n_segments - 1)

    def check_domain(self, t):
        t = np.asarray(t, dtype=float)
        if t.size and (np.min(t) < self.t0 or np.max(t) > self.tf):
            bad = t[(t < self.t0) | (t > self.tf)]
            raise OutOfDomainError(
                f"time {float(bad.flat[0]):.6e} s outside gate interval "
                f"[{self.t0:.6e}, {self.tf:.6e}]")
        return t

    def _local(self, t, coeffs, nu):
        t = np.atleast_1d(self.check_domain(t))
        idx = self.segment_index(t)
        u = t - self.knots[idx]
        c = coeffs[idx]
        if nu == 0:
            return ((c[:, 3] * u[:, None] + c[:, 2]) * u[:, None] + c[:, 1]) * u[:, None] + c[:, 0]
        if nu == 1:
            return (3.0 * c[:, 3] * u[:, None] + 2.0 * c[:, 2]) * u[:, None] + c[:, 1]
        if nu == 2:
            return 6.0 * c[:, 3] * u[:, None] + 2.0 * c[:, 2]
        if nu == 3:
            return 6.0 * c[:, 3] + 0.0 * u[:, None]
        raise ValueError("derivative order must be 0..3")

    def values(self, t, nu=0):
        """Matrix ``[len(t), n_seg]`` of basis values (or derivatives)."""
        return self._local(t, self.coefficients, nu)

    def combine(self, coefficients):
        """Segment cubics of ``sum_s c_s b_s``; shape ``(n_segments, 4)``."""
        return self.coefficients @ np.asarray(coefficients, dtype=float)


def build_basis(t0, tf, n_seg):
    """Construct the clamped-zero cubic-spline basis.

    Parameters
    ----------
    t0, tf : float
        Gate interval in seconds.
    n_seg : int
        Number of interior knots, i.e. free amplitudes.
    """
    if int(n_seg) != n_seg or n_seg < 1:
        raise ConfigError("n_seg must be a positive integer (no free parameters otherwise)",
                          "n_seg")
    if not tf > t0:
        raise ConfigError("tf must exceed t0", "tf")
    n_seg = int(n_seg)
    knots = np.linspace(t0, tf, n_seg + 2)
    h = (tf - t0) / (n_seg + 1)
    y = np.zeros((n_seg + 2, n_seg))
    y[1:-1] = np.eye(n_seg)
    slopes = _knot_slopes(y, h)
    coeffs = _hermite_coefficients(y, slopes, h)
    coeffs.flags.writeable = False
    knots.flags.writeable = False
    return SplineBasis(t0=float(t0), tf=float(tf), n_seg=n_seg, knots=knots, coefficients=coeffs)


def default_n_seg(n_ions):
    """Free amplitudes per pulse: ``2 n_ions + 1`` (``2 n_ions + 2`` segments)."""
    return 2 * n_ions + 1


@dataclass(frozen=True, eq=False)
class Pulse:
    """Amplitude envelope ``Omega(t)`` in rad/s.

    ``kind`` selects the representation:

    * ``linear``: spline with ``coefficients`` on ``basis``;
    * ``transformed``: inverse carrier transform of the linear spline, applied
      pointwise at every evaluation time (``mu`` required);
    * ``raw-samples``: clamped cubic interpolation of ``sample_values`` taken
      at ``sample_times``.
    """

    basis: SplineBasis
    coefficients: np.ndarray
    kind: str = "linear"
    mu: float = None
    sample_times: np.ndarray = field(default=None, repr=False)
    sample_values: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown pulse kind {self.kind!r}", "kind")
        object.__setattr__(self, "coefficients",
                           np.asarray(self.coefficients, dtype=float).copy())
        if self.coefficients.shape != (self.basis.n_seg,):
            raise ConfigError("coefficient count does not match basis", "coefficients")
        if self.kind == "transformed" and not (self.mu and self.mu > 0):
            raise ConfigError("transformed pulse needs mu > 0", "mu")

    @property
    def t0(self):
        return self.basis.t0

    @property
    def tf(self):
        return self.basis.tf

    def linear_values(self, t, nu=0):
        """Underlying spline ``sum_s Omega_s b_s^{(nu)}(t)``."""
        seg = self.basis.combine(self.coefficients)[:, :, None]
        return self.basis._local(t, seg, nu)[:, 0]

    def __call__(self, t):
        scalar = np.ndim(t) == 0
        out = self.evaluate_grid(np.atleast_1d(t))
        return float(out[0]) if scalar else out

    def evaluate(self, t):
        return float(self.evaluate_grid(np.atleast_1d(np.asarray(t, dtype=float)))[0])

    def evaluate_grid(self, times):
        times = np.asarray(times, dtype=float)
        if self.kind == "linear":
            return self.linear_values(times)
        if self.kind == "transformed":
            from .pulse_solver import inverse_carrier_transform
            return inverse_carrier_transform(self.linear_values(times), self.mu)
        return self._raw_interpolant(self.basis.check_domain(times))

    @cached_property
    def _raw_interpolant(self):
        from scipy.interpolate import CubicSpline

        return CubicSpline(self.sample_times, self.sample_values, bc_type="clamped")

    def with_coefficients(self, coefficients):
        return Pulse(self.basis, coefficients, self.kind, self.mu,
                     self.sample_times, self.sample_values)


def zero_pulse(t0, tf, n_seg):
    return Pulse(build_basis(t0, tf, n_seg), np.zeros(n_seg))


def raw_sample_pulse(times, values):
    """Pulse interpolating explicit samples (first/last sample define the interval)."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.ndim != 1 or times.shape != values.shape or times.size < 4:
        raise ConfigError("raw samples need matching 1-D time/value arrays (>= 4 points)",
                          "samples")
    if np.any(np.diff(times) <= 0):
        raise ConfigError("sample times must increase strictly", "samples")
    basis = build_basis(times[0], times[-1], 1)
    return Pulse(basis, np.zeros(1), "raw-samples", sample_times=times, sample_values=values)


def pulse_to_dict(pulse):
    d = {
        "t0": pulse.t0,
        "tf": pulse.tf,
        "n_seg": pulse.basis.n_seg,
        "coefficients": [float(c) for c in pulse.coefficients],
        "kind": pulse.kind,
    }
    if pulse.kind == "transformed":
        d["mu"] = float(pulse.mu)
    if pulse.kind == "raw-samples":
        d["times"] = pulse.sample_times.tolist()
        d["values"] = pulse.sample_values.tolist()
    return d


def pulse_from_dict(d):
    try:
        kind = d.get("kind", "linear")
        if kind == "raw-samples":
            return raw_sample_pulse(d["times"], d["values"])
        basis = build_basis(float(d["t0"]), float(d["tf"]), int(d["n_seg"]))
        return Pulse(basis, d["coefficients"], kind, d.get("mu"))
    except KeyError as exc:
        raise ConfigError(f"pulse file missing field {exc.args[0]!r}", exc.args[0]) from None


def sample_pulse(pulse, rate):
    """Samples ``(t, Omega)`` at ``rate`` samples per second, endpoints included."""
    n = max(2, int(np.ceil((pulse.tf - pulse.t0) * rate * (1 - 1e-12))) + 1)
    t = np.linspace(pulse.t0, pulse.tf, n)
    return t, pulse.evaluate_grid(t)
