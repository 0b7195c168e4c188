"""Composite Gauss-Legendre panels with spectral cumulative integration.

All time integrals in the package (matrix assembly, carrier phase,
phase-space trajectories, spin-spin phases and the spin-flip double
integral) are evaluated on a :class:`PanelGrid`: the gate interval is cut
into equal panels whose edges include every spline knot, and each panel
carries ``order`` Gauss-Legendre nodes.  Besides ordinary definite
integrals the grid provides running integrals evaluated *at the nodes*
through a Legendre integration matrix, so nested integrals (a running
integral of an integrand that itself contains a running integral) stay
high-order accurate.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre

DEFAULT_ORDER = 12
DEFAULT_PANELS_PER_PERIOD = 4


@lru_cache(maxsize=None)
def _reference_rule(order):
    """Nodes, weights and integration matrix on [-1, 1].

    ``S[i, j]`` integrates the Lagrange basis polynomial of node ``j`` from
    -1 to node ``i``.
    """
    x, w = legendre.leggauss(order)
    vander = legendre.legvander(x, order - 1)
    vint = np.empty_like(vander)
    for j in range(order):
        c = np.zeros(order)
        c[j] = 1.0
        vint[:, j] = legendre.legval(x, legendre.legint(c, lbnd=-1.0))
    S = np.linalg.solve(vander.T, vint.T).T
    x.flags.writeable = False
    w.flags.writeable = False
    S.flags.writeable = False
    return x, w, S


@dataclass(frozen=True)
class PanelGrid:
    """Uniform panels on ``[t0, tf]`` with Gauss-Legendre nodes inside.

    Attributes
    ----------
    edges : ndarray, shape (P + 1,)
        Panel boundaries, ``edges[0] == t0`` and ``edges[-1] == tf`` exactly.
    nodes : ndarray, shape (P, q)
    weights : ndarray, shape (P, q)
    order : int
    """

    edges: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    order: int

    @property
    def t0(self):
        return float(self.edges[0])

    @property
    def tf(self):
        return float(self.edges[-1])

    @property
    def n_panels(self):
        return self.nodes.shape[0]

    @property
    def flat_nodes(self):
        return self.nodes.ravel()

    @property
    def flat_weights(self):
        return self.weights.ravel()

    @property
    def panel_width(self):
        return (self.tf - self.t0) / self.n_panels

    def integrate(self, values):
        """Definite integral over the whole interval.

        ``values`` has shape ``(P, q, ...)`` or ``(P * q, ...)``.  The sum is
        carried out panel by panel in a fixed order.
        """
        v = self._panelled(values)
        per_panel = np.einsum("pq,pq...->p...", self.weights, v)
        return per_panel.sum(axis=0)

    def cumulative(self, values):
        """Running integral from ``t0``.

        Returns
        -------
        at_nodes : ndarray, shape like ``values`` (panelled, ``(P, q, ...)``)
        at_edges : ndarray, shape ``(P + 1, ...)``
        """
        v = self._panelled(values)
        _, _, S = _reference_rule(self.order)
        half = 0.5 * self.panel_width
        per_panel = np.einsum("pq,pq...->p...", self.weights, v)
        at_edges = np.zeros((self.n_panels + 1,) + v.shape[2:], dtype=per_panel.dtype)
        np.cumsum(per_panel, axis=0, out=at_edges[1:])
        local = half * np.einsum("ij,pj...->pi...", S, v)
        at_nodes = at_edges[:-1, None, ...] + local
        return at_nodes, at_edges

    def locate(self, times):
        """Panel index for each time (last panel owns ``tf``)."""
        t = np.asarray(times, dtype=float)
        idx = np.floor((t - self.t0) / self.panel_width).astype(int)
        return np.clip(idx, 0, self.n_panels - 1)

    def _panelled(self, values):
        v = np.asarray(values)
        if v.shape[:2] == self.nodes.shape:
            return v
        return v.reshape(self.nodes.shape + v.shape[1:])


def make_grid(t0, tf, n_segments=1, max_panel=None, order=DEFAULT_ORDER):
    """Build a :class:`PanelGrid` aligned to ``n_segments`` equal segments.

    Each segment is split into the smallest number of equal panels whose
    width does not exceed ``max_panel``.
    """
    if not tf > t0:
        raise ValueError("tf must exceed t0")
    seg = (tf - t0) / n_segments
    per_seg = 1 if max_panel is None else max(1, int(np.ceil(seg / max_panel - 1e-12)))
    n_panels = n_segments * per_seg
    edges = np.linspace(t0, tf, n_panels + 1)
    x, w, _ = _reference_rule(order)
    h = (tf - t0) / n_panels
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = mid[:, None] + 0.5 * h * x[None, :]
    weights = np.broadcast_to(0.5 * h * w, nodes.shape).copy()
    return PanelGrid(edges=edges, nodes=nodes, weights=weights, order=order)


def grid_for_gate(t0, tf, mu, n_segments=1, panels_per_period=DEFAULT_PANELS_PER_PERIOD,
                  order=DEFAULT_ORDER, mu_max=None):
    """Grid resolving the carrier period ``2*pi/mu`` (or ``2*pi/mu_max``)."""
    top = mu if mu_max is None else max(mu, mu_max)
    period = 2.0 * np.pi / top
    return make_grid(t0, tf, n_segments, period / panels_per_period, order)


def refine(grid, factor=2):
    """Same interval and order, panels split ``factor`` times."""
    n_panels = grid.n_panels * factor
    return make_grid(grid.t0, grid.tf, n_panels, None, grid.order)


def partial_integrals(grid, func, times):
    """Running integral of ``func`` from ``t0`` evaluated at arbitrary ``times``.

    ``func`` maps an array of times to integrand values (first axis = time).
    The integral up to the owning panel's left edge comes from the panel
    sums; the remainder is a ``q``-point Gauss-Legendre rule on
    ``[edge, t]``.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    vals = func(grid.flat_nodes)
    _, at_edges = grid.cumulative(vals)
    idx = grid.locate(times)
    left = grid.edges[idx]
    x, w, _ = _reference_rule(grid.order)
    half = 0.5 * (times - left)
    pts = left[:, None] + half[:, None] * (x[None, :] + 1.0)
    sub = np.asarray(func(pts.ravel()))
    sub = sub.reshape(pts.shape + sub.shape[1:])
    tail = np.einsum("q,tq...->t...", w, sub) * half.reshape((-1,) + (1,) * (sub.ndim - 2))
    return at_edges[idx] + tail
