"""Conditional Donsker-delta kernel via oscillatory Fourier quadrature.

Everything here evaluates integrals of the form

    (1/2pi) int F(t, x, y) g(x) dx,

where F is the conditional characteristic-function integrand

    F(t, x, y) = exp[ i x (J(t) + G(t) - y)
                      + sum_p w_p (e^{i x theta_p} - 1 - i x theta_p)
                      - (1/2) x^2 v(t) ],

J(t) and G(t) are the realized jump and Brownian integrals of the signal up
to t, v(t) is the remaining Gaussian variance, and the (theta_p, w_p) pairs
encode the deterministic jump tail as exact cell sums.  The three
multiplicative factors g of interest are

    g = 1                      -> conditional density / mass of Y at y,
    g = i x sigma_y(t)         -> conditional Brownian Malliavin derivative,
    g = e^{i x theta_j(t)} - 1 -> conditional jump Malliavin derivative.

In gaussian-dominant mode the integral runs over a truncated real line:
|F| <= exp(-x^2 v / 2) because Re(e^{iu} - 1 - iu) <= 0, so the truncation
point is chosen where that envelope falls below ``envelope_floor``.  In
pure-lattice mode the integrand is 2pi-periodic and the integral over
[-pi, pi] returns the conditional probability mass at the lattice point y.

Quadrature is composite Gauss-Legendre with panel doubling; the error
estimate is the difference between successive refinements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .model import PURE_LATTICE, ValidatedModel

__all__ = [
    "QuadratureSpec",
    "FourierTail",
    "FourierState",
    "fourier_state",
    "build_tail",
    "integrand_F",
    "cond_delta",
    "cond_malliavin_B",
    "cond_malliavin_N",
    "kernel_values",
    "KernelValues",
    "delta_batch",
    "delta_ygrid",
    "QuadratureDidNotConverge",
    "OffLattice",
]

_GL_ORDER = 16
#: |mu - round(mu)| above this means y is off the integer lattice
_LATTICE_ATOL = 1e-6


class QuadratureDidNotConverge(RuntimeError):
    """Panel doubling hit max_nodes before the error estimate met abs_tol."""


class OffLattice(ValueError):
    """Pure-lattice evaluation requested at a y not on the signal's lattice."""


@dataclass(frozen=True)
class QuadratureSpec:
    mode: str = "gaussian-decay"  # or "periodic"
    abs_tol: float = 1e-10
    max_nodes: int = 65536
    envelope_floor: float = 1e-16

    def __post_init__(self):
        if self.mode not in ("gaussian-decay", "periodic"):
            raise ValueError(f"unknown quadrature mode {self.mode!r}")
        if self.abs_tol <= 0.0:
            raise ValueError("abs_tol must be positive")
        if not (0.0 < self.envelope_floor < 1.0):
            raise ValueError("envelope_floor must lie in (0, 1)")

    @classmethod
    def for_model(cls, model: ValidatedModel, **kwargs) -> "QuadratureSpec":
        mode = "periodic" if model.mode == PURE_LATTICE else "gaussian-decay"
        return cls(mode=mode, **kwargs)


@dataclass(frozen=True)
class FourierTail:
    """Deterministic ingredients of F at a grid node t: everything except
    the realized running integrals."""

    t: float
    node: int
    tail_gaussian: float
    jump_thetas: np.ndarray   # (P,) nonzero theta levels over [t, T0]
    jump_weights: np.ndarray  # (P,) lam_j * (time spent at that level)
    sigma_y_t: float
    theta_t: np.ndarray       # (m,) theta_j on the cell starting at t
    mode: str

    def tail_jump(self, x):
        """sum_p w_p (e^{i x theta_p} - 1 - i x theta_p), vectorized in x."""
        x = np.asarray(x, dtype=float)
        if len(self.jump_thetas) == 0:
            return np.zeros(x.shape, dtype=complex)
        ph = np.exp(1j * np.multiply.outer(x, self.jump_thetas))
        lin = float(np.dot(self.jump_weights, self.jump_thetas))
        return ph @ self.jump_weights - self.jump_weights.sum() - 1j * x * lin

    @property
    def linear_jump_coefficient(self) -> float:
        """sum_p w_p theta_p, the -i x part of the jump tail."""
        if len(self.jump_thetas) == 0:
            return 0.0
        return float(np.dot(self.jump_weights, self.jump_thetas))

    @property
    def oscillation_scale(self) -> float:
        """Bound on how fast the non-phase part of F wiggles in x."""
        jump = float(np.dot(self.jump_weights, np.abs(self.jump_thetas)))
        return jump + 2.0 * math.sqrt(max(self.tail_gaussian, 0.0))


@dataclass(frozen=True)
class FourierState:
    """F_t-measurable state of a single path at a grid node."""

    tail: FourierTail
    running_jump_phase: float
    running_brownian_integral: float

    @property
    def t(self) -> float:
        return self.tail.t

    @property
    def running_signal(self) -> float:
        """Realized Y(t) = Brownian integral + compensated jump integral."""
        return self.running_brownian_integral + self.running_jump_phase


def build_tail(model: ValidatedModel, t: float) -> FourierTail:
    """Assemble the deterministic tail data at grid node t < T0."""
    k = model.grid.node_index(t)
    if k >= model.n_steps:
        raise ValueError("tail undefined at t = T0; evaluate strictly before the horizon")
    dt = model.dt
    lam = model.levy.intensities
    thetas, weights = [], []
    for j in range(model.n_marks):
        levels, counts = np.unique(model.theta_values[j, k:], return_counts=True)
        for level, c in zip(levels, counts):
            if level != 0.0:
                thetas.append(level)
                weights.append(lam[j] * c * dt)
    theta_t = model.theta_values[:, k] if model.n_marks else np.zeros(0)
    return FourierTail(
        t=float(k * dt),
        node=k,
        tail_gaussian=float(model.tail_gaussian_at_node[k]),
        jump_thetas=np.asarray(thetas, dtype=float),
        jump_weights=np.asarray(weights, dtype=float),
        sigma_y_t=float(model.sigma_y_values[k]),
        theta_t=np.asarray(theta_t, dtype=float),
        mode=model.mode,
    )


def fourier_state(model: ValidatedModel, path, t: float) -> FourierState:
    """Build the Fourier state of a sample path at grid node t.

    ``path`` needs ``brownian`` (node-indexed) and ``jump_counts``
    ((n_steps, m) cell counts); both are fields of SamplePath.
    """
    tail = build_tail(model, t)
    k = tail.node
    dB = np.diff(path.brownian[: k + 1])
    g = float(np.dot(model.sigma_y_values[:k], dB))
    if model.n_marks:
        comp = path.jump_counts[:k, :].T - model.levy.intensities[:, None] * model.dt
        j = float(np.sum(model.theta_values[:, :k] * comp))
    else:
        j = 0.0
    return FourierState(tail=tail, running_jump_phase=j, running_brownian_integral=g)


def integrand_F(state: FourierState, x, y: float):
    """The Fourier integrand F(t, x, y); entire in x, vectorized over x."""
    tail = state.tail
    x = np.asarray(x, dtype=float)
    expo = (
        1j * x * (state.running_signal - y)
        + tail.tail_jump(x)
        - 0.5 * x**2 * tail.tail_gaussian
    )
    return np.exp(expo)


# ---------------------------------------------------------------------------
# quadrature machinery
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _gl_rule(order: int):
    return np.polynomial.legendre.leggauss(order)


def _panel_nodes(a: float, b: float, n_panels: int):
    """Composite Gauss-Legendre nodes and weights on [a, b]."""
    gx, gw = _gl_rule(_GL_ORDER)
    edges = np.linspace(a, b, n_panels + 1)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    x = (mid[:, None] + half[:, None] * gx[None, :]).ravel()
    w = (half[:, None] * gw[None, :]).ravel()
    return x, w


def _interval_and_panels(tail: FourierTail, max_freq: float, q: QuadratureSpec):
    if q.mode == "periodic":
        if tail.mode != PURE_LATTICE:
            raise ValueError("periodic quadrature is only valid in pure-lattice models")
        a, b = -math.pi, math.pi
    else:
        v = tail.tail_gaussian
        if v <= 0.0:
            raise ValueError(
                "gaussian-decay quadrature needs positive remaining Gaussian variance"
            )
        x_max = math.sqrt(2.0 * math.log(1.0 / q.envelope_floor) / v)
        a, b = -x_max, x_max
    # GL16 resolves ~12 radians of phase per panel at full accuracy
    omega = max_freq + tail.oscillation_scale
    p0 = max(4, int(math.ceil((b - a) * (omega + 1.0) / 10.0)))
    return a, b, p0


def _oscillatory_integrals(tail, r_coeffs, factors, q: QuadratureSpec):
    """Integrate (1/2pi) exp(i r x) * det(x) * g(x) dx for each r and factor g.

    ``det`` is the path-independent part of F; ``r_coeffs`` are the per-path
    phase coefficients (running signal minus y).  Returns a complex array of
    shape (len(factors), len(r_coeffs)), the final error estimate, and the
    total node count.  Factors are callables x -> array or None for g = 1.
    """
    r = np.atleast_1d(np.asarray(r_coeffs, dtype=float))
    a, b, panels = _interval_and_panels(tail, float(np.max(np.abs(r))), q)
    prev = None
    err = math.inf
    n_nodes_total = 0
    while True:
        x, w = _panel_nodes(a, b, panels)
        n_nodes_total += len(x)
        if n_nodes_total > q.max_nodes:
            raise QuadratureDidNotConverge(
                f"no convergence within {q.max_nodes} nodes (last error estimate {err})"
            )
        det = np.exp(tail.tail_jump(x) - 0.5 * x**2 * tail.tail_gaussian)
        phase = np.exp(1j * np.multiply.outer(r, x))
        cur = np.empty((len(factors), len(r)), dtype=complex)
        for i, g in enumerate(factors):
            wf = w * det if g is None else w * det * g(x)
            cur[i] = phase @ wf
        cur /= 2.0 * math.pi
        if prev is not None:
            err = float(np.max(np.abs(cur - prev)))
            if err <= q.abs_tol:
                return cur, err, n_nodes_total
        prev = cur
        panels *= 2


def _check_lattice(tail: FourierTail, running: float, y: float):
    mu = running - y - tail.linear_jump_coefficient
    if abs(mu - round(mu)) > _LATTICE_ATOL:
        raise OffLattice(
            f"y={y} is not on the signal lattice at t={tail.t} (offset {mu})"
        )


@dataclass(frozen=True)
class KernelValues:
    """All conditional kernel integrals at one (path, t, y), sharing F nodes."""

    delta: float
    malliavin_b: float
    malliavin_n: np.ndarray
    imag_delta: float
    imag_b: float
    imag_n: np.ndarray
    err_estimate: float
    n_nodes: int


def kernel_values(
    state: FourierState,
    y: float,
    q: QuadratureSpec,
    marks: tuple = (),
    want_b: bool = True,
) -> KernelValues:
    """Evaluate the density and requested Malliavin integrals on shared nodes.

    ``marks`` lists the mark indices whose jump derivative is wanted.  F is
    evaluated once per node; the integrands differ only by multiplicative
    factors folded into the quadrature weights.
    """
    tail = state.tail
    if q.mode == "periodic":
        _check_lattice(tail, state.running_signal, y)

    factors = [None]
    sigma_t = tail.sigma_y_t
    b_slot = None
    if want_b and sigma_t != 0.0:
        b_slot = len(factors)
        factors.append(lambda x: 1j * x * sigma_t)
    n_slots = {}
    for j in marks:
        th = float(tail.theta_t[j])
        if th != 0.0:
            n_slots[j] = len(factors)
            factors.append(lambda x, th=th: np.exp(1j * x * th) - 1.0)

    vals, err, n_nodes = _oscillatory_integrals(
        tail, state.running_signal - y, factors, q
    )
    vals = vals[:, 0]
    mall_n = np.zeros(len(marks))
    imag_n = np.zeros(len(marks))
    for pos, j in enumerate(marks):
        if j in n_slots:
            mall_n[pos] = vals[n_slots[j]].real
            imag_n[pos] = vals[n_slots[j]].imag
    return KernelValues(
        delta=float(vals[0].real),
        malliavin_b=float(vals[b_slot].real) if b_slot is not None else 0.0,
        malliavin_n=mall_n,
        imag_delta=float(vals[0].imag),
        imag_b=float(vals[b_slot].imag) if b_slot is not None else 0.0,
        imag_n=imag_n,
        err_estimate=err,
        n_nodes=n_nodes,
    )


def cond_delta(state: FourierState, y: float, q: QuadratureSpec) -> float:
    """Conditional density (gaussian-dominant) or mass (pure-lattice) of Y at y."""
    return kernel_values(state, y, q, want_b=False).delta


def cond_malliavin_B(state: FourierState, y: float, q: QuadratureSpec) -> float:
    """Conditional Brownian Malliavin derivative of the delta functional at y."""
    return kernel_values(state, y, q, want_b=True).malliavin_b


def cond_malliavin_N(state: FourierState, j: int, y: float, q: QuadratureSpec) -> float:
    """Conditional jump Malliavin derivative for mark j at y."""
    return float(kernel_values(state, y, q, marks=(j,), want_b=False).malliavin_n[0])


def delta_batch(
    tail: FourierTail, runnings: np.ndarray, y: float, q: QuadratureSpec
) -> np.ndarray:
    """cond_delta at fixed (t, y) across many paths on one shared x-grid.

    ``runnings`` holds the realized Y(t) per path; convergence is checked on
    the worst path.
    """
    runnings = np.asarray(runnings, dtype=float)
    if q.mode == "periodic":
        mu = runnings - y - tail.linear_jump_coefficient
        if np.any(np.abs(mu - np.round(mu)) > _LATTICE_ATOL):
            raise OffLattice(f"y={y} off lattice for some path at t={tail.t}")
    vals, _, _ = _oscillatory_integrals(tail, runnings - y, [None], q)
    return vals[0].real


def delta_ygrid(state: FourierState, ys: np.ndarray, q: QuadratureSpec) -> np.ndarray:
    """cond_delta of one state on a grid of y values, sharing F nodes."""
    ys = np.asarray(ys, dtype=float)
    if q.mode == "periodic":
        for y in ys:
            _check_lattice(state.tail, state.running_signal, y)
    vals, _, _ = _oscillatory_integrals(state.tail, state.running_signal - ys, [None], q)
    return vals[0].real
