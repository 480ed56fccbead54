"""Information drift and jump-compensator correction under enlargement.

The enlarged-filtration decomposition replaces B by B_hat + int phi ds and
the compensated jump measure by a martingale plus psi_j * lam_j ds, where

    phi(t)   = E[D_t delta_Y(y) | F_t]_{y=Y} / E[delta_Y(y) | F_t]_{y=Y},
    psi_j(t) = E[D_{t,j} delta_Y(y) | F_t]_{y=Y} / E[delta_Y(y) | F_t]_{y=Y}.

Both ratios are evaluated from the Fourier kernel; for the three special
model shapes there are exact alternatives used both as test oracles and as
the fast path for ensemble-scale work:

* Brownian-only signal: phi(t) = (Y - Y(t)) beta(t) / ||beta||^2_{[t,T0]};
* single unit mark, theta == 1, sigma_y == 0:
  psi(t) = (Y - Ntilde(t)) / (lam (T0 - t));
* single unit mark, theta == 1, sigma_y == const != 0:
  psi(t) = (Y - theta B(t) - Ntilde(t)) / (lam (T0 - t)) - (theta^2/lam) phi(t),
  with phi(t) = -theta f'(w)/f(w) for the Poisson-Gaussian mixture density f
  of the remaining signal evaluated at w = Y - Y(t).

The drift is evaluated at cell left endpoints and held constant over the
cell (the predictable version).  When the conditional density at the path's
own terminal value falls below 1e-12 times its t=0 value, the path is
aborted with a diagnostic rather than silently clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import gammaln

from .kernel import (
    FourierState,
    QuadratureSpec,
    build_tail,
    cond_delta,
    fourier_state,
    kernel_values,
)
from .model import ValidatedModel
from .paths import Ensemble, SamplePath

__all__ = [
    "DriftField",
    "phi",
    "psi",
    "closed_form_phi_brownian",
    "closed_form_psi_poisson",
    "compute_drift_field",
    "mixture_density",
    "WrongModel",
    "DenominatorUnderflow",
    "DENOM_RELATIVE_FLOOR",
]

#: abort a path when cond_delta(t, Y) drops below this fraction of its t=0 value
DENOM_RELATIVE_FLOOR = 1e-12


class WrongModel(ValueError):
    """A closed-form oracle was asked about a model shape it does not cover."""


class DenominatorUnderflow(RuntimeError):
    """The conditional density at the path's own signal value is numerically zero."""


# ---------------------------------------------------------------------------
# single-state quadrature ratios
# ---------------------------------------------------------------------------


def _quadrature_zero_level(tail) -> float:
    """Density values below this are indistinguishable from quadrature roundoff.

    The kernel's density scale is bounded by (2 pi v)^{-1/2} in
    gaussian-dominant mode and by 1 on the lattice; accumulated roundoff of
    the oscillatory sums sits ~1e-13 of that scale below genuine values.
    """
    if tail.tail_gaussian > 0.0:
        return 1e-12 / math.sqrt(2.0 * math.pi * tail.tail_gaussian)
    return 1e-12


def _guard_denominator(delta_t: float, delta_0: float, t: float, path_id,
                       zero_t: float = 0.0, zero_0: float = 0.0) -> None:
    # a baseline at or below the noise level means even the unconditional
    # density at the path's own terminal value is numerically zero
    floor = max(DENOM_RELATIVE_FLOOR * delta_0, zero_t)
    if delta_0 <= zero_0 or not (delta_t > floor):
        raise DenominatorUnderflow(
            f"cond_delta at t={t} on path {path_id} is {delta_t:.3e}, below "
            f"{floor:.3e} (t=0 value {delta_0:.3e})"
        )


def _delta_at_zero(model: ValidatedModel, y: float, q: QuadratureSpec) -> float:
    state0 = FourierState(
        tail=build_tail(model, 0.0), running_jump_phase=0.0, running_brownian_integral=0.0
    )
    return cond_delta(state0, y, q)


def _guard_state(model, state, delta_t, y, q, t, path_id):
    delta_0 = _delta_at_zero(model, y, q)
    _guard_denominator(
        delta_t, delta_0, t, path_id,
        zero_t=_quadrature_zero_level(state.tail),
        zero_0=_quadrature_zero_level(build_tail(model, 0.0)),
    )


def phi(model: ValidatedModel, path: SamplePath, t: float,
        q: QuadratureSpec | None = None) -> float:
    """Information drift at (path, t) by the ratio of Fourier integrals."""
    q = q or QuadratureSpec.for_model(model)
    state = fourier_state(model, path, t)
    kv = kernel_values(state, path.signal, q, want_b=True)
    _guard_state(model, state, kv.delta, path.signal, q, t, path.path_id)
    return kv.malliavin_b / kv.delta


def psi(model: ValidatedModel, path: SamplePath, t: float, j: int,
        q: QuadratureSpec | None = None) -> float:
    """Jump-compensator correction for mark j at (path, t)."""
    q = q or QuadratureSpec.for_model(model)
    state = fourier_state(model, path, t)
    kv = kernel_values(state, path.signal, q, marks=(j,), want_b=False)
    _guard_state(model, state, kv.delta, path.signal, q, t, path.path_id)
    return float(kv.malliavin_n[0]) / kv.delta


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------


def closed_form_phi_brownian(model: ValidatedModel, path: SamplePath, t: float) -> float:
    """(Y - Y(t)) beta(t) / ||beta||^2_{[t,T0]} for a Brownian-only signal."""
    if model.n_marks != 0:
        raise WrongModel("closed-form Brownian drift needs a markless model")
    k = model.grid.node_index(t)
    norm = float(model.tail_gaussian_at_node[k])
    beta_t = float(model.sigma_y_values[k])
    return (path.signal - float(path.running_signal[k])) * beta_t / norm


def _require_unit_mark(model: ValidatedModel) -> float:
    """Validate the single-mark, theta == 1, constant-sigma_y shape; return sigma_y."""
    if model.n_marks != 1 or model.levy.sizes[0] != 1.0:
        raise WrongModel("closed-form jump drift needs a single mark of size 1")
    if not np.all(model.theta_values[0] == 1.0):
        raise WrongModel("closed-form jump drift needs theta identically 1")
    sig = model.sigma_y_values
    if not np.all(sig == sig[0]):
        raise WrongModel("closed-form jump drift needs constant sigma_y")
    return float(sig[0])


def closed_form_psi_poisson(
    model: ValidatedModel,
    path: SamplePath,
    t: float,
    theta: float,
    lam: float,
    phi_value: float = 0.0,
) -> float:
    """(Y - theta B(t) - Ntilde(t)) / (lam (T0 - t)) - (theta^2/lam) phi_value.

    ``phi_value`` is the x-moment ratio of the Fourier kernel, i.e. the
    information drift divided by theta (equivalently -f'(w)/f(w) for the
    remaining-signal density f at w = Y - theta B(t) - Ntilde(t)).  With
    theta = 0 this reduces to the pure-Poisson formula and phi_value is
    ignored.
    """
    _require_unit_mark(model)
    k = model.grid.node_index(t)
    tau = model.t0 - k * model.dt
    ntilde_t = float(np.sum(path.jump_counts[:k, 0])) - lam * (k * model.dt)
    base = (path.signal - theta * float(path.brownian[k]) - ntilde_t) / (lam * tau)
    if theta == 0.0:
        return base
    return base - (theta**2 / lam) * phi_value


# ---------------------------------------------------------------------------
# Poisson-Gaussian mixture series (remaining-signal density for the mixed model)
# ---------------------------------------------------------------------------


def _poisson_weights(lam_tau: float) -> np.ndarray:
    """Poisson(lam_tau) pmf for k = 0..K with tail mass below ~1e-18."""
    k = max(int(lam_tau), 1)
    p = math.exp(k * math.log(lam_tau) - lam_tau - gammaln(k + 1))
    while p > 1e-19 or k < lam_tau + 2.0:
        k += 1
        p *= lam_tau / k
    ks = np.arange(k + 1)
    return np.exp(ks * math.log(lam_tau) - lam_tau - gammaln(ks + 1))


def mixture_density(w, lam_tau: float, gauss_var: float):
    """Density f and derivative f' of theta*DeltaB + DeltaNtilde at w.

    The remaining signal is a Poisson(lam_tau) count shifted by -lam_tau and
    convolved with a centered Gaussian of variance ``gauss_var``.
    """
    w = np.atleast_1d(np.asarray(w, dtype=float))
    pk = _poisson_weights(lam_tau)
    means = np.arange(len(pk)) - lam_tau
    z = (w[:, None] - means[None, :]) / math.sqrt(gauss_var)
    comp = np.exp(-0.5 * z**2) / math.sqrt(2.0 * math.pi * gauss_var)
    f = comp @ pk
    fp = (comp * (-z / math.sqrt(gauss_var))) @ pk
    return f, fp


def _poisson_pmf(mu: np.ndarray, lam_tau: float) -> np.ndarray:
    """Poisson(lam_tau) pmf at integer points mu (0 for negative mu)."""
    mu = np.asarray(mu)
    out = np.zeros(mu.shape, dtype=float)
    ok = mu >= 0
    mv = mu[ok].astype(float)
    out[ok] = np.exp(mv * math.log(lam_tau) - lam_tau - gammaln(mv + 1.0))
    return out


# ---------------------------------------------------------------------------
# ensemble drift field
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DriftField:
    """Per-path, per-cell drift values up to the market horizon.

    ``phi`` has shape (n, kT); ``psi`` has shape (n, kT, m).  ``denom`` is
    the conditional density/mass at the path's own terminal value and
    ``imag_residual`` the worst imaginary leakage of the underlying
    integrals (zero when a closed form was used).
    """

    model: ValidatedModel
    t: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    denom: np.ndarray
    imag_residual: np.ndarray
    method: str

    @property
    def alpha1(self) -> np.ndarray:
        return self.phi

    @cached_property
    def alpha2_weight(self) -> np.ndarray:
        """psi_j * lam_j: the density of the jump drift against mark counting."""
        return self.psi * self.model.levy.intensities[None, None, :]

    @cached_property
    def compensator(self) -> np.ndarray:
        """lam_j (1 + psi_j): the enlarged-filtration jump intensity."""
        return self.model.levy.intensities[None, None, :] * (1.0 + self.psi)


def _closed_form_supported(model: ValidatedModel) -> bool:
    if model.n_marks == 0:
        return True
    try:
        _require_unit_mark(model)
        return True
    except WrongModel:
        return False


def _drift_brownian(model: ValidatedModel, ens: Ensemble, k_T: int):
    v = model.tail_gaussian_at_node[:k_T]
    beta = model.sigma_y_values[:k_T]
    gap = ens.signal[:, None] - ens.running_signal[:, :k_T]
    phi_arr = gap * beta[None, :] / v[None, :]
    denom = np.exp(-0.5 * gap**2 / v[None, :]) / np.sqrt(2.0 * math.pi * v[None, :])
    return phi_arr, np.zeros((ens.n_paths, k_T, 0)), denom


def _drift_unit_mark(model: ValidatedModel, ens: Ensemble, k_T: int):
    theta = float(model.sigma_y_values[0])
    lam = float(model.levy.intensities[0])
    dt, t0 = model.dt, model.t0
    n = ens.n_paths
    w = ens.signal[:, None] - ens.running_signal[:, :k_T]
    tau = t0 - np.arange(k_T) * dt
    phi_arr = np.zeros((n, k_T))
    denom = np.empty((n, k_T))
    if theta == 0.0:
        psi_arr = w / (lam * tau)[None, :]
        for c in range(k_T):
            mu = np.rint(w[:, c] + lam * tau[c]).astype(np.int64)
            denom[:, c] = _poisson_pmf(mu, lam * tau[c])
    else:
        psi_arr = np.empty((n, k_T))
        for c in range(k_T):
            f, fp = mixture_density(w[:, c], lam * tau[c], theta**2 * tau[c])
            denom[:, c] = f
            ratio = -fp / f  # x-moment ratio of the kernel; phi = theta * ratio
            phi_arr[:, c] = theta * ratio
            psi_arr[:, c] = w[:, c] / (lam * tau[c]) - (theta**2 / lam) * ratio
    return phi_arr, psi_arr[:, :, None], denom


def _drift_quadrature(model: ValidatedModel, ens: Ensemble, k_T: int, q: QuadratureSpec):
    n, m = ens.n_paths, model.n_marks
    marks = tuple(range(m))
    tails = [build_tail(model, k * model.dt) for k in range(k_T)]
    sig_dB = ens.d_brownian * model.sigma_y_values[None, :]
    run_brown = np.zeros((n, k_T))
    np.cumsum(sig_dB[:, : k_T - 1], axis=1, out=run_brown[:, 1:])
    run_jump = ens.running_signal[:, :k_T] - run_brown

    phi_arr = np.zeros((n, k_T))
    psi_arr = np.zeros((n, k_T, m))
    denom = np.empty((n, k_T))
    resid = np.zeros((n, k_T))
    want_b = not np.all(model.sigma_y_values == 0.0)
    for i in range(n):
        y = float(ens.signal[i])
        for c in range(k_T):
            state = FourierState(
                tail=tails[c],
                running_jump_phase=float(run_jump[i, c]),
                running_brownian_integral=float(run_brown[i, c]),
            )
            kv = kernel_values(state, y, q, marks=marks, want_b=want_b)
            denom[i, c] = kv.delta
            phi_arr[i, c] = kv.malliavin_b / kv.delta if want_b else 0.0
            psi_arr[i, c] = kv.malliavin_n / kv.delta
            resid[i, c] = max(abs(kv.imag_delta), abs(kv.imag_b),
                              float(np.max(np.abs(kv.imag_n), initial=0.0)))
    return phi_arr, psi_arr, denom, resid


def _denominator_floor_check(model, ens, denom, method: str, q: QuadratureSpec):
    """Relative underflow guard against each path's own t=0 density."""
    zero_0 = 0.0
    zero_t = np.zeros(denom.shape[1])
    if method == "quadrature":
        denom0 = np.array(
            [_delta_at_zero(model, float(y), q) for y in ens.signal]
        )
        zero_0 = _quadrature_zero_level(build_tail(model, 0.0))
        zero_t = np.array(
            [_quadrature_zero_level(build_tail(model, k * model.dt))
             for k in range(denom.shape[1])]
        )
    elif model.n_marks == 0:
        v0 = float(model.tail_gaussian_at_node[0])
        denom0 = np.exp(-0.5 * ens.signal**2 / v0) / math.sqrt(2.0 * math.pi * v0)
    else:
        theta = float(model.sigma_y_values[0])
        lam = float(model.levy.intensities[0])
        if theta == 0.0:
            mu = np.rint(ens.signal + lam * model.t0).astype(np.int64)
            denom0 = _poisson_pmf(mu, lam * model.t0)
        else:
            denom0, _ = mixture_density(ens.signal, lam * model.t0, theta**2 * model.t0)
    floor = np.maximum(DENOM_RELATIVE_FLOOR * denom0[:, None], zero_t[None, :])
    bad = np.nonzero((denom0 <= zero_0) | np.any(~(denom > floor), axis=1))[0]
    if len(bad):
        i = int(bad[0])
        raise DenominatorUnderflow(
            f"{len(bad)} path(s) underflowed the conditional density floor; "
            f"first: path {int(ens.path_ids[i])} with min cond_delta "
            f"{float(np.min(denom[i])):.3e} vs t=0 value {float(denom0[i]):.3e}"
        )


def compute_drift_field(
    model: ValidatedModel,
    ensemble: Ensemble,
    q: QuadratureSpec | None = None,
    method: str = "auto",
) -> DriftField:
    """Evaluate phi and psi at every cell left endpoint up to the horizon.

    ``method`` is one of ``auto`` (closed form when the model shape has one,
    quadrature otherwise), ``closed-form`` or ``quadrature``.
    """
    q = q or QuadratureSpec.for_model(model)
    k_T = model.horizon_index
    if method == "auto":
        method = "closed-form" if _closed_form_supported(model) else "quadrature"
    if method == "closed-form":
        if model.n_marks == 0:
            phi_arr, psi_arr, denom = _drift_brownian(model, ensemble, k_T)
        else:
            _require_unit_mark(model)
            phi_arr, psi_arr, denom = _drift_unit_mark(model, ensemble, k_T)
        resid = np.zeros_like(phi_arr)
    elif method == "quadrature":
        phi_arr, psi_arr, denom, resid = _drift_quadrature(model, ensemble, k_T, q)
    else:
        raise ValueError(f"unknown drift method {method!r}")

    _denominator_floor_check(model, ensemble, denom, method, q)
    return DriftField(
        model=model,
        t=model.grid.nodes[:k_T].copy(),
        phi=phi_arr,
        psi=psi_arr,
        denom=denom,
        imag_residual=resid,
        method=method,
    )
