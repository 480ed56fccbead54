"""Path simulation and exact log-space wealth evolution.

Paths are generated with a counter-based Philox generator keyed by
(seed, path_id), so path i is a deterministic function of (seed, i) alone:
the same path comes out bit-identically regardless of chunking, worker
count or generation order.  Per path the draw order is fixed: the n_steps
Gaussian increments first, then the Poisson cell counts mark by mark.

Wealth under a control u is evolved exactly in log space,

    ln X(T) = sum_cells [ u b dt - u^2 sigma^2 dt / 2 + u sigma dB ]
            + sum_cells sum_j [ count * ln(1 + u gamma_j) - u gamma_j lam_j dt ],

which is the closed-form strong solution of the controlled jump diffusion
restricted to cell-constant coefficients; there is no Euler bias and
positivity of X never has to be clamped.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .model import MarketSpec, ValidatedModel

__all__ = [
    "SamplePath",
    "Ensemble",
    "ControlPolicy",
    "simulate",
    "log_wealth",
    "log_wealth_ensemble",
    "InadmissibleControl",
    "DEFAULT_EPS_ADM",
]

DEFAULT_EPS_ADM = 1e-9


class InadmissibleControl(ValueError):
    """A control puts 1 + u*gamma below the admissibility floor somewhere."""


@dataclass(frozen=True)
class SamplePath:
    """One realized trajectory on the grid.

    ``brownian`` and ``running_signal`` are node-indexed (length n_steps+1),
    ``jump_counts`` and ``compensated_jump`` are cell-indexed with one column
    per mark.
    """

    path_id: int
    brownian: np.ndarray
    jump_counts: np.ndarray
    compensated_jump: np.ndarray
    running_signal: np.ndarray
    signal: float


@dataclass(frozen=True)
class ControlPolicy:
    """Control specification; honest/insider kinds carry a materialized table.

    ``table`` holds per-cell controls: shape (k_T,) for deterministic
    policies or (n_paths, k_T) for path-dependent ones, aligned with the
    ensemble's path order.
    """

    kind: str  # zero | constant | honest-optimal | insider-optimal | table
    u0: float = 0.0
    table: np.ndarray | None = None
    eps_adm: float = DEFAULT_EPS_ADM

    def controls(self, n_paths: int, k_T: int) -> np.ndarray:
        """Materialize an (n_paths, k_T) control array."""
        if self.kind == "zero":
            return np.zeros((n_paths, k_T))
        if self.kind == "constant":
            return np.full((n_paths, k_T), self.u0)
        if self.table is None:
            raise ValueError(f"policy kind {self.kind!r} carries no control table")
        tab = np.asarray(self.table)  # dtype preserved: may be extended precision
        if tab.ndim == 1:
            if tab.shape[0] != k_T:
                raise ValueError(f"control table covers {tab.shape[0]} cells, need {k_T}")
            return np.broadcast_to(tab, (n_paths, k_T))
        if tab.shape != (n_paths, k_T):
            raise ValueError(f"control table shape {tab.shape} != ({n_paths}, {k_T})")
        return tab


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Struct-of-arrays path collection; rows align with ``path_ids``."""

    model: ValidatedModel
    seed: int
    path_ids: np.ndarray       # (n,)
    d_brownian: np.ndarray     # (n, n_steps) exact Gaussian increments
    jump_counts: np.ndarray    # (n, n_steps, m) Poisson cell counts

    @property
    def n_paths(self) -> int:
        return len(self.path_ids)

    @cached_property
    def brownian(self) -> np.ndarray:
        """(n, n_steps+1) node values of B with B(0) = 0."""
        n = self.n_paths
        out = np.zeros((n, self.model.n_steps + 1))
        np.cumsum(self.d_brownian, axis=1, out=out[:, 1:])
        return out

    @cached_property
    def compensated_jump(self) -> np.ndarray:
        """(n, n_steps, m) compensated count increments per cell."""
        lam_dt = self.model.levy.intensities * self.model.dt
        return self.jump_counts - lam_dt[None, None, :]

    @cached_property
    def signal_increments(self) -> np.ndarray:
        """(n, n_steps) per-cell increments of Y."""
        m = self.model
        inc = self.d_brownian * m.sigma_y_values[None, :]
        if m.n_marks:
            inc = inc + np.einsum("jc,ncj->nc", m.theta_values, self.compensated_jump)
        return inc

    @cached_property
    def running_signal(self) -> np.ndarray:
        """(n, n_steps+1) node values of Y(t)."""
        out = np.zeros((self.n_paths, self.model.n_steps + 1))
        np.cumsum(self.signal_increments, axis=1, out=out[:, 1:])
        return out

    @cached_property
    def signal(self) -> np.ndarray:
        """(n,) terminal signal values Y = Y(T0)."""
        return self.running_signal[:, -1]

    @cached_property
    def ntilde(self) -> np.ndarray:
        """(n, n_steps+1, m) node values of the compensated counting processes."""
        n, m = self.n_paths, self.model.n_marks
        out = np.zeros((n, self.model.n_steps + 1, m))
        np.cumsum(self.compensated_jump, axis=1, out=out[:, 1:, :])
        return out

    def path(self, i: int) -> SamplePath:
        """Materialize path i as a SamplePath view."""
        return SamplePath(
            path_id=int(self.path_ids[i]),
            brownian=self.brownian[i],
            jump_counts=self.jump_counts[i],
            compensated_jump=self.compensated_jump[i],
            running_signal=self.running_signal[i],
            signal=float(self.signal[i]),
        )

    def paths(self):
        for i in range(self.n_paths):
            yield self.path(i)

    def with_flipped_gaussians(self) -> "Ensemble":
        """Same jump draws, negated Gaussian increments (antithetic partner)."""
        return replace(self, d_brownian=-self.d_brownian)

    def slice(self, lo: int, hi: int) -> "Ensemble":
        """Sub-ensemble of path rows [lo, hi); content is row-identical."""
        return replace(
            self,
            path_ids=self.path_ids[lo:hi],
            d_brownian=self.d_brownian[lo:hi],
            jump_counts=self.jump_counts[lo:hi],
        )


def _generate_one(seed: int, path_id: int, n_steps: int, sqrt_dt: float, lam_dt: np.ndarray):
    key = np.array([seed, path_id], dtype=np.uint64)
    g = np.random.Generator(np.random.Philox(key=key))
    dB = g.standard_normal(n_steps) * sqrt_dt
    counts = np.empty((n_steps, len(lam_dt)), dtype=np.int64)
    for j, mu in enumerate(lam_dt):
        counts[:, j] = g.poisson(mu, n_steps)
    return dB, counts


def simulate(
    model: ValidatedModel, n_paths: int, seed: int, path_id_start: int = 0
) -> Ensemble:
    """Draw an ensemble of paths: exact N(0, dt) increments for B and
    Poisson(lam_j dt) counts per cell and mark.

    ``path_id_start`` lets callers generate disjoint chunks of the same
    logical ensemble; chunk boundaries never change any path's content.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if not 0 <= seed < 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    n_steps, m = model.n_steps, model.n_marks
    sqrt_dt = np.sqrt(model.dt)
    lam_dt = model.levy.intensities * model.dt
    d_brownian = np.empty((n_paths, n_steps))
    jump_counts = np.zeros((n_paths, n_steps, m), dtype=np.int64)
    ids = np.arange(path_id_start, path_id_start + n_paths, dtype=np.int64)
    for i, pid in enumerate(ids):
        dB, counts = _generate_one(seed, int(pid), n_steps, sqrt_dt, lam_dt)
        d_brownian[i] = dB
        jump_counts[i] = counts
    return Ensemble(
        model=model, seed=seed, path_ids=ids, d_brownian=d_brownian, jump_counts=jump_counts
    )


def _check_admissible(u: np.ndarray, gamma: np.ndarray, eps_adm: float):
    """u: (n, kT); gamma: (m, kT).  Requires 1 + u*gamma >= eps_adm everywhere."""
    worst = np.inf
    for j in range(gamma.shape[0]):
        worst = min(worst, float((1.0 + u * gamma[j][None, :]).min()))
    if worst < eps_adm:
        raise InadmissibleControl(
            f"1 + u*gamma reaches {worst:.3e}, below the floor {eps_adm}"
        )


def log_wealth_ensemble(
    ensemble: Ensemble, policy: ControlPolicy, market: MarketSpec
) -> np.ndarray:
    """ln X(T) for every path under the policy; exact log-space recursion."""
    model = ensemble.model
    k_T = model.grid.node_index(market.horizon)
    u = policy.controls(ensemble.n_paths, k_T)
    dt = model.dt
    b = market.b.values[:k_T]
    sig = market.sigma.values[:k_T]
    gam = model.gamma_values[:, :k_T]
    lam = model.levy.intensities

    _check_admissible(u, gam, policy.eps_adm)

    out = np.einsum(
        "nc,c->n", u, b * dt
    ) - 0.5 * np.einsum("nc,c->n", u**2, sig**2 * dt)
    out += np.einsum("nc,nc->n", u, ensemble.d_brownian[:, :k_T] * sig[None, :])
    for j in range(model.n_marks):
        g = gam[j]
        out += np.einsum(
            "nc,nc->n", ensemble.jump_counts[:, :k_T, j], np.log1p(u * g[None, :])
        )
        out -= lam[j] * dt * np.einsum("nc,c->n", u, g)
    return out


def log_wealth(path: SamplePath, policy: ControlPolicy, market: MarketSpec,
               model: ValidatedModel, path_row: int = 0) -> float:
    """ln X(T) on a single path.

    ``path_row`` selects the row of a per-path control table when the policy
    carries one (rows follow ensemble order).
    """
    k_T = model.grid.node_index(market.horizon)
    if policy.kind == "zero":
        u = np.zeros(k_T)
    elif policy.kind == "constant":
        u = np.full(k_T, policy.u0)
    else:
        tab = np.asarray(policy.table)
        u = tab if tab.ndim == 1 else tab[path_row]
        if u.shape != (k_T,):
            raise ValueError(f"control row covers {u.shape} cells, need ({k_T},)")
    dt = model.dt
    b = market.b.values[:k_T]
    sig = market.sigma.values[:k_T]
    gam = model.gamma_values[:, :k_T]
    lam = model.levy.intensities

    _check_admissible(u[None, :], gam, policy.eps_adm)

    dB = np.diff(path.brownian[: k_T + 1])
    total = float(np.sum(u * b * dt - 0.5 * u**2 * sig**2 * dt + u * sig * dB))
    for j in range(model.n_marks):
        total += float(np.sum(path.jump_counts[:k_T, j] * np.log1p(u * gam[j])))
        total -= float(lam[j] * dt * np.sum(u * gam[j]))
    return total
