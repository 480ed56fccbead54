"""Pointwise first-order condition for the optimal log-utility control.

Maximizing the expected log-wealth rate cell by cell gives the scalar
equation, for each path and cell,

    residual(u) = b - u sigma^2 + sigma phi
                  + sum_j lam_j (gamma_j psi_j - u gamma_j^2) / (1 + u gamma_j) = 0,

whose residual is strictly decreasing in u on the admissible set
{u : 1 + u gamma_j >= eps_adm for all j} whenever the enlarged-filtration
jump intensities lam_j (1 + psi_j) are nonnegative.  The honest benchmark is
the same equation with phi = psi = 0.

The solver is a safeguarded Newton iteration on a sign-changing bracket with
bisection fallback; roots satisfy |residual| <= 1e-12.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .drift import DriftField
from .model import DiscreteLevyMeasure, MarketSpec, ValidatedModel
from .paths import ControlPolicy, Ensemble, log_wealth_ensemble

__all__ = [
    "FocProblem",
    "ValueEstimate",
    "foc_residual",
    "foc_residual_derivative",
    "admissible_interval",
    "solve_optimal_control",
    "honest_benchmark",
    "build_insider_policy",
    "residual_table",
    "expected_log_wealth",
    "InadmissiblePoint",
    "NoAdmissibleRoot",
]

#: plug-back requirement on the solved first-order condition
RESIDUAL_TOL = 1e-12
_SOLVE_TOL = 5e-13


class InadmissiblePoint(ValueError):
    """The control violates 1 + u*gamma >= eps_adm at this cell."""


class NoAdmissibleRoot(RuntimeError):
    """The first-order condition has no sign change on the admissible interval."""


@dataclass(frozen=True)
class FocProblem:
    """Cell-local data of the first-order condition."""

    b: float
    sigma: float
    gammas: np.ndarray
    lams: np.ndarray
    psis: np.ndarray
    phi: float
    eps_adm: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "gammas", np.asarray(self.gammas, dtype=float))
        object.__setattr__(self, "lams", np.asarray(self.lams, dtype=float))
        object.__setattr__(self, "psis", np.asarray(self.psis, dtype=float))


@dataclass(frozen=True)
class ValueEstimate:
    """Monte Carlo estimate of E[ln X(T)] under one policy."""

    mean: float
    stderr: float
    n_paths: int
    estimator: str  # "pathwise" | "drift-formula"


def admissible_interval(prob: FocProblem) -> tuple[float, float]:
    """Closed interval of u with 1 + u gamma_j >= eps_adm for every mark."""
    lo, hi = -math.inf, math.inf
    for g in prob.gammas:
        if g > 0.0:
            lo = max(lo, (prob.eps_adm - 1.0) / g)
        elif g < 0.0:
            hi = min(hi, (prob.eps_adm - 1.0) / g)
    return lo, hi


def foc_residual(u: float, prob: FocProblem) -> float:
    """Value of the first-order condition at u (must be admissible)."""
    lo, hi = admissible_interval(prob)
    if not lo <= u <= hi:
        raise InadmissiblePoint(f"u={u} outside admissible interval [{lo}, {hi}]")
    res = prob.b - u * prob.sigma**2 + prob.sigma * prob.phi
    for g, lam, ps in zip(prob.gammas, prob.lams, prob.psis):
        res += lam * (g * ps - u * g**2) / (1.0 + u * g)
    return float(res)


def foc_residual_derivative(u: float, prob: FocProblem) -> float:
    d = -prob.sigma**2
    for g, lam, ps in zip(prob.gammas, prob.lams, prob.psis):
        d -= lam * g**2 * (1.0 + ps) / (1.0 + u * g) ** 2
    return float(d)


def _bracket(prob: FocProblem) -> tuple[float, float, float, float]:
    """Find a <= b with residual(a) >= 0 >= residual(b)."""
    lo, hi = admissible_interval(prob)
    r0 = foc_residual(0.0, prob)
    if r0 == 0.0:
        return 0.0, 0.0, 0.0, 0.0
    if r0 > 0.0:
        a, fa = 0.0, r0
        if math.isfinite(hi):
            fb = foc_residual(hi, prob)
            if fb > 0.0:
                raise NoAdmissibleRoot(
                    f"residual positive on [{a}, {hi}]: f({a})={fa:.3e}, f({hi})={fb:.3e}"
                )
            return a, hi, fa, fb
        b = 1.0
        for _ in range(80):
            fb = foc_residual(b, prob)
            if fb <= 0.0:
                return a, b, fa, fb
            a, fa = b, fb
            b *= 2.0
        raise NoAdmissibleRoot(f"residual still {fb:.3e} > 0 at u={a}")
    b, fb = 0.0, r0
    if math.isfinite(lo):
        fa = foc_residual(lo, prob)
        if fa < 0.0:
            raise NoAdmissibleRoot(
                f"residual negative on [{lo}, {b}]: f({lo})={fa:.3e}, f({b})={fb:.3e}"
            )
        return lo, b, fa, fb
    a = -1.0
    for _ in range(80):
        fa = foc_residual(a, prob)
        if fa >= 0.0:
            return a, b, fa, fb
        b, fb = a, fa
        a *= 2.0
    raise NoAdmissibleRoot(f"residual still {fa:.3e} < 0 at u={b}")


def solve_optimal_control(prob: FocProblem) -> float:
    """Unique admissible root of the first-order condition, |residual| <= 1e-12."""
    a, b, fa, fb = _bracket(prob)
    if a == b:
        return a
    x = 0.5 * (a + b)
    for _ in range(200):
        fx = foc_residual(x, prob)
        if abs(fx) <= _SOLVE_TOL:
            return x
        if fx > 0.0:
            a, fa = x, fx
        else:
            b, fb = x, fx
        d = foc_residual_derivative(x, prob)
        x_new = x - fx / d if d < 0.0 else math.nan
        if not (a < x_new < b):
            x_new = 0.5 * (a + b)
        if x_new == x:  # bracket collapsed to machine resolution
            break
        x = x_new
    # keep the better collapsed endpoint, then retry at extended precision
    for cand, fc in ((a, fa), (b, fb)):
        if abs(fc) < abs(foc_residual(x, prob)):
            x = cand
    fx = foc_residual(x, prob)
    if abs(fx) > RESIDUAL_TOL:
        x_ld, fx = _extended_root(float(x), prob.b, prob.sigma, prob.gammas,
                                  prob.lams, prob.phi, prob.psis, prob.eps_adm)
        x = float(x_ld)
    if abs(fx) > RESIDUAL_TOL:
        raise NoAdmissibleRoot(f"solver stalled at u={x} with residual {fx:.3e}")
    return x


# ---------------------------------------------------------------------------
# vectorized per-cell solves
# ---------------------------------------------------------------------------


def _residual_vec(u, b, sigma, gammas, lams, phis, psis):
    """residual at u for arrays u, phis (n,) and psis (n, m); cell scalars b, sigma."""
    res = b - u * sigma**2 + sigma * phis
    for j in range(len(gammas)):
        g, lam = gammas[j], lams[j]
        res = res + lam * (g * psis[:, j] - u * g**2) / (1.0 + u * g)
    return res


def _residual_deriv_vec(u, sigma, gammas, lams, psis):
    d = np.full_like(u, -sigma**2)
    for j in range(len(gammas)):
        g, lam = gammas[j], lams[j]
        d = d - lam * g**2 * (1.0 + psis[:, j]) / (1.0 + u * g) ** 2
    return d


def _solve_cell_vectorized(b, sigma, gammas, lams, phis, psis, eps_adm):
    """Root of the cell FOC for every path at once; safeguarded Newton."""
    n = len(phis)
    if len(gammas) == 0:
        if sigma == 0.0:
            raise NoAdmissibleRoot("no diffusion and no jumps: the FOC is degenerate")
        return (b + sigma * phis) / sigma**2

    prob0 = FocProblem(b=b, sigma=sigma, gammas=gammas, lams=lams,
                       psis=np.zeros(len(gammas)), phi=0.0, eps_adm=eps_adm)
    lo, hi = admissible_interval(prob0)  # lo < 0 < hi always

    # bracket each root: start at u = 0, expand geometrically toward the
    # side where the (decreasing) residual changes sign
    a_arr = np.zeros(n)
    b_arr = np.zeros(n)
    f0 = _residual_vec(a_arr, b, sigma, gammas, lams, phis, psis)
    found = np.abs(f0) <= _SOLVE_TOL  # root at 0 itself
    right = f0 > 0.0
    cand = np.where(right, 1.0, -1.0)
    for _ in range(80):
        active = ~found
        if not active.any():
            break
        c = np.clip(cand, lo, hi)
        fc = _residual_vec(c, b, sigma, gammas, lams, phis, psis)
        flip = active & np.where(right, fc <= 0.0, fc >= 0.0)
        b_arr = np.where(flip & right, c, b_arr)
        a_arr = np.where(flip & ~right, c, a_arr)
        found = found | flip
        adv = active & ~flip
        a_arr = np.where(adv & right, c, a_arr)
        b_arr = np.where(adv & ~right, c, b_arr)
        stuck = adv & np.where(right, c >= hi, c <= lo)
        if stuck.any():
            i = int(np.nonzero(stuck)[0][0])
            raise NoAdmissibleRoot(
                f"no sign change on admissible interval [{lo}, {hi}]: "
                f"residual({c[i]:.6g}) = {fc[i]:.3e}"
            )
        cand = cand * 2.0
    if not found.all():
        raise NoAdmissibleRoot("bracket expansion exhausted")

    x = 0.5 * (a_arr + b_arr)
    fx = _residual_vec(x, b, sigma, gammas, lams, phis, psis)
    active = np.nonzero(np.abs(fx) > _SOLVE_TOL)[0]
    for _ in range(140):
        if len(active) == 0:
            break
        xa, fa_ = x[active], fx[active]
        pos = fa_ > 0.0
        a_arr[active] = np.where(pos, xa, a_arr[active])
        b_arr[active] = np.where(pos, b_arr[active], xa)
        d = _residual_deriv_vec(xa, sigma, gammas, lams, psis[active])
        with np.errstate(divide="ignore", invalid="ignore"):
            x_new = xa - fa_ / d
        aa, ba = a_arr[active], b_arr[active]
        bad = ~np.isfinite(x_new) | (x_new <= aa) | (x_new >= ba)
        x_new = np.where(bad, 0.5 * (aa + ba), x_new)
        stalled = x_new == xa
        x[active] = x_new
        fx[active] = _residual_vec(x_new, b, sigma, gammas, lams,
                                   phis[active], psis[active])
        keep = (np.abs(fx[active]) > _SOLVE_TOL) & ~stalled
        active = active[keep]
    # collapsed brackets: keep the better endpoint per element
    rough = np.nonzero(np.abs(fx) > _SOLVE_TOL)[0]
    if len(rough):
        for cand_full in (a_arr, b_arr):
            cand = cand_full[rough]
            fc = _residual_vec(cand, b, sigma, gammas, lams, phis[rough], psis[rough])
            better = np.abs(fc) < np.abs(fx[rough])
            x[rough] = np.where(better, cand, x[rough])
            fx[rough] = np.where(better, fc, fx[rough])
    offenders = np.nonzero(np.abs(fx) > RESIDUAL_TOL)[0]
    if len(offenders) == 0:
        return x
    # roots crowding the admissibility edge are not resolvable in float64:
    # adjacent doubles in u straddle residual jumps above 1e-12 there
    x = x.astype(np.longdouble)
    worst = 0.0
    for i in offenders:
        x[i], res_i = _extended_root(float(x[i]), b, sigma, gammas, lams,
                                     float(phis[i]), psis[i], eps_adm)
        worst = max(worst, abs(res_i))
    if worst > RESIDUAL_TOL:
        raise NoAdmissibleRoot(f"solve stalled even at extended precision, "
                               f"worst residual {worst:.3e}")
    return x


def _extended_root(u0: float, b, sigma, gammas, lams, phi_i, psi_row, eps_adm):
    """Re-solve one cell FOC in extended precision around the float64 root."""
    ld = np.longdouble
    g = np.asarray(gammas, dtype=ld)
    lam = np.asarray(lams, dtype=ld)
    ps = np.asarray(psi_row, dtype=ld)
    b_l, s_l, phi_l = ld(b), ld(sigma), ld(phi_i)
    one = ld(1.0)

    def f(u):
        return b_l - u * s_l**2 + s_l * phi_l + np.sum(
            lam * (g * ps - u * g**2) / (one + u * g)
        )

    def fp(u):
        return -s_l**2 - np.sum(lam * g**2 * (one + ps) / (one + u * g) ** 2)

    lo, hi = -np.inf, np.inf
    for gj in g:
        if gj > 0:
            lo = max(lo, float((ld(eps_adm) - one) / gj))
        elif gj < 0:
            hi = min(hi, float((ld(eps_adm) - one) / gj))
    # bracket by widening around the float64 root
    h = ld(1e-12) * (one + abs(ld(u0)))
    a_br = b_br = ld(u0)
    fa = fb = f(ld(u0))
    for _ in range(120):
        if fa > 0 >= fb:
            break
        h *= 4
        a_br = max(ld(lo), ld(u0) - h)
        b_br = min(ld(hi), ld(u0) + h)
        fa, fb = f(a_br), f(b_br)
    else:
        return ld(u0), float(f(ld(u0)))
    u = ld(u0)
    for _ in range(120):
        fu = f(u)
        if abs(fu) <= _SOLVE_TOL:
            return u, float(fu)
        if fu > 0:
            a_br, fa = u, fu
        else:
            b_br, fb = u, fu
        d = fp(u)
        u_new = u - fu / d if d < 0 else (a_br + b_br) / 2
        if not (a_br < u_new < b_br):
            u_new = (a_br + b_br) / 2
        if u_new == u:
            break
        u = u_new
    return u, float(f(u))


def honest_benchmark(market: MarketSpec, levy: DiscreteLevyMeasure) -> ControlPolicy:
    """Deterministic per-cell optimal control for phi = psi = 0."""
    grid = market.b.grid
    k_T = grid.node_index(market.horizon)
    m = levy.n_marks
    u = np.empty(k_T)
    cache: dict[tuple, float] = {}
    for c in range(k_T):
        key = (
            float(market.b.values[c]),
            float(market.sigma.values[c]),
            tuple(float(g.values[c]) for g in market.gammas),
        )
        if key not in cache:
            prob = FocProblem(
                b=key[0],
                sigma=key[1],
                gammas=np.array(key[2]),
                lams=levy.intensities,
                psis=np.zeros(m),
                phi=0.0,
            )
            cache[key] = solve_optimal_control(prob)
        u[c] = cache[key]
    return ControlPolicy(kind="honest-optimal", table=u)


def build_insider_policy(
    model: ValidatedModel, drift_field: DriftField, eps_adm: float = 1e-9
) -> ControlPolicy:
    """Per-path, per-cell FOC roots using the computed drift field.

    The table is float64 unless some root needed the extended-precision
    fallback, in which case the whole table is promoted so the plug-back
    residual stays below 1e-12 everywhere.
    """
    n, k_T = drift_field.phi.shape
    lams = model.levy.intensities
    columns = []
    for c in range(k_T):
        columns.append(
            _solve_cell_vectorized(
                b=float(model.market.b.values[c]),
                sigma=float(model.market.sigma.values[c]),
                gammas=model.gamma_values[:, c],
                lams=lams,
                phis=drift_field.phi[:, c],
                psis=drift_field.psi[:, c, :],
                eps_adm=eps_adm,
            )
        )
    dtype = np.result_type(*(col.dtype for col in columns))
    table = np.empty((n, k_T), dtype=dtype)
    for c, col in enumerate(columns):
        table[:, c] = col
    return ControlPolicy(kind="insider-optimal", table=table, eps_adm=eps_adm)


def residual_table(model: ValidatedModel, drift_field: DriftField,
                   policy: ControlPolicy) -> np.ndarray:
    """Plug-back residual of a policy table at every (path, cell)."""
    n, k_T = drift_field.phi.shape
    u = policy.controls(n, k_T)
    out = np.empty((n, k_T), dtype=u.dtype)
    for c in range(k_T):
        out[:, c] = _residual_vec(
            u[:, c],
            float(model.market.b.values[c]),
            float(model.market.sigma.values[c]),
            model.gamma_values[:, c],
            model.levy.intensities,
            drift_field.phi[:, c],
            drift_field.psi[:, c, :],
        )
    return out


# ---------------------------------------------------------------------------
# value estimation
# ---------------------------------------------------------------------------


def _mean_stderr(vals: np.ndarray) -> tuple[float, float]:
    n = len(vals)
    mean = float(np.mean(vals))
    stderr = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, stderr


def expected_log_wealth(
    policy: ControlPolicy,
    ensemble: Ensemble,
    market: MarketSpec,
    drift_field: DriftField | None = None,
    estimator: str = "pathwise",
) -> ValueEstimate:
    """E[ln X(T)] under the policy.

    ``pathwise`` averages the exact per-path log-wealth.  ``drift-formula``
    averages the conditional-rate integral

        sum_cells [ u beta - u^2 sigma^2 / 2
                    + sum_j (ln(1+u gamma_j) - u gamma_j) lam_j (1+psi_j) ] dt

    with beta = b + sigma phi + sum_j gamma_j psi_j lam_j, which needs the
    drift field but has no martingale noise.
    """
    model = ensemble.model
    if estimator == "pathwise":
        vals = log_wealth_ensemble(ensemble, policy, market)
    elif estimator == "drift-formula":
        if drift_field is None:
            raise ValueError("drift-formula estimator needs a drift field")
        k_T = model.grid.node_index(market.horizon)
        u = policy.controls(ensemble.n_paths, k_T)
        dt = model.dt
        lams = model.levy.intensities
        vals = np.zeros(ensemble.n_paths)
        for c in range(k_T):
            uc = u[:, c]
            beta = float(market.b.values[c]) + float(market.sigma.values[c]) * drift_field.phi[:, c]
            rate = -0.5 * uc**2 * float(market.sigma.values[c]) ** 2
            for j in range(model.n_marks):
                g = float(model.gamma_values[j, c])
                ps = drift_field.psi[:, c, j]
                beta = beta + g * ps * lams[j]
                rate = rate + (np.log1p(uc * g) - uc * g) * lams[j] * (1.0 + ps)
            vals += (uc * beta + rate) * dt
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    mean, stderr = _mean_stderr(vals)
    return ValueEstimate(mean=mean, stderr=stderr, n_paths=ensemble.n_paths, estimator=estimator)
