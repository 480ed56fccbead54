"""Statistical verification of the enlarged-filtration decompositions.

From the computed drift field the candidate martingale parts are

    B_hat(t) = B(t) - int_0^t phi(s) ds,
    M_j(t)   = Ntilde_j(t) - int_0^t lam_j psi_j(s) ds,

with the integrals taken as left-endpoint cell sums so the subtraction is
exactly invertible.  The tests are necessary martingale conditions with
exact Monte Carlo error bars:

* instrumented increments: E[g * (X(u) - X(s))] = 0 for time-s-measurable
  instruments g drawn from {1, B(s), Ntilde(s), Y, Y*B(s)}; pass when the
  sample mean is within 3 standard errors, and negative controls (the raw,
  uncompensated processes) must instead fail by more than 10 standard
  errors;
* realized quadratic variation of B_hat over [0, T] against T (the drift
  correction biases it at first order in dt, 2% tolerance on the default
  grid);
* conditional-density diagnostics: normalization of the Donsker kernel,
  a chi-square fit of the t=0 density against the simulated signal
  histogram, and the tower property E[cond_delta(t, y)] = cond_delta(0, y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.integrate import simpson

from .drift import DriftField, mixture_density
from .kernel import FourierState, QuadratureSpec, build_tail, delta_batch, delta_ygrid, fourier_state
from .model import GAUSSIAN_DOMINANT, ValidatedModel
from .paths import Ensemble

__all__ = [
    "DecomposedPath",
    "DecomposedEnsemble",
    "TestReport",
    "decompose",
    "decompose_path",
    "martingale_test",
    "quadratic_variation_test",
    "qv_drift_bias",
    "density_diagnostics",
    "tower_test",
    "verify_suite",
    "suite_passed",
    "MissingDrift",
]

#: relative tolerance on the realized quadratic variation of B_hat
DELTA_QV = 0.02
#: chi-square confidence level for the histogram fit
CHI2_LEVEL = 0.99


class MissingDrift(ValueError):
    """Drift field does not cover the cells needed for decomposition."""


@dataclass(frozen=True)
class TestReport:
    """Outcome of one statistical check."""

    name: str
    statistic: float
    stderr: float
    threshold: float
    verdict: bool
    n_paths: int
    kind: str = "positive"  # positive | negative-control | deterministic
    notes: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "statistic": self.statistic,
            "stderr": self.stderr,
            "threshold": self.threshold,
            "verdict": "pass" if self.verdict else "fail",
            "n_paths": self.n_paths,
            "kind": self.kind,
            "notes": self.notes,
        }


@dataclass(frozen=True)
class DecomposedPath:
    b_hat: np.ndarray
    m_jump: np.ndarray
    drift_integral_b: np.ndarray
    drift_integral_n: np.ndarray


@dataclass(frozen=True, eq=False)
class DecomposedEnsemble:
    """Candidate martingale parts on nodes 0..k_T for every path."""

    b_hat: np.ndarray            # (n, k_T+1)
    m_jump: np.ndarray           # (n, k_T+1, m)
    drift_integral_b: np.ndarray
    drift_integral_n: np.ndarray
    k_T: int

    def path(self, i: int) -> DecomposedPath:
        return DecomposedPath(
            b_hat=self.b_hat[i],
            m_jump=self.m_jump[i],
            drift_integral_b=self.drift_integral_b[i],
            drift_integral_n=self.drift_integral_n[i],
        )


def decompose(ensemble: Ensemble, drift_field: DriftField) -> DecomposedEnsemble:
    """Subtract the drift integrals from B and Ntilde on every path.

    The integral summands are stored exactly as subtracted, so adding them
    back reproduces B to machine precision (one rounding each way).
    """
    model = ensemble.model
    k_T = model.horizon_index
    if drift_field.phi.shape != (ensemble.n_paths, k_T):
        raise MissingDrift(
            f"drift field shape {drift_field.phi.shape} does not cover "
            f"{ensemble.n_paths} paths x {k_T} cells"
        )
    dt = model.dt
    n, m = ensemble.n_paths, model.n_marks

    int_b = np.zeros((n, k_T + 1))
    np.cumsum(drift_field.phi * dt, axis=1, out=int_b[:, 1:])
    b_hat = ensemble.brownian[:, : k_T + 1] - int_b

    int_n = np.zeros((n, k_T + 1, m))
    np.cumsum(drift_field.alpha2_weight * dt, axis=1, out=int_n[:, 1:, :])
    m_jump = ensemble.ntilde[:, : k_T + 1, :] - int_n
    return DecomposedEnsemble(
        b_hat=b_hat, m_jump=m_jump, drift_integral_b=int_b, drift_integral_n=int_n, k_T=k_T
    )


def decompose_path(ensemble: Ensemble, drift_field: DriftField, i: int) -> DecomposedPath:
    return decompose(ensemble, drift_field).path(i)


# ---------------------------------------------------------------------------
# martingale increment tests
# ---------------------------------------------------------------------------

_INSTRUMENTS = ("1", "B_s", "Ntilde_s", "Y", "Y*B_s")


def _instrument_values(ensemble: Ensemble, name: str, ks: int) -> np.ndarray:
    if name == "1":
        return np.ones(ensemble.n_paths)
    if name == "B_s":
        return ensemble.brownian[:, ks]
    if name == "Ntilde_s":
        if ensemble.model.n_marks == 0:
            return np.zeros(ensemble.n_paths)
        return ensemble.ntilde[:, ks, :].sum(axis=1)
    if name == "Y":
        return ensemble.signal
    if name == "Y*B_s":
        return ensemble.signal * ensemble.brownian[:, ks]
    raise ValueError(f"unknown instrument {name!r}")


def _process_values(ensemble: Ensemble, decomp: DecomposedEnsemble | None,
                    process: str, k: int) -> np.ndarray:
    if process == "b_hat":
        return decomp.b_hat[:, k]
    if process == "raw_b":
        return ensemble.brownian[:, k]
    if process.startswith("m_jump:"):
        return decomp.m_jump[:, k, int(process.split(":")[1])]
    if process.startswith("raw_ntilde:"):
        return ensemble.ntilde[:, k, int(process.split(":")[1])]
    raise ValueError(f"unknown process {process!r}")


def martingale_test(
    ensemble: Ensemble,
    decomp: DecomposedEnsemble | None,
    process: str,
    s: float,
    u: float,
    instruments=_INSTRUMENTS,
    negative: bool = False,
) -> list[TestReport]:
    """Instrumented-increment orthogonality checks over [s, u].

    For each time-s-measurable instrument g, the statistic is the sample
    mean of g * (X(u) - X(s)).  A positive test passes when
    |mean| <= 3 stderr; a negative control passes when the raw process
    fails decisively, |mean| > 10 stderr.
    """
    model = ensemble.model
    ks, ku = model.grid.node_index(s), model.grid.node_index(u)
    if not ks < ku <= model.horizon_index:
        raise ValueError("need s < u <= T on grid nodes")
    inc = _process_values(ensemble, decomp, process, ku) - _process_values(
        ensemble, decomp, process, ks
    )
    n = ensemble.n_paths
    out = []
    for name in instruments:
        g = _instrument_values(ensemble, name, ks)
        prod = g * inc
        mean = float(np.mean(prod))
        stderr = float(np.std(prod, ddof=1) / math.sqrt(n))
        if negative:
            verdict = abs(mean) > 10.0 * stderr
            threshold = 10.0 * stderr
            kind = "negative-control"
        else:
            verdict = abs(mean) <= 3.0 * stderr
            threshold = 3.0 * stderr
            kind = "positive"
        out.append(
            TestReport(
                name=f"martingale:{process}:g={name}:s={s:g}:u={u:g}",
                statistic=mean,
                stderr=stderr,
                threshold=threshold,
                verdict=verdict,
                n_paths=n,
                kind=kind,
            )
        )
    return out


def quadratic_variation_test(
    ensemble: Ensemble,
    decomp: DecomposedEnsemble | None = None,
    process: str = "b_hat",
    delta_qv: float = DELTA_QV,
) -> TestReport:
    """Mean realized quadratic variation of the process over [0, T] vs T."""
    model = ensemble.model
    k_T = model.horizon_index
    T = model.horizon
    if process == "b_hat":
        dx = np.diff(decomp.b_hat, axis=1)
    elif process == "raw_b":
        dx = ensemble.d_brownian[:, :k_T]
    else:
        raise ValueError(f"quadratic variation test only covers Brownian parts, not {process!r}")
    qv = np.sum(dx**2, axis=1)
    mean = float(np.mean(qv))
    stderr = float(np.std(qv, ddof=1) / math.sqrt(ensemble.n_paths))
    return TestReport(
        name=f"quadratic-variation:{process}",
        statistic=mean,
        stderr=stderr,
        threshold=delta_qv * T,
        verdict=abs(mean - T) <= delta_qv * T,
        n_paths=ensemble.n_paths,
        notes=f"target {T}, tolerance {delta_qv:.0%}",
    )


def qv_drift_bias(ensemble: Ensemble, decomp: DecomposedEnsemble) -> tuple[float, float]:
    """Paired estimate of E[QV(B_hat) - QV(B)] over [0, T] (mean, stderr).

    The pairing removes the O(1) Monte Carlo noise of each quadratic
    variation, leaving the O(dt) drift-induced bias measurable.
    """
    k_T = decomp.k_T
    diff = np.sum(np.diff(decomp.b_hat, axis=1) ** 2, axis=1) - np.sum(
        ensemble.d_brownian[:, :k_T] ** 2, axis=1
    )
    return float(np.mean(diff)), float(np.std(diff, ddof=1) / math.sqrt(len(diff)))


# ---------------------------------------------------------------------------
# density diagnostics
# ---------------------------------------------------------------------------


def _lattice_support(model: ValidatedModel, tail, running: float) -> np.ndarray:
    """y values carrying the conditional mass: running - linear_coeff + integers."""
    k = tail.node
    tau = model.t0 - k * model.dt
    lo_mu, hi_mu = 0, 0
    for j in range(model.n_marks):
        lam_tau = float(model.levy.intensities[j]) * tau
        kj = int(stats.poisson.ppf(1.0 - 1e-13, lam_tau)) + 2
        th = int(model.theta_values[j, 0])
        if th > 0:
            hi_mu += th * kj
        else:
            lo_mu += th * kj
    mus = np.arange(lo_mu, hi_mu + 1, dtype=float)
    return (running - tail.linear_jump_coefficient) + mus


def _y_spread(model: ValidatedModel, tail) -> float:
    """Half-width of the region holding all but ~1e-12 of conditional mass."""
    v = tail.tail_gaussian
    tau = model.t0 - tail.t
    span = 0.0
    for j in range(model.n_marks):
        lam_tau = float(model.levy.intensities[j]) * tau
        kj = stats.poisson.ppf(1.0 - 1e-12, lam_tau) + 2
        span += float(np.max(np.abs(model.theta_values[j]))) * kj
    return 12.0 * math.sqrt(max(v, 0.0)) + span + 1.0


def _normalization_of_state(model: ValidatedModel, state: FourierState,
                            q: QuadratureSpec) -> float:
    """Integral (or lattice sum) of the conditional density over y."""
    tail = state.tail
    if model.mode == GAUSSIAN_DOMINANT:
        v = tail.tail_gaussian
        center = state.running_signal
        width = _y_spread(model, tail)
        n_y = 4 * max(401, int(width / (math.sqrt(v) / 8.0))) + 1
        ys = np.linspace(center - width, center + width, n_y)
        dens = delta_ygrid(state, ys, q)
        return float(simpson(dens, x=ys))
    ys = _lattice_support(model, tail, state.running_signal)
    return float(np.sum(delta_ygrid(state, ys, q)))


def density_diagnostics(
    model: ValidatedModel,
    ensemble: Ensemble,
    t_list,
    q: QuadratureSpec | None = None,
    n_state_paths: int = 10,
    norm_tol: float = 1e-6,
) -> list[TestReport]:
    """Kernel normalization, t=0 closed-form check, and histogram chi-square."""
    q = q or QuadratureSpec.for_model(model)
    reports = []

    # normalization of the conditional law on sampled states
    worst = 0.0
    n_states = 0
    for t in t_list:
        for i in range(min(n_state_paths, ensemble.n_paths)):
            state = fourier_state(model, ensemble.path(i), t)
            worst = max(worst, abs(_normalization_of_state(model, state, q) - 1.0))
            n_states += 1
    reports.append(
        TestReport(
            name="density-normalization",
            statistic=worst,
            stderr=0.0,
            threshold=norm_tol,
            verdict=worst <= norm_tol,
            n_paths=n_states,
            kind="deterministic",
            notes=f"max |integral - 1| over {n_states} states",
        )
    )

    # t = 0 density against the model-specific independent oracle
    state0 = FourierState(
        tail=build_tail(model, 0.0), running_jump_phase=0.0, running_brownian_integral=0.0
    )
    if model.mode == GAUSSIAN_DOMINANT and model.n_marks == 0:
        v0 = float(model.tail_gaussian_at_node[0])
        ys = np.array([-2.0, -1.0, 0.0, 1.0, 2.0]) * math.sqrt(v0)
        oracle = np.exp(-0.5 * ys**2 / v0) / math.sqrt(2.0 * math.pi * v0)
        tol, label = 1e-8, "gaussian"
    elif model.mode == GAUSSIAN_DOMINANT:
        theta = float(model.sigma_y_values[0])
        lam = float(model.levy.intensities[0])
        ys = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
        oracle, _ = mixture_density(ys, lam * model.t0, theta**2 * model.t0)
        tol, label = 1e-6, "poisson-gaussian mixture series"
    else:
        lam = float(model.levy.intensities[0])
        ys = _lattice_support(model, state0.tail, 0.0)[:8]
        mus = np.rint(ys + state0.tail.linear_jump_coefficient)
        oracle = stats.poisson.pmf(mus, lam * model.t0)
        tol, label = 1e-8, "poisson pmf series"
    vals = delta_ygrid(state0, ys, q)
    rel = float(np.max(np.abs(vals - oracle) / np.maximum(np.abs(oracle), 1e-300)))
    reports.append(
        TestReport(
            name="density-t0-oracle",
            statistic=rel,
            stderr=0.0,
            threshold=tol,
            verdict=rel <= tol,
            n_paths=len(ys),
            kind="deterministic",
            notes=f"max relative error vs {label}",
        )
    )

    reports.append(_chi_square_report(model, ensemble, state0, q))
    return reports


def _merge_small_bins(observed: np.ndarray, probs: np.ndarray, n: int,
                      min_expected: float = 5.0):
    """Greedily merge adjacent bins until every expected count is >= min_expected."""
    obs_out, prob_out = [], []
    acc_o, acc_p = 0, 0.0
    for o, p in zip(observed, probs):
        acc_o += int(o)
        acc_p += float(p)
        if acc_p * n >= min_expected:
            obs_out.append(acc_o)
            prob_out.append(acc_p)
            acc_o, acc_p = 0, 0.0
    if acc_p > 0.0 or acc_o > 0:
        if obs_out:
            obs_out[-1] += acc_o
            prob_out[-1] += acc_p
        else:
            obs_out, prob_out = [acc_o], [acc_p]
    return np.array(obs_out), np.array(prob_out)


def _chi_square_report(model, ensemble, state0, q) -> TestReport:
    """Chi-square fit of the simulated Y histogram against the t=0 law."""
    y = ensemble.signal
    n = len(y)
    if model.mode == GAUSSIAN_DOMINANT:
        m = model
        var_y = float(m.tail_gaussian_at_node[0]) + float(
            np.sum(m.levy.intensities[:, None] * m.theta_values**2) * m.dt
        )
        width = _y_spread(model, state0.tail)
        edges = np.linspace(-4.0 * math.sqrt(var_y), 4.0 * math.sqrt(var_y), 21)
        edges[0] = min(-width, float(np.min(y)) - 1.0)
        edges[-1] = max(width, float(np.max(y)) + 1.0)
        observed, _ = np.histogram(y, bins=edges)
        probs = np.empty(20)
        for i in range(20):
            ys = np.linspace(edges[i], edges[i + 1], 401)
            probs[i] = simpson(delta_ygrid(state0, ys, q), x=ys)
        observed, probs = _merge_small_bins(observed, probs, n)
        probs = probs / probs.sum()
    else:
        support = _lattice_support(model, state0.tail, 0.0)
        mass = delta_ygrid(state0, support, q)
        observed = np.array([int(np.sum(np.abs(y - s) < 1e-9)) for s in support])
        observed, mass = _merge_small_bins(observed, mass, n)
        probs = mass / mass.sum()  # renormalize the enumerated support
    expected = probs * n
    stat = float(np.sum((observed - expected) ** 2 / expected))
    dof = len(expected) - 1
    crit = float(stats.chi2.ppf(CHI2_LEVEL, dof))
    return TestReport(
        name="density-histogram-chi2",
        statistic=stat,
        stderr=0.0,
        threshold=crit,
        verdict=stat <= crit,
        n_paths=n,
        notes=f"dof={dof}, level={CHI2_LEVEL:.0%}",
    )


def tower_test(
    model: ValidatedModel,
    ensemble: Ensemble,
    t: float,
    ys,
    q: QuadratureSpec | None = None,
    chunk: int = 4096,
) -> list[TestReport]:
    """E[cond_delta(t, y)] must equal cond_delta(0, y) within 3 stderr."""
    q = q or QuadratureSpec.for_model(model)
    tail = build_tail(model, t)
    k = tail.node
    runnings = ensemble.running_signal[:, k]
    state0 = FourierState(
        tail=build_tail(model, 0.0), running_jump_phase=0.0, running_brownian_integral=0.0
    )
    out = []
    for y in ys:
        vals = np.empty(ensemble.n_paths)
        for lo in range(0, ensemble.n_paths, chunk):
            hi = min(lo + chunk, ensemble.n_paths)
            vals[lo:hi] = delta_batch(tail, runnings[lo:hi], float(y), q)
        target = delta_ygrid(state0, np.array([float(y)]), q)[0]
        mean = float(np.mean(vals))
        stderr = float(np.std(vals, ddof=1) / math.sqrt(len(vals)))
        out.append(
            TestReport(
                name=f"density-tower:t={t:g}:y={y:g}",
                statistic=mean - target,
                stderr=stderr,
                threshold=3.0 * stderr,
                verdict=abs(mean - target) <= 3.0 * stderr,
                n_paths=ensemble.n_paths,
                notes=f"ensemble mean {mean:.8f} vs t=0 value {target:.8f}",
            )
        )
    return out


# ---------------------------------------------------------------------------
# full suite
# ---------------------------------------------------------------------------


def verify_suite(
    model: ValidatedModel,
    ensemble: Ensemble,
    drift_field: DriftField,
    q: QuadratureSpec | None = None,
    instruments=("1", "B_s", "Ntilde_s", "Y"),
    with_density: bool = True,
) -> list[TestReport]:
    """All decomposition tests applicable to the model, plus negative controls."""
    q = q or QuadratureSpec.for_model(model)
    T = model.horizon
    decomp = decompose(ensemble, drift_field)
    reports: list[TestReport] = []

    # exact invertibility of the decomposition (ulp-level: one rounding each
    # in the subtraction and the re-addition of the stored summands)
    b_orig = ensemble.brownian[:, : decomp.k_T + 1]
    recon = float(np.max(np.abs(decomp.b_hat + decomp.drift_integral_b - b_orig)))
    scale = float(np.max(np.abs(b_orig)) + np.max(np.abs(decomp.drift_integral_b)))
    tol = 8.0 * np.finfo(float).eps * max(scale, 1.0)
    reports.append(
        TestReport(
            name="decompose-reconstruction",
            statistic=recon,
            stderr=0.0,
            threshold=tol,
            verdict=recon <= tol,
            n_paths=ensemble.n_paths,
            kind="deterministic",
            notes="b_hat + drift integral must reproduce B to machine precision",
        )
    )

    spans = [(0.0, T / 2.0), (T / 2.0, T)]
    for s, u in spans:
        reports += martingale_test(ensemble, decomp, "b_hat", s, u, instruments)
        for j in range(model.n_marks):
            reports += martingale_test(ensemble, decomp, f"m_jump:{j}", s, u, instruments)

    # negative controls: the uncompensated processes against the signal
    has_brownian_info = not np.all(model.sigma_y_values == 0.0)
    if has_brownian_info:
        reports += martingale_test(ensemble, None, "raw_b", 0.0, T, ("Y",), negative=True)
    for j in range(model.n_marks):
        if not np.all(model.theta_values[j] == 0.0):
            reports += martingale_test(
                ensemble, None, f"raw_ntilde:{j}", 0.0, T, ("Y",), negative=True
            )

    reports.append(quadratic_variation_test(ensemble, decomp))

    if with_density:
        reports += density_diagnostics(model, ensemble, t_list=(0.0, T / 2.0), q=q)
    return reports


def suite_passed(reports: list[TestReport]) -> bool:
    return all(r.verdict for r in reports)
