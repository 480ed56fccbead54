"""Model configuration: time grid, signal coefficients, jump measure, market.

The world is driven by a Brownian motion B and an independent compensated
Poisson random measure with a *finite discrete* intensity measure
nu = sum_j lam_j * delta_{zeta_j}.  The insider signal is the terminal value
of a first-order chaos process

    Y(t) = int_0^t sigma_y(s) dB(s) + sum_j int_0^t theta_j(s) dN~_j(s),

revealed at time 0, where all coefficients are deterministic step functions
on a uniform grid over [0, T0].  Validation determines which of two regimes
the configuration falls into:

* ``gaussian-dominant`` -- the Gaussian tail variance of Y is positive at
  every t < T0, so the conditional law of Y has a density and Fourier
  inversion over the real line converges;
* ``pure-lattice`` -- sigma_y is identically zero and Y lives on an integer
  lattice (integer jump sizes, constant integer theta multipliers), so the
  conditional law is a point-mass distribution recovered by inversion over
  [-pi, pi].

Anything in between has no decaying Fourier envelope and is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "TimeGrid",
    "StepFunction",
    "DiscreteLevyMeasure",
    "SignalSpec",
    "MarketSpec",
    "ValidatedModel",
    "validate_model",
    "ModelValidationError",
    "ZeroDiffusionTail",
    "HorizonTooLate",
    "EmptyMeasure",
]

GAUSSIAN_DOMINANT = "gaussian-dominant"
PURE_LATTICE = "pure-lattice"

#: tolerance for "is this time a grid node" checks
_NODE_ATOL = 1e-9


class ModelValidationError(ValueError):
    """A model configuration violates one of its invariants."""


class ZeroDiffusionTail(ModelValidationError):
    """Gaussian tail variance of the signal vanishes while jumps are non-lattice."""


class HorizonTooLate(ModelValidationError):
    """Market horizon T exceeds T0 - dt, too close to the singular endpoint."""


class EmptyMeasure(ModelValidationError):
    """No jump marks configured while the signal has no Brownian part."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_0 = 0 < t_1 < ... < t_n = T0."""

    t_end: float
    n_steps: int
    t_start: float = 0.0

    def __post_init__(self):
        if self.t_start != 0.0:
            raise ModelValidationError("grid must start at t = 0")
        if self.n_steps < 1:
            raise ModelValidationError("n_steps must be a positive integer")
        if not np.isfinite(self.t_end) or self.t_end <= 0.0:
            raise ModelValidationError("t_end must be a positive finite time")

    @property
    def dt(self) -> float:
        return self.t_end / self.n_steps

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.t_end, self.n_steps + 1)

    def cell_of(self, t: float) -> int:
        """Index of the right-open cell [t_i, t_{i+1}) containing t.

        t = t_end maps to the last cell so step functions stay evaluable
        on the closed interval.
        """
        if t < 0.0 or t > self.t_end * (1.0 + 1e-12):
            raise ValueError(f"time {t} outside [0, {self.t_end}]")
        i = int(np.floor(t / self.dt + 1e-9))
        return min(i, self.n_steps - 1)

    def node_index(self, t: float) -> int:
        """Index k with t_k = t; raises if t is not (within tolerance) a node."""
        k = int(round(t / self.dt))
        if k < 0 or k > self.n_steps or abs(t - k * self.dt) > _NODE_ATOL:
            raise ValueError(f"time {t} is not a grid node (dt={self.dt})")
        return k


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Piecewise-constant function of time, one value per grid cell."""

    values: np.ndarray
    grid: TimeGrid

    def __eq__(self, other) -> bool:
        if not isinstance(other, StepFunction):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.n_steps,):
            raise ModelValidationError(
                f"step function needs {self.grid.n_steps} cell values, got shape {vals.shape}"
            )
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, grid: TimeGrid, value: float) -> "StepFunction":
        return cls(np.full(grid.n_steps, float(value)), grid)

    def __call__(self, t: float) -> float:
        return float(self.values[self.grid.cell_of(t)])

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.values == 0.0))

    def tail_square_integral(self, t: float) -> float:
        """Exact int_t^{T0} f(s)^2 ds for t on the grid."""
        k = self.grid.node_index(t)
        return float(np.sum(self.values[k:] ** 2) * self.grid.dt)

    def square_norm(self, a: float, b: float) -> float:
        """Exact int_a^b f(s)^2 ds for grid nodes a <= b."""
        i, j = self.grid.node_index(a), self.grid.node_index(b)
        return float(np.sum(self.values[i:j] ** 2) * self.grid.dt)


@dataclass(frozen=True, eq=False)
class DiscreteLevyMeasure:
    """Finite discrete jump measure: marks (zeta_j, lam_j), all lam_j > 0."""

    sizes: np.ndarray
    intensities: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, DiscreteLevyMeasure):
            return NotImplemented
        return np.array_equal(self.sizes, other.sizes) and np.array_equal(
            self.intensities, other.intensities
        )

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=float)
        lams = np.asarray(self.intensities, dtype=float)
        if sizes.shape != lams.shape or sizes.ndim != 1:
            raise ModelValidationError("marks need matching 1-d size and intensity arrays")
        if np.any(lams <= 0.0):
            raise ModelValidationError("all jump intensities must be positive")
        if np.any(sizes == 0.0):
            raise ModelValidationError("jump sizes must be nonzero")
        if len(np.unique(sizes)) != len(sizes):
            raise ModelValidationError("jump sizes must be distinct")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "intensities", lams)

    @classmethod
    def from_marks(cls, marks) -> "DiscreteLevyMeasure":
        marks = list(marks)
        sizes = np.array([m[0] for m in marks], dtype=float)
        lams = np.array([m[1] for m in marks], dtype=float)
        return cls(sizes, lams)

    @property
    def n_marks(self) -> int:
        return len(self.sizes)

    @property
    def is_integer_lattice(self) -> bool:
        return bool(np.all(self.sizes == np.round(self.sizes)))

    @property
    def second_moment(self) -> float:
        """sum_j lam_j zeta_j^2 (always finite for a finite mark list)."""
        return float(np.sum(self.intensities * self.sizes**2))


@dataclass(frozen=True)
class SignalSpec:
    """Coefficients of the insider signal Y: sigma_y and one theta per mark."""

    sigma_y: StepFunction
    thetas: tuple
    grid: TimeGrid

    def __post_init__(self):
        object.__setattr__(self, "thetas", tuple(self.thetas))
        for th in self.thetas:
            if th.grid != self.grid:
                raise ModelValidationError("theta step functions must share the signal grid")
        if self.sigma_y.grid != self.grid:
            raise ModelValidationError("sigma_y must live on the signal grid")


@dataclass(frozen=True)
class MarketSpec:
    """Coefficients b, sigma, gamma_j of the controlled wealth equation."""

    b: StepFunction
    sigma: StepFunction
    gammas: tuple
    horizon: float

    def __post_init__(self):
        object.__setattr__(self, "gammas", tuple(self.gammas))


def _determine_mode(signal: SignalSpec, levy: DiscreteLevyMeasure) -> str:
    """Classify a configuration; pure function of (sigma_y, marks, thetas)."""
    sig_vals = signal.sigma_y.values
    if sig_vals[-1] != 0.0:
        # tail variance from every t < T0 includes the last cell, hence > 0
        return GAUSSIAN_DOMINANT
    if np.all(sig_vals == 0.0):
        if levy.n_marks == 0:
            raise EmptyMeasure("no marks and sigma_y identically zero: the signal is trivial")
        if not levy.is_integer_lattice:
            raise ZeroDiffusionTail(
                "sigma_y is identically zero but the jump sizes are not integers; "
                "the conditional law has no lattice structure and no Gaussian envelope"
            )
        for th in signal.thetas:
            v = th.values
            if not np.all(v == v[0]) or v[0] != round(v[0]):
                raise ZeroDiffusionTail(
                    "pure-lattice mode requires constant integer theta multipliers"
                )
        return PURE_LATTICE
    raise ZeroDiffusionTail(
        "sigma_y vanishes on the final cell, so the Gaussian tail variance is zero "
        "from some t < T0 while the signal is not purely lattice-valued"
    )


@dataclass(frozen=True, eq=False)
class ValidatedModel:
    """Sealed, immutable model; safe to share across parallel workers."""

    grid: TimeGrid
    signal: SignalSpec
    levy: DiscreteLevyMeasure
    market: MarketSpec
    mode: str = field(default="")

    # -- convenience views -------------------------------------------------

    @property
    def t0(self) -> float:
        return self.grid.t_end

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    @property
    def n_marks(self) -> int:
        return self.levy.n_marks

    @property
    def horizon(self) -> float:
        return self.market.horizon

    @cached_property
    def horizon_index(self) -> int:
        """Grid node index of the market horizon T."""
        return self.grid.node_index(self.market.horizon)

    @cached_property
    def sigma_y_values(self) -> np.ndarray:
        return self.signal.sigma_y.values

    @cached_property
    def theta_values(self) -> np.ndarray:
        """(n_marks, n_steps) array of theta_j per cell."""
        if self.n_marks == 0:
            return np.zeros((0, self.n_steps))
        return np.stack([th.values for th in self.signal.thetas])

    @cached_property
    def gamma_values(self) -> np.ndarray:
        if self.n_marks == 0:
            return np.zeros((0, self.n_steps))
        return np.stack([g.values for g in self.market.gammas])

    @cached_property
    def tail_gaussian_at_node(self) -> np.ndarray:
        """int_{t_k}^{T0} sigma_y^2 ds for every node k, as exact cell sums."""
        cell = self.sigma_y_values**2 * self.dt
        out = np.zeros(self.n_steps + 1)
        out[:-1] = np.cumsum(cell[::-1])[::-1]
        return out

    @cached_property
    def lattice_offset(self) -> float:
        """sum_j lam_j int_0^{T0} theta_j ds; Y + offset is integer in lattice mode."""
        if self.n_marks == 0:
            return 0.0
        return float(np.sum(self.levy.intensities[:, None] * self.theta_values) * self.dt)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ValidatedModel):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self) -> dict:
        """Plain-data form; feeding it back through ``model_from_dict`` is the identity."""
        return {
            "grid": {"t_end": self.grid.t_end, "n_steps": self.grid.n_steps},
            "signal": {
                "sigma_y": self.sigma_y_values.tolist(),
                "theta": self.theta_values.tolist(),
            },
            "levy": {
                "marks": [
                    [float(z), float(l)]
                    for z, l in zip(self.levy.sizes, self.levy.intensities)
                ]
            },
            "market": {
                "b": self.market.b.values.tolist(),
                "sigma": self.market.sigma.values.tolist(),
                "gamma": self.gamma_values.tolist(),
                "horizon": self.market.horizon,
            },
            "mode": self.mode,
        }


def validate_model(
    signal: SignalSpec, levy: DiscreteLevyMeasure, market: MarketSpec
) -> ValidatedModel:
    """Check all configuration invariants and seal the model.

    Determines the regime (gaussian-dominant or pure-lattice), checks the
    market against the grid, and returns an immutable model object.

    Raises
    ------
    ZeroDiffusionTail
        if the signal's Gaussian tail variance vanishes somewhere while the
        jump part is not integer-lattice.
    HorizonTooLate
        if T > T0 - dt (the drift denominators blow up as t -> T0).
    EmptyMeasure
        if there are no marks and sigma_y is identically zero.
    ModelValidationError
        for shape/sign violations or a horizon off the grid.
    """
    grid = signal.grid
    if len(signal.thetas) != levy.n_marks:
        raise ModelValidationError(
            f"signal has {len(signal.thetas)} theta functions for {levy.n_marks} marks"
        )
    if len(market.gammas) != levy.n_marks:
        raise ModelValidationError(
            f"market has {len(market.gammas)} gamma functions for {levy.n_marks} marks"
        )
    for f in (market.b, market.sigma, *market.gammas):
        if f.grid != grid:
            raise ModelValidationError("market coefficients must live on the signal grid")

    mode = _determine_mode(signal, levy)

    T = market.horizon
    if T > grid.t_end - grid.dt + _NODE_ATOL:
        raise HorizonTooLate(
            f"horizon T={T} must stay at least one cell below T0={grid.t_end}"
        )
    if T <= 0.0:
        raise ModelValidationError("horizon must be positive")
    try:
        grid.node_index(T)
    except ValueError as exc:
        raise ModelValidationError(f"horizon must coincide with a grid node: {exc}") from exc

    sig_vals = market.sigma.values
    if np.any(sig_vals < 0.0):
        raise ModelValidationError("market sigma must be nonnegative")
    sigma_all_positive = bool(np.all(sig_vals > 0.0))
    sigma_all_zero = bool(np.all(sig_vals == 0.0))
    some_gamma = any(not g.is_zero for g in market.gammas)
    if not (sigma_all_positive or (sigma_all_zero and some_gamma)):
        raise ModelValidationError(
            "market needs sigma > 0 everywhere, or sigma identically zero "
            "with at least one nonzero gamma"
        )

    return ValidatedModel(grid=grid, signal=signal, levy=levy, market=market, mode=mode)


def model_from_dict(data: dict) -> ValidatedModel:
    """Rebuild and re-validate a model from its ``to_dict`` form."""
    grid = TimeGrid(t_end=float(data["grid"]["t_end"]), n_steps=int(data["grid"]["n_steps"]))

    def _step(values) -> StepFunction:
        arr = np.asarray(values, dtype=float)
        if arr.ndim == 0:
            return StepFunction.constant(grid, float(arr))
        return StepFunction(arr, grid)

    signal = SignalSpec(
        sigma_y=_step(data["signal"]["sigma_y"]),
        thetas=tuple(_step(v) for v in data["signal"]["theta"]),
        grid=grid,
    )
    levy = DiscreteLevyMeasure.from_marks(data["levy"]["marks"])
    market = MarketSpec(
        b=_step(data["market"]["b"]),
        sigma=_step(data["market"]["sigma"]),
        gammas=tuple(_step(v) for v in data["market"]["gamma"]),
        horizon=float(data["market"]["horizon"]),
    )
    return validate_model(signal, levy, market)
