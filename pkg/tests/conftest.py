import numpy as np
import pytest

from infodrift.model import (
    DiscreteLevyMeasure,
    MarketSpec,
    SignalSpec,
    StepFunction,
    TimeGrid,
    validate_model,
)


def make_model(
    *,
    t_end=1.0,
    n_steps=500,
    sigma_y=1.0,
    marks=(),
    thetas=(),
    b=0.0,
    sigma=1.0,
    gammas=(),
    horizon=0.5,
):
    """Assemble a validated model from scalars or per-cell value lists."""
    grid = TimeGrid(t_end=t_end, n_steps=n_steps)

    def step(v):
        if np.ndim(v) == 0:
            return StepFunction.constant(grid, float(v))
        return StepFunction(np.asarray(v, dtype=float), grid)

    marks = list(marks)
    if marks:
        levy = DiscreteLevyMeasure.from_marks(marks)
    else:
        levy = DiscreteLevyMeasure(np.zeros(0), np.zeros(0))
    signal = SignalSpec(sigma_y=step(sigma_y), thetas=tuple(step(v) for v in thetas), grid=grid)
    market = MarketSpec(
        b=step(b), sigma=step(sigma), gammas=tuple(step(v) for v in gammas), horizon=horizon
    )
    return validate_model(signal, levy, market)


@pytest.fixture
def brownian_model():
    return make_model()


@pytest.fixture
def poisson_model():
    return make_model(sigma_y=0.0, marks=[(1.0, 1.0)], thetas=[1.0], b=0.05, gammas=[0.5])


@pytest.fixture
def mixed_model():
    return make_model(sigma_y=0.8, marks=[(1.0, 1.0)], thetas=[1.0], gammas=[0.5])
