import numpy as np
import pytest

from mfoc.measures import ControlPath, GridMeasure, PriorMeasure
from mfoc.model import (
    ActivationField,
    ConfinementPotential,
    Dataset,
    ProblemConfig,
    TerminalLoss,
    TimeGrid,
)

DESK_RES = 64
DESK_HALFWIDTH = 4.0


def make_dataset(n=64, seed=11, zero_problem=False):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(-2.0, 2.0, n))[:, None]
    if zero_problem:
        y = x.copy()
    else:
        y = x - 0.6 * np.tanh(x) + 0.05 * rng.standard_normal((n, 1))
    return Dataset(x, y)


def make_config(n=64, nt=65, epsilon=0.5, seed=11, zero_problem=False, horizon=1.0):
    return ProblemConfig(
        epsilon=epsilon,
        field=ActivationField(),
        potential=ConfinementPotential(),
        loss=TerminalLoss(),
        dataset=make_dataset(n=n, seed=seed, zero_problem=zero_problem),
        grid=TimeGrid(0.0, horizon, nt),
        seed=seed,
    )


def make_prior(config, res=DESK_RES, halfwidth=DESK_HALFWIDTH):
    return PriorMeasure.build(
        config.potential, halfwidth, res, config.field.dprime
    )


def prior_path(config, res=DESK_RES, halfwidth=DESK_HALFWIDTH):
    prior = make_prior(config, res=res, halfwidth=halfwidth)
    return ControlPath.constant(config.grid, prior.measure), prior


def gaussian_grid(halfwidth, res, mean, sigma):
    """1D discretized normal density (not renormalized)."""
    m = GridMeasure(halfwidth, res, np.zeros(res))
    a = m.axis
    vals = np.exp(-((a - mean) ** 2) / (2.0 * sigma**2)) / (
        sigma * np.sqrt(2.0 * np.pi)
    )
    return GridMeasure(halfwidth, res, vals)


@pytest.fixture(scope="session")
def desk_config():
    return make_config()


@pytest.fixture(scope="session")
def small_config():
    # cheap fixture for unit tests: coarser grid, fewer particles
    return make_config(n=16, nt=17)


@pytest.fixture(scope="session")
def desk_solution(desk_config):
    """Converged first-order solution of the desk problem, shared widely."""
    from mfoc.optimizer import picard_solve

    path, prior = prior_path(desk_config)
    result = picard_solve(desk_config, path, damping=0.5, tol=1e-9, max_iters=500)
    assert result.converged
    return desk_config, prior, result


def relative_eta(base, grid, fn, profile=None):
    """Zero-mass perturbation proportional to a base grid density."""
    from mfoc.measures import PerturbationPath

    mids = base.midpoints()
    g = np.asarray(fn(mids), dtype=float).reshape(base.values.shape)
    g = g - float(np.sum(g * base.values)) * base.cell_volume
    layers = []
    for k in range(grid.nt):
        w = 1.0 if profile is None else float(profile(grid.nodes[k]))
        layers.append(w * base.values * g)
    return PerturbationPath(grid, base.halfwidth, base.res, np.stack(layers))
