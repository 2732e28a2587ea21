"""Coupled characteristics of the control problem.

The feature particles X follow the mean drift of the control path, the
adjoints Z = grad_x u(X, Y) are transported backward along the stored X, and
the tangent particles dX realize the derivative of the flow with respect to a
signed control perturbation.

Integrator conventions (shared by the whole package):

* classical RK4 with the control frozen at the left node of each interval,
* backward and tangent passes reconstruct in-interval positions from the
  stored node values with a cubic Hermite step (one-sided in-interval drifts),
  which keeps the passes deterministic and fourth-order without re-solving,
* the transported-test comparison in ``duality_residual`` deliberately uses
  the cruder linear in-interval reconstruction; its second-order defect is the
  quantity being reported.

Per-particle work is vectorized over the whole ensemble; reductions over
measure cells use fixed-order numpy sums, so results do not depend on thread
counts.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import faults
from .measures import (
    ControlPath,
    GridMeasure,
    ParticleMeasure,
    PerturbationPath,
)
from .model import ActivationField, ConfigError, FieldQuadrature, ProblemConfig


class DivergenceError(RuntimeError):
    """Particle state became non-finite during integration."""


@dataclass(frozen=True)
class EnsembleFlow:
    """Per-node ensemble state along the time grid.

    ``x`` always holds the forward features, shape (nt, n, d1). ``y`` is the
    constant label block (n, d2). ``z`` holds the backward adjoints when
    populated; ``hess`` the second x-derivative of the value function along
    characteristics (d1 = 1 only); ``bracket`` the per-node grid samples of
    the mean b . z coupling when a Gibbs grid was supplied to the backward
    pass.
    """

    x: np.ndarray
    y: np.ndarray
    z: Optional[np.ndarray] = None
    hess: Optional[np.ndarray] = None
    bracket: Optional[np.ndarray] = None

    @property
    def nt(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def has_z(self) -> bool:
        return self.z is not None


@dataclass(frozen=True)
class TangentFlow:
    """Tangent particles dX realizing the linearized push-forward."""

    dx: np.ndarray  # (nt, n, d1)
    flow: EnsembleFlow
    eta: Optional[PerturbationPath] = None


@dataclass(frozen=True)
class ProbeFunction:
    """C^1 test function phi(x, y) with analytic x-gradient."""

    name: str
    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad_x: Callable[[np.ndarray, np.ndarray], np.ndarray]


def default_test_functions(d1: int = 1, d2: int = 1):
    """Small C^1 family used by the push-forward and duality diagnostics."""
    if d1 != 1 or d2 != 1:
        raise ConfigError("default test functions are provided for d1 = d2 = 1")

    def _col(fn):
        return lambda x, y: fn(x[:, 0], y[:, 0])

    def _grad(fn):
        return lambda x, y: fn(x[:, 0], y[:, 0])[:, None]

    return [
        ProbeFunction("constant", _col(lambda x, y: np.ones_like(x)), _grad(lambda x, y: np.zeros_like(x))),
        ProbeFunction("affine", _col(lambda x, y: x + 0.5 * y), _grad(lambda x, y: np.ones_like(x))),
        ProbeFunction("quadratic", _col(lambda x, y: 0.5 * x**2 - 0.3 * x * y), _grad(lambda x, y: x - 0.3 * y)),
        ProbeFunction("saturating", _col(lambda x, y: np.tanh(1.3 * x - 0.4 * y)), _grad(lambda x, y: 1.3 / np.cosh(1.3 * x - 0.4 * y) ** 2)),
        ProbeFunction("bump", _col(lambda x, y: np.exp(-((x - 0.3) ** 2))), _grad(lambda x, y: -2.0 * (x - 0.3) * np.exp(-((x - 0.3) ** 2)))),
    ]


# -- measure plumbing ----------------------------------------------------------


def _measure_arrays(m):
    """(support points, weights) realizing integration against m."""
    if isinstance(m, GridMeasure):
        return m.midpoints(), m.values.ravel() * m.cell_volume
    if isinstance(m, ParticleMeasure):
        return m.points, np.full(m.m, 1.0 / m.m)
    raise ConfigError(f"unsupported measure type {type(m).__name__}")


def _node_quadratures(field: ActivationField, path: ControlPath):
    """Per-node (quadrature, control fold); grid paths share one support."""
    out = []
    shared = None
    for m in path.measures:
        support, weights = _measure_arrays(m)
        if path.is_grid:
            if shared is None:
                shared = FieldQuadrature(field, support)
            quad = shared
        else:
            quad = FieldQuadrature(field, support)
        out.append((quad, quad.fold(weights)))
    return out


def meanfield_drift(field: ActivationField, x, m) -> np.ndarray:
    """Mean drift int b(x, a) dm(a) for a single state x."""
    support, weights = _measure_arrays(m)
    quad = FieldQuadrature(field, support)
    x = np.asarray(x, dtype=float).reshape(1, field.d1)
    return quad.fold(weights).drift(quad.tiers(x, 0))[0]


# -- forward pass ---------------------------------------------------------------


def forward_solve(
    config: ProblemConfig, path: ControlPath, substeps: int = 1
) -> EnsembleFlow:
    """Push the dataset features through the mean-field ODE.

    The control is piecewise constant on the path's grid regardless of
    ``substeps``; refining substeps only refines the integrator, which is what
    the step-convergence diagnostics rely on.
    """
    if substeps < 1:
        raise ConfigError("substeps must be >= 1")
    grid = path.grid
    n, d1 = config.dataset.n, config.field.d1
    X = np.empty((grid.nt, n, d1))
    X[0] = config.dataset.x
    nodes = _node_quadratures(config.field, path)
    dt = grid.dt / substeps
    for k in range(grid.nt - 1):
        quad, fold = nodes[k]
        xk = X[k]
        for _ in range(substeps):
            xk = _rk4_forward(quad, fold, xk, dt)
        if not np.all(np.isfinite(xk)):
            raise DivergenceError(f"forward state diverged at node {k + 1}")
        X[k + 1] = xk
    return EnsembleFlow(x=X, y=config.dataset.y.copy())


def _rk4_forward(quad, fold, x, dt):
    k1 = fold.drift(quad.tiers(x, 0))
    k2 = fold.drift(quad.tiers(x + 0.5 * dt * k1, 0))
    k3 = fold.drift(quad.tiers(x + 0.5 * dt * k2, 0))
    k4 = fold.drift(quad.tiers(x + dt * k3, 0))
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _fine_forward_interval(quad, fold, x0, dt_interval, substeps):
    """Fine node values of X across one control interval."""
    dt = dt_interval / substeps
    out = np.empty((substeps + 1,) + x0.shape)
    out[0] = x0
    for s in range(substeps):
        out[s + 1] = _rk4_forward(quad, fold, out[s], dt)
    return out


# -- backward / tangent passes ----------------------------------------------------


def _hermite_midpoint(x_left, x_right, b_left, b_right, dt):
    """Cubic Hermite value at the interval midpoint from node data."""
    return 0.5 * (x_left + x_right) + 0.125 * dt * (b_left - b_right)


def _rk4_between(y, dt, f_left, f_mid, f_right):
    """One RK4 step of size dt with stage fields frozen per position."""
    k1 = f_left(y)
    k2 = f_mid(y + 0.5 * dt * k1)
    k3 = f_mid(y + 0.5 * dt * k2)
    k4 = f_right(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def backward_solve(
    config: ProblemConfig,
    path: ControlPath,
    flow: EnsembleFlow,
    substeps: int = 1,
    with_hessian: bool = False,
    bracket_grid: Optional[GridMeasure] = None,
) -> EnsembleFlow:
    """Transport the adjoint Z backward along the stored features.

    The terminal condition is assigned exactly from the loss gradient. When
    ``bracket_grid`` is given, the per-node grid samples of the averaged
    b . Z coupling are assembled from the same activation evaluations and
    stored on the returned flow. ``with_hessian`` additionally transports the
    second x-derivative of the value function along characteristics
    (d1 = 1 only).
    """
    grid = path.grid
    n, d1 = flow.n, config.field.d1
    if with_hessian and d1 != 1:
        raise ConfigError("hessian transport is implemented for d1 = 1 only")
    if bracket_grid is not None and not path.is_grid:
        raise ConfigError("bracket assembly requires a grid path")
    order = 2 if with_hessian else 1
    nodes = _node_quadratures(config.field, path)

    Z = np.empty_like(flow.x)
    z = config.loss.grad_x(flow.x[-1], flow.y)
    if faults.active("adjoint-sign"):
        z = -z
    Z[-1] = z
    H = None
    h = None
    if with_hessian:
        H = np.empty((grid.nt, n))
        h = np.ones(n)  # quadratic loss: terminal curvature is the identity
        H[-1] = h
    bracket = None
    if bracket_grid is not None:
        bracket = np.empty((grid.nt, bracket_grid.res**bracket_grid.dprime))

    # grid paths share one support, so activation tiers at a node can roll
    # from one interval to the next (each node is evaluated exactly once)
    can_roll = path.is_grid
    dt = grid.dt
    tiers_right = None
    for k in range(grid.nt - 2, -1, -1):
        quad, fold = nodes[k]
        if tiers_right is None or not can_roll:
            tiers_right = quad.tiers(flow.x[k + 1], order)
        if bracket is not None and k == grid.nt - 2:
            bracket[-1] = quad.bracket(tiers_right, Z[-1])
        tiers_left = quad.tiers(flow.x[k], order)
        if substeps == 1:
            x_mid = _hermite_midpoint(
                flow.x[k],
                flow.x[k + 1],
                fold.drift(tiers_left),
                fold.drift(tiers_right),
                dt,
            )
            tiers_mid = quad.tiers(x_mid, order)
            state = _pack_state(z, h, with_hessian, d1)
            state = _rk4_between(
                state,
                -dt,
                _adjoint_rhs(fold, tiers_right, with_hessian, d1),
                _adjoint_rhs(fold, tiers_mid, with_hessian, d1),
                _adjoint_rhs(fold, tiers_left, with_hessian, d1),
            )
            z, h = _unpack_state(state, with_hessian, d1)
        else:
            x_fine = _fine_forward_interval(quad, fold, flow.x[k], dt, substeps)
            dt_f = dt / substeps
            for s in range(substeps, 0, -1):
                t_r = quad.tiers(x_fine[s], order) if s < substeps else tiers_right
                t_l = quad.tiers(x_fine[s - 1], order) if s > 1 else tiers_left
                x_mid = _hermite_midpoint(
                    x_fine[s - 1], x_fine[s], fold.drift(t_l), fold.drift(t_r), dt_f
                )
                t_m = quad.tiers(x_mid, order)
                state = _pack_state(z, h, with_hessian, d1)
                state = _rk4_between(
                    state,
                    -dt_f,
                    _adjoint_rhs(fold, t_r, with_hessian, d1),
                    _adjoint_rhs(fold, t_m, with_hessian, d1),
                    _adjoint_rhs(fold, t_l, with_hessian, d1),
                )
                z, h = _unpack_state(state, with_hessian, d1)
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"backward state diverged at node {k}")
        Z[k] = z
        if with_hessian:
            H[k] = h
        if bracket is not None:
            bracket[k] = quad.bracket(tiers_left, z)
        tiers_right = tiers_left
    return replace(flow, z=Z, hess=H, bracket=bracket)


def _pack_state(z, h, with_hessian, d1):
    if with_hessian:
        return np.concatenate([z, h[:, None]], axis=-1)
    return z


def _unpack_state(state, with_hessian, d1):
    if with_hessian:
        return state[..., :d1], state[..., d1]
    return state, None


def _adjoint_rhs(fold, tiers, with_hessian, d1):
    bx = fold.grad_x(tiers)
    bxx = fold.grad_xx(tiers) if with_hessian else None

    def f(state):
        if with_hessian:
            zz, hh = state[..., :d1], state[..., d1]
            dz = -np.einsum("nij,ni->nj", bx, zz)
            dh = -2.0 * bx[:, 0, 0] * hh - bxx * zz[:, 0]
            return np.concatenate([dz, dh[:, None]], axis=-1)
        return -np.einsum("nij,ni->nj", bx, state)

    return f


def tangent_solve(
    config: ProblemConfig,
    path: ControlPath,
    flow: EnsembleFlow,
    eta: PerturbationPath,
) -> TangentFlow:
    """Tangent particles for the linearized continuity equation.

    Solves d(dX)/dt = grad_x b(X, nu_t) dX + b(X, eta_t), dX(t0) = 0 along the
    stored characteristics, with the same node-frozen control convention.
    """
    grid = path.grid
    if not path.is_grid:
        raise ConfigError("tangent solve requires the grid backend")
    if eta.grid.nt != grid.nt or not eta.matches(path.measures[0]):
        raise ConfigError("perturbation must live on the control path's grid")
    n, d1 = flow.n, config.field.d1
    nodes = _node_quadratures(config.field, path)
    vol = eta.cell_volume
    dX = np.zeros((grid.nt, n, d1))
    dx = np.zeros((n, d1))
    dt = grid.dt
    tiers_left = None
    for k in range(grid.nt - 1):
        quad, fold = nodes[k]
        eta_fold = quad.fold(eta.node(k).ravel() * vol)
        if tiers_left is None:
            tiers_left = quad.tiers(flow.x[k], 1)
        tiers_right = quad.tiers(flow.x[k + 1], 1)
        x_mid = _hermite_midpoint(
            flow.x[k],
            flow.x[k + 1],
            fold.drift(tiers_left),
            fold.drift(tiers_right),
            dt,
        )
        tiers_mid = quad.tiers(x_mid, 1)

        def rhs(tiers):
            bx = fold.grad_x(tiers)
            source = eta_fold.drift(tiers)

            def f(v):
                return np.einsum("nij,nj->ni", bx, v) + source

            return f

        dx = _rk4_between(dx, dt, rhs(tiers_left), rhs(tiers_mid), rhs(tiers_right))
        if not np.all(np.isfinite(dx)):
            raise DivergenceError(f"tangent state diverged at node {k + 1}")
        dX[k + 1] = dx
        tiers_left = tiers_right
    return TangentFlow(dx=dX, flow=flow, eta=eta)


def duality_residual(
    config: ProblemConfig,
    path: ControlPath,
    probe: ProbeFunction,
    flow: Optional[EnsembleFlow] = None,
) -> float:
    """Defect between the push-forward mean of a test function and its
    backward-transported counterpart evaluated on the initial ensemble.

    The transported side tracks the pair (value, x-gradient) of the test
    function backward along the linearly reconstructed characteristics; the
    along-path defect of that reconstruction is exactly what the returned
    residual measures, so it vanishes for constant tests or zero drift and
    shrinks at second order in the time step.
    """
    if flow is None:
        flow = forward_solve(config, path)
    grid = path.grid
    push_forward = float(np.mean(probe.value(flow.x[-1], flow.y)))
    psi = probe.value(flow.x[-1], flow.y).astype(float)
    g = probe.grad_x(flow.x[-1], flow.y).astype(float)
    nodes = _node_quadratures(config.field, path)
    dt = grid.dt
    for k in range(grid.nt - 2, -1, -1):
        quad, fold = nodes[k]
        chord = (flow.x[k + 1] - flow.x[k]) / dt
        x_mid = 0.5 * (flow.x[k] + flow.x[k + 1])
        stage_tiers = [
            quad.tiers(flow.x[k + 1], 1),
            quad.tiers(x_mid, 1),
            quad.tiers(flow.x[k], 1),
        ]

        def rhs(tiers):
            bx = fold.grad_x(tiers)
            defect = chord - fold.drift(tiers)

            def f(state):
                val_g = state[..., 1:]
                dpsi = np.einsum("ni,ni->n", defect, val_g)
                dg = -np.einsum("nij,ni->nj", bx, val_g)
                return np.concatenate([dpsi[:, None], dg], axis=-1)

            return f

        state = np.concatenate([psi[:, None], g], axis=-1)
        state = _rk4_between(
            state, -dt, rhs(stage_tiers[0]), rhs(stage_tiers[1]), rhs(stage_tiers[2])
        )
        psi, g = state[..., 0], state[..., 1:]
    transported = float(np.mean(psi))
    return abs(push_forward - transported)


# -- CSV export ------------------------------------------------------------------


def flow_to_csv(flow: EnsembleFlow, grid, stream, tangent: Optional[TangentFlow] = None):
    """One row per (node, particle) with t, x, y, z, dx columns."""
    d1 = flow.x.shape[2]
    d2 = flow.y.shape[1]
    cols = ["node", "particle", "t"]
    cols += [f"x{i}" for i in range(d1)]
    cols += [f"y{i}" for i in range(d2)]
    cols += [f"z{i}" for i in range(d1)]
    cols += [f"dx{i}" for i in range(d1)]
    stream.write(",".join(cols) + "\n")
    nodes = grid.nodes
    fmt = lambda v: format(float(v), ".17g")
    for k in range(flow.nt):
        for i in range(flow.n):
            row = [str(k), str(i), fmt(nodes[k])]
            row += [fmt(v) for v in flow.x[k, i]]
            row += [fmt(v) for v in flow.y[i]]
            if flow.z is not None:
                row += [fmt(v) for v in flow.z[k, i]]
            else:
                row += [""] * d1
            if tangent is not None:
                row += [fmt(v) for v in tangent.dx[k, i]]
            else:
                row += [""] * d1
            stream.write(",".join(row) + "\n")
