"""Second-order structure around a converged control.

The linearized triple consists of a signed zero-mass perturbation of the
control, the tangent curve it induces on the feature ensemble, and the
linearized multiplier transported backward. The quadratic form assembled from
them is the second derivative of the total cost along the perturbation; its
kernel directions are exactly the fixed points of the linear map realized by
``linear_map_image``, which powers the stability probe.

Everything here is Lagrangian: the tangent curve acts on test functions
through tangent particles, and the multiplier and its x-gradient are
accumulated along the stored characteristics (d1 = 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .measures import (
    ControlPath,
    GridMeasure,
    LOG_FLOOR,
    PerturbationPath,
    relative_entropy,
)
from .model import ConfigError, Dataset, FieldQuadrature, ProblemConfig
from .optimizer import gibbs_map_with_flow, total_cost
from .trajectories import (
    EnsembleFlow,
    TangentFlow,
    _hermite_midpoint,
    _node_quadratures,
    _rk4_between,
    forward_solve,
    tangent_solve,
)

__all__ = [
    "PerturbationPath",
    "LinearizedMultiplier",
    "SecondOrderReport",
    "rho_action",
    "solve_v",
    "eta_from",
    "linear_map_image",
    "quadratic_form",
    "cross_term_via_tangent",
    "cross_term_via_multiplier",
    "second_derivative_check",
    "stability_probe",
    "pl_scan",
]


@dataclass(frozen=True)
class LinearizedMultiplier:
    """Linearized backward multiplier along the stored characteristics.

    ``v`` and ``dv`` hold the multiplier and its x-gradient at the flow's
    (node, particle) grid; the probe evaluator re-solves short tail problems
    for off-ensemble values, giving an independent finite-difference route to
    the gradient.
    """

    v: np.ndarray  # (nt, n)
    dv: np.ndarray  # (nt, n)
    config: ProblemConfig
    path: ControlPath
    eta: PerturbationPath

    def value_probe(self, k: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """v at node k for arbitrary points, via fresh tail characteristics."""
        if k == self.config.grid.nt - 1:
            return np.zeros(np.atleast_2d(x).shape[0])
        tail_grid = self.config.grid.tail(k)
        tail_config = replace(
            self.config, dataset=Dataset(np.atleast_2d(x), np.atleast_2d(y)), grid=tail_grid
        )
        tail_path = ControlPath(tail_grid, self.path.measures[k:])
        tail_eta = PerturbationPath(
            tail_grid, self.eta.halfwidth, self.eta.res, self.eta.values[k:]
        )
        tail_flow = forward_solve(tail_config, tail_path)
        tail_v = solve_v(tail_config, tail_path, tail_flow, tail_eta)
        return tail_v.v[0]

    def grad_probe(self, k: int, x, y, delta: float = 1e-4) -> np.ndarray:
        """Central finite-difference x-gradient of v at probe points."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        up = self.value_probe(k, x + delta, y)
        dn = self.value_probe(k, x - delta, y)
        return (up - dn) / (2.0 * delta)


@dataclass(frozen=True)
class SecondOrderReport:
    jform: Optional[float] = None
    fd2: Optional[float] = None
    eta_residual: Optional[float] = None
    dominant_eig: Optional[float] = None
    pl_ratio: Optional[float] = None
    details: dict = field(default_factory=dict)


def _require_d1(config: ProblemConfig):
    if config.field.d1 != 1:
        raise ConfigError("linearization is implemented for d1 = 1")


def rho_action(tangent: TangentFlow, probe, k: int) -> float:
    """Action of the linearized curve on a C^1 test function at node k.

    Realizes the derivative of the push-forward: mean of grad_x(phi) . dX
    over the ensemble.
    """
    flow = tangent.flow
    g = probe.grad_x(flow.x[k], flow.y)
    return float(np.mean(np.sum(g * tangent.dx[k], axis=-1)))


def solve_v(
    config: ProblemConfig,
    path: ControlPath,
    flow: EnsembleFlow,
    eta: PerturbationPath,
) -> LinearizedMultiplier:
    """Backward transport of the linearized multiplier and its x-gradient.

    Along each characteristic the state (z, h, K, V, R) is integrated
    backward: adjoint z, value-function curvature h, terminal flow Jacobian
    K = dX_T/dX_t, accumulated multiplier V and the Jacobian-weighted
    gradient accumulator R with grad_x v = K R. The source terms use the
    signed drift of the perturbation, so the result is linear in it.
    """
    _require_d1(config)
    if not path.is_grid:
        raise ConfigError("linearized multiplier requires the grid backend")
    if eta.grid.nt != path.grid.nt or not eta.matches(path.measures[0]):
        raise ConfigError("perturbation must live on the control path's grid")
    grid = path.grid
    n = flow.n
    nodes = _node_quadratures(config.field, path)
    vol = eta.cell_volume
    dt = grid.dt

    V = np.empty((grid.nt, n))
    DV = np.empty((grid.nt, n))
    # state columns: z, h, K, V, R
    state = np.zeros((n, 5))
    state[:, 0] = config.loss.grad_x(flow.x[-1], flow.y)[:, 0]
    state[:, 1] = 1.0  # quadratic loss curvature
    state[:, 2] = 1.0  # Jacobian at the terminal time
    V[-1] = 0.0
    DV[-1] = 0.0

    tiers_right = None
    for k in range(grid.nt - 2, -1, -1):
        quad, fold = nodes[k]
        eta_fold = quad.fold(eta.node(k).ravel() * vol)
        if tiers_right is None:
            tiers_right = quad.tiers(flow.x[k + 1], 2)
        tiers_left = quad.tiers(flow.x[k], 2)
        x_mid = _hermite_midpoint(
            flow.x[k],
            flow.x[k + 1],
            fold.drift(tiers_left),
            fold.drift(tiers_right),
            dt,
        )
        tiers_mid = quad.tiers(x_mid, 2)

        def rhs(tiers):
            bx = fold.grad_x(tiers)[:, 0, 0]
            bxx = fold.grad_xx(tiers)
            s_eta = eta_fold.drift(tiers)[:, 0]
            sx_eta = eta_fold.grad_x(tiers)[:, 0, 0]

            def f(s):
                z, h, kk, _, _ = s.T
                gp = sx_eta * z + s_eta * h  # x-derivative of the source
                return np.stack(
                    [
                        -bx * z,
                        -2.0 * bx * h - bxx * z,
                        -bx * kk,
                        -s_eta * z,
                        -gp / kk,
                    ],
                    axis=1,
                )

            return f

        state = _rk4_between(
            state, -dt, rhs(tiers_right), rhs(tiers_mid), rhs(tiers_left)
        )
        V[k] = state[:, 3]
        DV[k] = state[:, 2] * state[:, 4]
        tiers_right = tiers_left
    return LinearizedMultiplier(v=V, dv=DV, config=config, path=path, eta=eta)


def eta_from(
    config: ProblemConfig,
    path: ControlPath,
    flow: EnsembleFlow,
    tangent: TangentFlow,
    multiplier: LinearizedMultiplier,
) -> PerturbationPath:
    """Kernel-direction image of the linearized system.

    At every node and support point the bracket combines the tangent action
    on b(., a) . grad_x(u) with the ensemble average of b(., a) . grad_x(v);
    centering by its control-average makes the node mass vanish exactly, and
    the result is scaled by -nu / epsilon.
    """
    _require_d1(config)
    if flow.hess is None:
        raise ConfigError("eta_from needs a flow with transported curvature")
    grid = path.grid
    template = path.measures[0]
    quad = FieldQuadrature(config.field, template.midpoints())
    vol = template.cell_volume
    shape = template.values.shape
    out = np.empty((grid.nt,) + shape)
    for k in range(grid.nt):
        tiers = quad.tiers(flow.x[k], 1)
        dxk = tangent.dx[k][:, 0]
        vec_dx = flow.z[k][:, 0] * dxk  # pairs with grad_x b
        vec_b = flow.hess[k] * dxk + multiplier.dv[k]  # pairs with b
        bracket = quad.bracket_pair(tiers, vec_dx, vec_b)
        nu = path.measures[k].values.ravel()
        c_k = float(np.sum(bracket * nu)) * vol
        out[k] = (-(nu * (bracket - c_k)) / config.epsilon).reshape(shape)
    return PerturbationPath(grid, template.halfwidth, template.res, out)


def linear_map_image(
    config: ProblemConfig,
    path: ControlPath,
    flow: EnsembleFlow,
    eta: PerturbationPath,
) -> PerturbationPath:
    """One application of the linearized fixed-point map."""
    tangent = tangent_solve(config, path, flow, eta)
    multiplier = solve_v(config, path, flow, eta)
    return eta_from(config, path, flow, tangent, multiplier)


def _bracket_series(config, path, flow, eta, tangent) -> np.ndarray:
    """Per-node values of the tangent action on b(., eta_t) . grad_x u."""
    if flow.hess is None:
        raise ConfigError("bracket series needs a flow with transported curvature")
    nodes = _node_quadratures(config.field, path)
    vol = eta.cell_volume
    out = np.empty(path.grid.nt)
    for k in range(path.grid.nt):
        quad, _ = nodes[k]
        eta_fold = quad.fold(eta.node(k).ravel() * vol)
        tiers = quad.tiers(flow.x[k], 1)
        s_eta = eta_fold.drift(tiers)[:, 0]
        sx_eta = eta_fold.grad_x(tiers)[:, 0, 0]
        integrand = sx_eta * flow.z[k][:, 0] + s_eta * flow.hess[k]
        out[k] = float(np.mean(integrand * tangent.dx[k][:, 0]))
    return out


def cross_term_via_tangent(config, path, flow, eta_bracket, tangent) -> float:
    """Time integral of < b(., eta^2) grad u ; rho^1 >.

    Accumulated per particle inside a backward RK4 pass, which restarts at
    every node and therefore respects the left-frozen control branches; the
    tangent values inside an interval are reconstructed by the same cubic
    Hermite rule the solvers use. The tangent must carry its source so the
    in-interval derivative of dX is available.
    """
    _require_d1(config)
    if tangent.eta is None:
        raise ConfigError("cross term needs a tangent that carries its source")
    grid = path.grid
    nodes = _node_quadratures(config.field, path)
    vol = eta_bracket.cell_volume
    dt = grid.dt
    n = flow.n
    # state columns: z, h, P (accumulated integrand)
    state = np.zeros((n, 3))
    state[:, 0] = config.loss.grad_x(flow.x[-1], flow.y)[:, 0]
    state[:, 1] = 1.0
    tiers_right = None
    for k in range(grid.nt - 2, -1, -1):
        quad, fold = nodes[k]
        e2_fold = quad.fold(eta_bracket.node(k).ravel() * vol)
        e1_fold = quad.fold(tangent.eta.node(k).ravel() * vol)
        if tiers_right is None:
            tiers_right = quad.tiers(flow.x[k + 1], 2)
        tiers_left = quad.tiers(flow.x[k], 2)
        x_mid = _hermite_midpoint(
            flow.x[k],
            flow.x[k + 1],
            fold.drift(tiers_left),
            fold.drift(tiers_right),
            dt,
        )
        tiers_mid = quad.tiers(x_mid, 2)
        dx_l = tangent.dx[k][:, 0]
        dx_r = tangent.dx[k + 1][:, 0]
        ddx_l = (
            fold.grad_x(tiers_left)[:, 0, 0] * dx_l
            + e1_fold.drift(tiers_left)[:, 0]
        )
        ddx_r = (
            fold.grad_x(tiers_right)[:, 0, 0] * dx_r
            + e1_fold.drift(tiers_right)[:, 0]
        )
        dx_m = _hermite_midpoint(dx_l, dx_r, ddx_l, ddx_r, dt)

        def rhs(tiers, dx_here):
            bx = fold.grad_x(tiers)[:, 0, 0]
            bxx = fold.grad_xx(tiers)
            s2 = e2_fold.drift(tiers)[:, 0]
            sx2 = e2_fold.grad_x(tiers)[:, 0, 0]

            def f(s):
                z, h = s[:, 0], s[:, 1]
                return np.stack(
                    [
                        -bx * z,
                        -2.0 * bx * h - bxx * z,
                        -(sx2 * z + s2 * h) * dx_here,
                    ],
                    axis=1,
                )

            return f

        state = _rk4_between(
            state,
            -dt,
            rhs(tiers_right, dx_r),
            rhs(tiers_mid, dx_m),
            rhs(tiers_left, dx_l),
        )
        tiers_right = tiers_left
    return float(np.mean(state[:, 2]))


def cross_term_via_multiplier(config, path, flow, eta_drift, multiplier) -> float:
    """Same quantity through the multiplier side of the duality relation.

    Re-integrates the multiplier states of ``multiplier.eta`` backward and
    accumulates the ensemble average of the signed drift of ``eta_drift``
    against the multiplier's x-gradient, inside the same RK4 pass.
    """
    _require_d1(config)
    grid = path.grid
    nodes = _node_quadratures(config.field, path)
    vol = eta_drift.cell_volume
    dt = grid.dt
    n = flow.n
    eta2 = multiplier.eta
    # state columns: z, h, K, R, W
    state = np.zeros((n, 5))
    state[:, 0] = config.loss.grad_x(flow.x[-1], flow.y)[:, 0]
    state[:, 1] = 1.0
    state[:, 2] = 1.0
    tiers_right = None
    for k in range(grid.nt - 2, -1, -1):
        quad, fold = nodes[k]
        e1_fold = quad.fold(eta_drift.node(k).ravel() * vol)
        e2_fold = quad.fold(eta2.node(k).ravel() * vol)
        if tiers_right is None:
            tiers_right = quad.tiers(flow.x[k + 1], 2)
        tiers_left = quad.tiers(flow.x[k], 2)
        x_mid = _hermite_midpoint(
            flow.x[k],
            flow.x[k + 1],
            fold.drift(tiers_left),
            fold.drift(tiers_right),
            dt,
        )
        tiers_mid = quad.tiers(x_mid, 2)

        def rhs(tiers):
            bx = fold.grad_x(tiers)[:, 0, 0]
            bxx = fold.grad_xx(tiers)
            s2 = e2_fold.drift(tiers)[:, 0]
            sx2 = e2_fold.grad_x(tiers)[:, 0, 0]
            s1 = e1_fold.drift(tiers)[:, 0]

            def f(s):
                z, h, kk, rr = s[:, 0], s[:, 1], s[:, 2], s[:, 3]
                gp = sx2 * z + s2 * h
                return np.stack(
                    [
                        -bx * z,
                        -2.0 * bx * h - bxx * z,
                        -bx * kk,
                        -gp / kk,
                        -s1 * kk * rr,
                    ],
                    axis=1,
                )

            return f

        state = _rk4_between(
            state, -dt, rhs(tiers_right), rhs(tiers_mid), rhs(tiers_left)
        )
        tiers_right = tiers_left
    return float(np.mean(state[:, 4]))


def quadratic_form(
    config: ProblemConfig,
    path: ControlPath,
    flow: EnsembleFlow,
    eta: PerturbationPath,
    tangent: Optional[TangentFlow] = None,
) -> float:
    """Second derivative of the cost along the perturbation.

    eps int eta^2 / nu plus twice the tangent cross term; +inf when the
    perturbation charges cells the control does not.
    """
    _require_d1(config)
    if flow.hess is None:
        raise ConfigError("quadratic form needs a flow with transported curvature")
    if tangent is None:
        tangent = tangent_solve(config, path, flow, eta)
    dt = path.grid.dt
    vol = eta.cell_volume
    weighted = 0.0
    for k in range(path.grid.nt - 1):
        nu = path.measures[k].values
        e = eta.node(k)
        charged = np.abs(e) > 0.0
        if np.any(charged & (nu <= 10.0 * LOG_FLOOR)):
            return math.inf
        ratio = np.zeros_like(e)
        np.divide(e * e, nu, out=ratio, where=nu > 10.0 * LOG_FLOOR)
        weighted += float(np.sum(ratio)) * vol * dt
    # left-rule cross term keeps the form consistent with the discrete cost
    # it curves (the entropy part of the cost uses the same rule)
    series = _bracket_series(config, path, flow, eta, tangent)
    cross = float(np.sum(series[:-1])) * dt
    return config.epsilon * weighted + 2.0 * cross


def perturbed_path(path: ControlPath, eta: PerturbationPath, lam: float) -> ControlPath:
    measures = []
    for k, nu in enumerate(path.measures):
        vals = nu.values + lam * eta.node(k)
        if np.min(vals) < 0.0:
            raise ConfigError("perturbed path leaves the density cone")
        measures.append(nu.with_values(vals))
    return path.replace_measures(measures)


def second_derivative_check(
    config: ProblemConfig,
    path: ControlPath,
    flow: EnsembleFlow,
    eta: PerturbationPath,
    lambdas=(1e-2, 1e-3),
    prior=None,
) -> SecondOrderReport:
    """Central second difference of the cost against the quadratic form."""
    jform = quadratic_form(config, path, flow, eta)
    j0 = total_cost(config, path, prior=prior).cost
    per_lambda = {}
    note = None
    usable = []
    for lam in lambdas:
        floor = float(
            np.min(
                [np.min(nu.values + lam * e) for nu, e in zip(path.measures, eta.values)]
            )
        )
        floor_minus = float(
            np.min(
                [np.min(nu.values - lam * e) for nu, e in zip(path.measures, eta.values)]
            )
        )
        if min(floor, floor_minus) < 0.0:
            note = f"ladder truncated at lambda={lam:g}: density would go negative"
            continue
        jp = total_cost(config, perturbed_path(path, eta, lam), prior=prior).cost
        jm = total_cost(config, perturbed_path(path, eta, -lam), prior=prior).cost
        per_lambda[lam] = (jp - 2.0 * j0 + jm) / lam**2
        usable.append(lam)
    fd2 = per_lambda[min(usable)] if usable else math.nan
    details = {"per_lambda": per_lambda}
    if note:
        details["note"] = note
    return SecondOrderReport(jform=jform, fd2=fd2, details=details)


def _w_dot(path: ControlPath, a: PerturbationPath, b: PerturbationPath) -> float:
    """L^2(1/nu) inner product in which the linearized map is symmetric."""
    vol = a.cell_volume
    dt = path.grid.dt
    total = 0.0
    for k in range(path.grid.nt - 1):
        nu = np.maximum(path.measures[k].values, LOG_FLOOR)
        total += float(np.sum(a.node(k) * b.node(k) / nu)) * vol * dt
    return total


def _tv_node_distance(a: PerturbationPath, b: PerturbationPath) -> float:
    vol = a.cell_volume
    return max(
        float(np.sum(np.abs(a.node(k) - b.node(k)))) * vol
        for k in range(a.grid.nt)
    )


def stability_probe(
    config: ProblemConfig,
    path: ControlPath,
    flow: EnsembleFlow,
    iters: int = 10,
    margin: float = 0.1,
    rng: Optional[np.random.Generator] = None,
) -> SecondOrderReport:
    """Krylov probe of the linearized fixed-point map.

    Nontrivial solutions of the linearized system are exactly fixed points of
    the map, so spectral distance of the sampled Ritz values from one is
    evidence (not proof) of stability. Reports the dominant eigenvalue
    estimate, the sup-node total-variation distance between the last iterate
    and its image, and the sampled spectrum.
    """
    _require_d1(config)
    rng = rng or np.random.default_rng(config.seed)
    template = path.measures[0]
    mids = template.midpoints()
    shape = template.values.shape
    seedfn = (
        np.cos(1.1 * mids[:, 0] - 0.7 * mids[:, 1])
        + 0.5 * np.sin(0.6 * mids[:, 1] + 0.3)
        + 0.2 * rng.standard_normal(mids.shape[0])
    ).reshape(shape)
    layers = []
    for k in range(path.grid.nt):
        nu = path.measures[k].values
        g = seedfn - float(np.sum(seedfn * nu)) * template.cell_volume
        layers.append(nu * g)
    eta = PerturbationPath(path.grid, template.halfwidth, template.res, np.stack(layers))

    basis = []
    h_entries = {}
    norm0 = math.sqrt(_w_dot(path, eta, eta))
    eta = eta.scaled(1.0 / norm0)
    basis.append(eta)
    last_image = None
    history = []
    breakdown = False
    for j in range(iters):
        image = linear_map_image(config, path, flow, basis[j])
        last_image = image
        rayleigh = _w_dot(path, basis[j], image)
        history.append(rayleigh)
        vec = image.values.copy()
        for i in range(len(basis)):
            coef = _w_dot(
                path,
                basis[i],
                PerturbationPath(path.grid, eta.halfwidth, eta.res, vec),
            )
            h_entries[(i, j)] = coef
            vec = vec - coef * basis[i].values
        rem = PerturbationPath(path.grid, eta.halfwidth, eta.res, vec)
        rem_norm = math.sqrt(max(_w_dot(path, rem, rem), 0.0))
        h_entries[(j + 1, j)] = rem_norm
        if rem_norm < 1e-12:
            breakdown = True
            break
        basis.append(rem.scaled(1.0 / rem_norm))
    m = len(history)
    H = np.zeros((m, m))
    for (i, j), val in h_entries.items():
        if i < m and j < m:
            H[i, j] = val
    ritz = np.linalg.eigvals(H[:m, :m])
    ritz = np.real_if_close(ritz, tol=1e6)
    dominant = float(np.real(ritz[np.argmax(np.abs(ritz))])) if m else math.nan
    spectrum_margin = float(np.min(np.abs(1.0 - ritz))) if m else math.nan
    eta_residual = (
        _tv_node_distance(last_image, basis[m - 1]) if last_image else math.nan
    )
    return SecondOrderReport(
        dominant_eig=dominant,
        eta_residual=eta_residual,
        details={
            "ritz": sorted(float(np.real(r)) for r in ritz),
            "margin_from_one": spectrum_margin,
            "stable_evidence": bool(spectrum_margin >= margin),
            "rayleigh_history": history,
            "breakdown": breakdown,
        },
    )


# -- empirical Polyak-Lojasiewicz scan ------------------------------------------


def _random_band_potential(mids, rng, waves=3, max_freq=1.5):
    out = np.zeros(mids.shape[0])
    for _ in range(waves):
        kvec = rng.uniform(-max_freq, max_freq, mids.shape[1])
        phase = rng.uniform(0.0, 2.0 * math.pi)
        out += rng.uniform(0.3, 1.0) * np.cos(mids @ kvec + phase)
    return out


def tilt_to_entropy(path, psi_grid, profile, target, max_refine=30):
    """Gibbs-tilt of every node measure, scaled to a prescribed path entropy.

    psi_grid is a bounded potential on the measure grid; profile weights it
    per node. The amplitude is fixed point-iterated using the locally
    quadratic amplitude-entropy relation.
    """
    grid = path.grid
    template = path.measures[0]

    def build(amplitude):
        measures = []
        for k in range(grid.nt):
            lv = np.log(np.maximum(path.measures[k].values, LOG_FLOOR)) + (
                amplitude * profile[k]
            ) * psi_grid
            measures.append(
                GridMeasure.from_log_values(template.halfwidth, template.res, lv)
            )
        return path.replace_measures(measures)

    def entropy_of(candidate):
        dt = grid.dt
        return sum(
            relative_entropy(candidate.measures[k], path.measures[k]) * dt
            for k in range(grid.nt - 1)
        )

    amplitude = 1.0
    candidate = build(amplitude)
    for _ in range(max_refine):
        ent = entropy_of(candidate)
        if ent <= 0.0:
            return None, 0.0
        ratio = target / ent
        if abs(ratio - 1.0) < 1e-6:
            break
        amplitude *= math.sqrt(ratio)
        candidate = build(amplitude)
    return candidate, entropy_of(candidate)


def pl_scan(
    config: ProblemConfig,
    path: ControlPath,
    j_star: float,
    radius: float = 0.1,
    samples: int = 200,
    rng: Optional[np.random.Generator] = None,
    prior=None,
) -> SecondOrderReport:
    """Empirical dissipation-to-suboptimality ratio inside an entropy ball.

    Draws Gibbs tilts of the converged control with random band-limited
    potentials (constant or single-bump in time), rescaled so the path
    entropy stays within radius^2, and reports the smallest sampled value of
    fisher / (cost - optimal cost); samples with a vanishing cost gap are
    excluded.
    """
    from .measures import path_entropy
    from .optimizer import _fisher_from_snapshots, _prior_for, terminal_cost

    rng = rng or np.random.default_rng(config.seed)
    prior = prior or _prior_for(config, path.measures[0])
    template = path.measures[0]
    mids = template.midpoints()
    shape = template.values.shape
    grid = path.grid
    rows = []
    best = math.inf
    for s in range(samples):
        psi = _random_band_potential(mids, rng).reshape(shape)
        if rng.random() < 0.5:
            profile = np.ones(grid.nt)
        else:
            center = rng.uniform(grid.t0, grid.horizon)
            width = rng.uniform(0.1, 0.4) * (grid.horizon - grid.t0)
            profile = np.exp(-(((grid.nodes - center) / width) ** 2))
        target = radius**2 * rng.uniform(0.2, 1.0)
        candidate, ent = tilt_to_entropy(path, psi, profile, target)
        if candidate is None:
            continue
        snapshots, flow = gibbs_map_with_flow(config, candidate)
        fisher = _fisher_from_snapshots(config, candidate, snapshots)
        # the gibbs map's flow already carries the pushed-forward ensemble
        cost = terminal_cost(config, flow) + config.epsilon * path_entropy(
            candidate, prior
        )
        gap = cost - j_star
        row = {
            "sample": s,
            "entropy": ent,
            "cost": cost,
            "gap": gap,
            "fisher": fisher,
        }
        if gap > 1e-12:
            row["ratio"] = fisher / gap
            best = min(best, fisher / gap)
        rows.append(row)
    ratio = best if math.isfinite(best) else math.nan
    return SecondOrderReport(
        pl_ratio=ratio,
        details={"rows": rows, "samples": samples, "radius": radius},
    )
