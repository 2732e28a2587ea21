"""Problem primitives: activation field, confinement potential, terminal loss,
dataset, time grid and the global problem configuration.

Conventions used throughout the package:

* feature points ``x`` live in R^d1, labels ``y`` in R^d2,
* network parameters ``a`` live in R^{dprime},
* ``b(x, a)`` is the parameterized velocity field, linear-in-``a`` growth,
* ``ell(a) = c1|a|^4 + c2|a|^2`` is the confinement potential of the prior.

All types are immutable after construction and their evaluation methods are
pure, so they are safe to share across threads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

RIDGE_OUTER = "ridge-with-outer-weight"
COMPONENTWISE = "componentwise-ridge"


class ConfigError(ValueError):
    """Raised for inconsistent or malformed problem configuration."""


def _tanh_tiers(z, order):
    t = np.tanh(z)
    if order == 0:
        return (t,)
    s1 = 1.0 - t * t
    if order == 1:
        return t, s1
    return t, s1, -2.0 * t * s1


def _logistic_tiers(z, order):
    s = 1.0 / (1.0 + np.exp(-z))
    if order == 0:
        return (s,)
    s1 = s * (1.0 - s)
    if order == 1:
        return s, s1
    return s, s1, s1 * (1.0 - 2.0 * s)


_SIGMAS = {"tanh": _tanh_tiers, "logistic": _logistic_tiers}


def _sigma_triplet(name):
    def call(z):
        return _SIGMAS[name](z, 2)

    return call


@dataclass(frozen=True)
class ActivationField:
    """Velocity field b(x, a) built from a scalar bounded activation.

    Two families are supported:

    * ``ridge-with-outer-weight``: b(x, a) = sigma(a1 . x + a2) a0 with
      a = (a0, a1, a2), dprime = 2 d1 + 1;
    * ``componentwise-ridge``: b_i(x, a) = sigma((A1 x)_i + (a2)_i) with
      a = (A1 row-major, a2), dprime = d1 (d1 + 1).

    Both satisfy b(x, 0) = 0; for the componentwise family this forces
    sigma(0) = 0, so only ``tanh`` is accepted there.
    """

    family: str = COMPONENTWISE
    sigma: str = "tanh"
    d1: int = 1

    def __post_init__(self):
        if self.family not in (RIDGE_OUTER, COMPONENTWISE):
            raise ConfigError(f"unknown field family {self.family!r}")
        if self.sigma not in _SIGMAS:
            raise ConfigError(f"unknown activation {self.sigma!r}")
        if self.d1 < 1:
            raise ConfigError("d1 must be >= 1")
        if self.family == COMPONENTWISE and self.sigma != "tanh":
            # sigma(0) != 0 would break b(x, 0) = 0 for this family.
            raise ConfigError(
                "componentwise-ridge requires an odd activation (tanh); "
                f"got {self.sigma!r}"
            )

    @property
    def dprime(self) -> int:
        if self.family == RIDGE_OUTER:
            return 2 * self.d1 + 1
        return self.d1 * (self.d1 + 1)

    def _split(self, a):
        d = self.d1
        if self.family == RIDGE_OUTER:
            return a[:d], a[d : 2 * d], a[2 * d]
        return a[: d * d].reshape(d, d), a[d * d :]

    # -- pointwise evaluation ------------------------------------------------

    def value(self, x, a):
        x = np.asarray(x, dtype=float).reshape(self.d1)
        a = np.asarray(a, dtype=float).reshape(self.dprime)
        sig = _sigma_triplet(self.sigma)
        if self.family == RIDGE_OUTER:
            a0, a1, a2 = self._split(a)
            s, _, _ = sig(a1 @ x + a2)
            return s * a0
        a1m, a2 = self._split(a)
        s, _, _ = sig(a1m @ x + a2)
        return s

    def jacobians(self, x, a):
        """Return (grad_x b, grad_a b) with shapes (d1, d1) and (d1, dprime)."""
        x = np.asarray(x, dtype=float).reshape(self.d1)
        a = np.asarray(a, dtype=float).reshape(self.dprime)
        d = self.d1
        sig = _sigma_triplet(self.sigma)
        if self.family == RIDGE_OUTER:
            a0, a1, a2 = self._split(a)
            z = a1 @ x + a2
            s, s1, _ = sig(z)
            gx = s1 * np.outer(a0, a1)
            ga = np.zeros((d, self.dprime))
            ga[:, :d] = s * np.eye(d)
            ga[:, d : 2 * d] = s1 * np.outer(a0, x)
            ga[:, 2 * d] = s1 * a0
            return gx, ga
        a1m, a2 = self._split(a)
        z = a1m @ x + a2
        s, s1, _ = sig(z)
        gx = s1[:, None] * a1m
        ga = np.zeros((d, self.dprime))
        for i in range(d):
            ga[i, i * d : (i + 1) * d] = s1[i] * x
            ga[i, d * d + i] = s1[i]
        return gx, ga

    # -- batched evaluation (hot path for the solvers) -----------------------

    def batch(self, X, A, derivatives=0):
        """Evaluate b on all pairs of rows of X (n, d1) and A (m, dprime).

        Returns a dict with key ``b`` of shape (n, m, d1) and, for
        ``derivatives >= 1``, ``bx`` (n, m, d1, d1); for ``derivatives >= 2``
        additionally ``bxx``, the second x-derivative contracted for d1 = 1
        (shape (n, m, 1, 1, 1) is collapsed to (n, m)). Second derivatives are
        only provided for d1 = 1.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        A = np.atleast_2d(np.asarray(A, dtype=float))
        d = self.d1
        sig = _sigma_triplet(self.sigma)
        out = {}
        if self.family == RIDGE_OUTER:
            a0 = A[:, :d]
            a1 = A[:, d : 2 * d]
            a2 = A[:, 2 * d]
            z = np.einsum("nk,mk->nm", X, a1) + a2
            s, s1, s2 = sig(z)
            out["b"] = s[:, :, None] * a0[None, :, :]
            if derivatives >= 1:
                out["bx"] = np.einsum("nm,mi,mj->nmij", s1, a0, a1)
            if derivatives >= 2:
                if d != 1:
                    raise NotImplementedError("second x-derivatives: d1 = 1 only")
                out["bxx"] = s2 * a0[None, :, 0] * a1[None, :, 0] ** 2
            return out
        a1m = A[:, : d * d].reshape(-1, d, d)
        a2 = A[:, d * d :]
        z = np.einsum("nk,mik->nmi", X, a1m) + a2[None, :, :]
        s, s1, s2 = sig(z)
        out["b"] = s
        if derivatives >= 1:
            out["bx"] = s1[:, :, :, None] * a1m[None, :, :, :]
        if derivatives >= 2:
            if d != 1:
                raise NotImplementedError("second x-derivatives: d1 = 1 only")
            out["bxx"] = s2[:, :, 0] * a1m[None, :, 0, 0] ** 2
        return out

    def grad_a_batch(self, X, A):
        """grad_a b on all pairs, shape (n, m, d1, dprime)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n, m, d = X.shape[0], A.shape[0], self.d1
        sig = _sigma_triplet(self.sigma)
        ga = np.zeros((n, m, d, self.dprime))
        if self.family == RIDGE_OUTER:
            a0 = A[:, :d]
            a1 = A[:, d : 2 * d]
            a2 = A[:, 2 * d]
            z = np.einsum("nk,mk->nm", X, a1) + a2
            s, s1, _ = sig(z)
            ga[:, :, :, :d] = s[:, :, None, None] * np.eye(d)
            ga[:, :, :, d : 2 * d] = np.einsum("nm,mi,nj->nmij", s1, a0, X)
            ga[:, :, :, 2 * d] = s1[:, :, None] * a0[None, :, :]
            return ga
        a1m = A[:, : d * d].reshape(-1, d, d)
        a2 = A[:, d * d :]
        z = np.einsum("nk,mik->nmi", X, a1m) + a2[None, :, :]
        _, s1, _ = sig(z)
        for i in range(d):
            ga[:, :, i, i * d : (i + 1) * d] = s1[:, :, i, None] * X[:, None, :]
            ga[:, :, i, d * d + i] = s1[:, :, i]
        return ga


class FieldQuadrature:
    """Field-times-measure reductions over a fixed support point set.

    Separates the expensive activation evaluation (``tiers``, per state
    batch) from the cheap weight contractions (``fold``), so a backward pass
    can reuse one tier set against several weight vectors and cache tiers at
    shared positions. For d1 = 1 the contraction kernels fold the parameter
    columns into the weights and never materialize (n, m, d1, d1) arrays.
    """

    def __init__(self, field: ActivationField, support: np.ndarray):
        self.field = field
        self.support = np.atleast_2d(np.asarray(support, dtype=float))
        self.fast = field.d1 == 1
        if self.fast:
            # contiguous parameter columns keep the outer products on the
            # fast ufunc path
            if field.family == RIDGE_OUTER:
                self._a0 = np.ascontiguousarray(self.support[:, 0])
                self._a1 = np.ascontiguousarray(self.support[:, 1])
                self._a2 = np.ascontiguousarray(self.support[:, 2])
            else:
                self._a1 = np.ascontiguousarray(self.support[:, 0])
                self._a2 = np.ascontiguousarray(self.support[:, 1])
                self._a0 = None

    def tiers(self, X, order: int):
        """Activation tiers at the given states; order in {0, 1, 2}."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.fast:
            z = np.multiply.outer(np.ascontiguousarray(X[:, 0]), self._a1)
            z += self._a2
            if self.field.sigma == "tanh":
                t = np.tanh(z, out=z)
                if order == 0:
                    return (t,)
                s1 = 1.0 - t * t
                if order == 1:
                    return t, s1
                return t, s1, -2.0 * t * s1
            return _SIGMAS[self.field.sigma](z, order)
        return self.field.batch(X, self.support, derivatives=order)

    def fold(self, weights: np.ndarray) -> "WeightFold":
        return WeightFold(self, np.asarray(weights, dtype=float))

    def bracket(self, tiers, z_ens: np.ndarray) -> np.ndarray:
        """Support samples of mean_i b(x_i, .) . z_i from precomputed tiers."""
        n = z_ens.shape[0]
        if self.fast:
            out = np.einsum("nm,n->m", tiers[0], z_ens[:, 0]) / n
            if self._a0 is not None:
                out = out * self._a0
            return out
        return np.einsum("nmi,ni->m", tiers["b"], z_ens) / n

    def raw_values(self, tiers) -> np.ndarray:
        """b on all (state, support) pairs, shape (n, m, d1)."""
        if self.fast:
            s = tiers[0]
            if self._a0 is not None:
                return (s * self._a0)[:, :, None]
            return s[:, :, None]
        return tiers["b"]

    def bracket_pair(self, tiers, vec_dx: np.ndarray, vec_b: np.ndarray) -> np.ndarray:
        """Support samples of mean_i [grad_x b . vec_dx_i + b . vec_b_i].

        Both vectors are per-ensemble scalars (d1 = 1); used to assemble the
        linearized bracket on the measure grid.
        """
        n = vec_b.shape[0]
        if self.fast:
            term_b = np.einsum("nm,n->m", tiers[0], vec_b)
            term_dx = np.einsum("nm,n->m", tiers[1], vec_dx)
            if self._a0 is not None:
                return (term_b * self._a0 + term_dx * self._a0 * self._a1) / n
            return (term_b + term_dx * self._a1) / n
        if self.field.d1 != 1:
            raise ConfigError("bracket_pair is implemented for d1 = 1")
        b = tiers["b"][:, :, 0]
        bx = tiers["bx"][:, :, 0, 0]
        return (
            np.einsum("nm,n->m", b, vec_b) + np.einsum("nm,n->m", bx, vec_dx)
        ) / n


class WeightFold:
    """Contractions of one weight vector against FieldQuadrature tiers."""

    def __init__(self, quad: FieldQuadrature, weights: np.ndarray):
        self.quad = quad
        self.w = weights
        if quad.fast:
            if quad._a0 is not None:
                self._w_drift = weights * quad._a0
                self._w_gx = self._w_drift * quad._a1
                self._w_gxx = self._w_gx * quad._a1
            else:
                self._w_drift = weights
                self._w_gx = weights * quad._a1
                self._w_gxx = self._w_gx * quad._a1

    def drift(self, tiers) -> np.ndarray:
        if self.quad.fast:
            return np.einsum("nm,m->n", tiers[0], self._w_drift)[:, None]
        return np.einsum("nmi,m->ni", tiers["b"], self.w)

    def grad_x(self, tiers) -> np.ndarray:
        if self.quad.fast:
            return np.einsum("nm,m->n", tiers[1], self._w_gx)[:, None, None]
        return np.einsum("nmij,m->nij", tiers["bx"], self.w)

    def grad_xx(self, tiers) -> np.ndarray:
        if self.quad.fast:
            return np.einsum("nm,m->n", tiers[2], self._w_gxx)
        return np.einsum("nm,m->n", tiers["bxx"], self.w)


@dataclass(frozen=True)
class ConfinementPotential:
    """ell(a) = c1 |a|^4 + c2 |a|^2, strongly convex with quartic growth."""

    c1: float = 0.25
    c2: float = 0.5

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ConfigError("potential coefficients must be positive")

    def value(self, a):
        a = np.asarray(a, dtype=float)
        r2 = np.sum(a * a, axis=-1)
        return self.c1 * r2 * r2 + self.c2 * r2

    def grad(self, a):
        a = np.asarray(a, dtype=float)
        r2 = np.sum(a * a, axis=-1, keepdims=True)
        return (4.0 * self.c1 * r2 + 2.0 * self.c2) * a

    def hessian(self, a):
        a = np.asarray(a, dtype=float).reshape(-1)
        d = a.size
        r2 = float(a @ a)
        return (4.0 * self.c1 * r2 + 2.0 * self.c2) * np.eye(d) + (
            8.0 * self.c1
        ) * np.outer(a, a)

    @property
    def convexity_constant(self) -> float:
        """c with hess(ell)(a) >= c (1 + |a|^2) Id for all a."""
        return min(4.0 * self.c1, 2.0 * self.c2)


@dataclass(frozen=True)
class TerminalLoss:
    """Quadratic regression loss L(x, y) = |x - y|^2 / 2."""

    kind: str = "quadratic"
    d1: int = 1
    d2: int = 1

    def __post_init__(self):
        if self.kind != "quadratic":
            raise ConfigError(f"unsupported loss kind {self.kind!r}")
        if self.d1 != self.d2:
            raise ConfigError("quadratic loss requires d1 == d2")

    def value(self, x, y):
        diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        return 0.5 * np.sum(diff * diff, axis=-1)

    def grad_x(self, x, y):
        return np.asarray(x, dtype=float) - np.asarray(y, dtype=float)

    def hess_x(self, x, y):
        return np.eye(self.d1)


@dataclass(frozen=True)
class Dataset:
    """Finite sample of (feature, label) pairs with uniform weights 1/N."""

    x: np.ndarray  # (N, d1)
    y: np.ndarray  # (N, d2)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if x.shape[0] != y.shape[0]:
            raise ConfigError("feature/label counts differ")
        if x.shape[0] < 1:
            raise ConfigError("dataset must contain at least one point")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ConfigError("dataset contains non-finite entries")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @classmethod
    def from_pairs(cls, points):
        pts = [np.asarray(p, dtype=float).ravel() for p in points]
        if not pts:
            raise ConfigError("dataset must contain at least one point")
        width = pts[0].size
        if width < 2 or any(p.size != width for p in pts):
            raise ConfigError("dataset points must share a common (x, y) width")
        arr = np.vstack(pts)
        # without explicit dimensions, split evenly (d1 == d2)
        if width % 2:
            raise ConfigError("cannot infer d1/d2 from odd-width points")
        half = width // 2
        return cls(arr[:, :half], arr[:, half:])


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition t0 = tau_0 < ... < tau_{nt-1} = T."""

    t0: float = 0.0
    horizon: float = 1.0
    nt: int = 65

    def __post_init__(self):
        if not (0.0 <= self.t0 < self.horizon):
            raise ConfigError("need 0 <= t0 < T")
        if self.nt < 2:
            raise ConfigError("need at least two time nodes")

    @property
    def dt(self) -> float:
        return (self.horizon - self.t0) / (self.nt - 1)

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.nt)

    def tail(self, k: int) -> "TimeGrid":
        """Sub-grid starting at interior node k (restart problems)."""
        if not 0 <= k < self.nt - 1:
            raise ConfigError("tail start must be an interior node")
        return TimeGrid(self.nodes[k], self.horizon, self.nt - k)


@dataclass(frozen=True)
class ProblemConfig:
    epsilon: float
    field: ActivationField
    potential: ConfinementPotential
    loss: TerminalLoss
    dataset: Dataset
    grid: TimeGrid
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.loss.d1 != self.field.d1:
            raise ConfigError("loss and field disagree on d1")
        if self.dataset.x.shape[1] != self.field.d1:
            raise ConfigError("dataset features do not match field dimension d1")
        if self.dataset.y.shape[1] != self.loss.d2:
            raise ConfigError("dataset labels do not match loss dimension d2")
        if not -(2**63) <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in 64 bits")


# -- spec-level operation entry points ---------------------------------------


def eval_field(field: ActivationField, x, a) -> np.ndarray:
    return field.value(x, a)


def grad_field(field: ActivationField, x, a):
    return field.jacobians(x, a)


def eval_potential(potential: ConfinementPotential, a):
    """Return (value, gradient, smallest Hessian eigenvalue) at a."""
    a = np.asarray(a, dtype=float).reshape(-1)
    value = float(potential.value(a))
    grad = potential.grad(a)
    min_eig = float(np.linalg.eigvalsh(potential.hessian(a))[0])
    return value, grad, min_eig


def eval_loss(loss: TerminalLoss, x, y):
    return float(loss.value(x, y)), loss.grad_x(x, y)


# -- configuration document ---------------------------------------------------

_FIELD_KEYS = {"family", "sigma", "d1"}
_POTENTIAL_KEYS = {"c1", "c2"}
_LOSS_KEYS = {"kind", "d1", "d2"}
_DATASET_KEYS = {"points"}
_GRID_KEYS = {"t0", "T", "nt"}
_PROBLEM_KEYS = {"epsilon", "seed", "field", "potential", "loss", "dataset", "grid"}


def _reject_unknown(section: dict, allowed: set, where: str):
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown configuration key {where}{key!r}")


def load_problem_config(doc: dict) -> ProblemConfig:
    """Build a ProblemConfig from a parsed JSON document; unknown keys fail."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration document must be a JSON object")
    _reject_unknown(doc, _PROBLEM_KEYS, "")
    for name in ("epsilon", "dataset", "grid"):
        if name not in doc:
            raise ConfigError(f"missing configuration key {name!r}")

    fsec = dict(doc.get("field", {}))
    _reject_unknown(fsec, _FIELD_KEYS, "field.")
    field = ActivationField(
        family=fsec.get("family", COMPONENTWISE),
        sigma=fsec.get("sigma", "tanh"),
        d1=int(fsec.get("d1", 1)),
    )

    psec = dict(doc.get("potential", {}))
    _reject_unknown(psec, _POTENTIAL_KEYS, "potential.")
    potential = ConfinementPotential(
        c1=float(psec.get("c1", 0.25)), c2=float(psec.get("c2", 0.5))
    )

    lsec = dict(doc.get("loss", {}))
    _reject_unknown(lsec, _LOSS_KEYS, "loss.")
    loss = TerminalLoss(
        kind=lsec.get("kind", "quadratic"),
        d1=int(lsec.get("d1", field.d1)),
        d2=int(lsec.get("d2", field.d1)),
    )

    dsec = dict(doc["dataset"])
    _reject_unknown(dsec, _DATASET_KEYS, "dataset.")
    if "points" not in dsec:
        raise ConfigError("missing configuration key 'dataset.points'")
    dataset = Dataset.from_pairs(dsec["points"])

    gsec = dict(doc["grid"])
    _reject_unknown(gsec, _GRID_KEYS, "grid.")
    grid = TimeGrid(
        t0=float(gsec.get("t0", 0.0)),
        horizon=float(gsec.get("T", 1.0)),
        nt=int(gsec.get("nt", 65)),
    )

    return ProblemConfig(
        epsilon=float(doc["epsilon"]),
        field=field,
        potential=potential,
        loss=loss,
        dataset=dataset,
        grid=grid,
        seed=int(doc.get("seed", 0)),
    )


def problem_config_to_doc(config: ProblemConfig) -> dict:
    pts = np.hstack([config.dataset.x, config.dataset.y])
    return {
        "epsilon": config.epsilon,
        "seed": config.seed,
        "field": {
            "family": config.field.family,
            "sigma": config.field.sigma,
            "d1": config.field.d1,
        },
        "potential": {"c1": config.potential.c1, "c2": config.potential.c2},
        "loss": {"kind": config.loss.kind, "d1": config.loss.d1, "d2": config.loss.d2},
        "dataset": {"points": [list(map(float, row)) for row in pts]},
        "grid": {
            "t0": config.grid.t0,
            "T": config.grid.horizon,
            "nt": config.grid.nt,
        },
    }


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Counter-based generator for a named random stream.

    Every stream is derived from the single 64-bit problem seed plus a stable
    hash of its purpose label, so runs are reproducible and independent
    streams never overlap.
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    ss = np.random.SeedSequence(entropy=[int(seed) & (2**64 - 1), key])
    return np.random.Generator(np.random.Philox(ss))


def config_digest(doc: dict) -> str:
    """Stable digest of a configuration document (canonical JSON)."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
