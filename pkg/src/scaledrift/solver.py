"""Damped Levenberg-Marquardt over products of manifold-valued variables.

A :class:`Problem` holds named *variable sets* (many variables of one
manifold type, stored as rows of a parameter array) and *residual groups*
(many residual blocks sharing one vectorised residual function).  Each
group slot names a variable set and carries one variable index per block,
which is what lets a thousand reprojection terms be evaluated with a single
numpy call.

Jacobians come from the group's analytic function when one is supplied and
from central differences on the tangent space otherwise.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import manifold as mf

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    """A residual or Jacobian evaluated to NaN or inf."""


# ---------------------------------------------------------------------------
# variable manifolds
# ---------------------------------------------------------------------------


class Euclidean:
    def __init__(self, dim: int):
        self.param_dim = dim
        self.tangent_dim = dim

    def retract(self, params: np.ndarray, delta: np.ndarray) -> np.ndarray:
        return params + delta


class SE3Manifold:
    """Rows ``(qw, qx, qy, qz, tx, ty, tz)``, left update ``exp(delta) T``."""

    param_dim = 7
    tangent_dim = 6

    def retract(self, params, delta):
        dq, dt = mf.se3_exp(delta)
        q = mf.quat_mul(dq, params[..., :4])
        t = mf.quat_rotate(dq, params[..., 4:7]) + dt
        q = q / np.linalg.norm(q, axis=-1, keepdims=True)
        return np.concatenate([q, t], axis=-1)


class Sim3Manifold:
    """Rows ``(qw, qx, qy, qz, tx, ty, tz, s)``, left update ``exp(delta) S``."""

    param_dim = 8
    tangent_dim = 7

    def retract(self, params, delta):
        dq, dt, ds = mf.sim3_exp(delta)
        q, t, s = mf.sim3_compose(dq, dt, ds, params[..., :4], params[..., 4:7], params[..., 7])
        q = q / np.linalg.norm(q, axis=-1, keepdims=True)
        return np.concatenate([q, t, s[..., None]], axis=-1)


# ---------------------------------------------------------------------------
# robust kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Huber:
    """Huber kernel on the *squared* residual norm ``s = r^T r``.

    ``rho(s) = s`` for ``s <= delta^2`` and ``2 delta sqrt(s) - delta^2``
    beyond, i.e. quadratic inside and linear in ``|r|`` outside.
    """

    delta: float

    def rho(self, s: np.ndarray) -> np.ndarray:
        d2 = self.delta * self.delta
        return np.where(s <= d2, s, 2.0 * self.delta * np.sqrt(np.maximum(s, d2)) - d2)

    def weight(self, s: np.ndarray) -> np.ndarray:
        d2 = self.delta * self.delta
        return np.where(s <= d2, 1.0, self.delta / np.sqrt(np.maximum(s, d2)))


# ---------------------------------------------------------------------------
# problem definition
# ---------------------------------------------------------------------------


@dataclass
class VariableSet:
    name: str
    manifold: object
    values: np.ndarray
    fixed: np.ndarray
    eliminate: bool = False


@dataclass
class ResidualGroup:
    """Vectorised residual blocks.

    ``func(*slot_params) -> (n, dim)`` receives one ``(n, param_dim)``
    array per slot.  ``jacobian`` (optional) has the same signature and
    returns one ``(n, dim, tangent_dim)`` array per slot.
    """

    name: str
    func: Callable
    slots: list[tuple[str, np.ndarray]]
    dim: int
    weight: float = 1.0
    loss: Huber | None = None
    jacobian: Callable | None = None


class Problem:
    def __init__(self):
        self.variables: dict[str, VariableSet] = {}
        self.groups: list[ResidualGroup] = []

    def add_variables(self, name, manifold, values, fixed=None, eliminate=False) -> None:
        """Register a variable set.

        ``eliminate=True`` marks a set whose variables are never coupled to
        each other by a residual (map points in BA); the solver then removes
        them from the normal equations by a block Schur complement.
        """
        values = np.array(values, dtype=float).reshape(-1, manifold.param_dim)
        if fixed is None:
            fixed = np.zeros(len(values), dtype=bool)
        self.variables[name] = VariableSet(name, manifold, values, np.asarray(fixed, dtype=bool).copy(), eliminate)

    def add_residuals(self, name, func, slots, dim, weight=1.0, loss=None, jacobian=None) -> None:
        norm_slots = []
        n = None
        for var, idx in slots:
            if var not in self.variables:
                raise KeyError(f"residual group {name!r} references unknown variable set {var!r}")
            idx = np.asarray(idx, dtype=np.int64).reshape(-1)
            if idx.size and (idx.min() < 0 or idx.max() >= len(self.variables[var].values)):
                raise IndexError(f"residual group {name!r} indexes outside variable set {var!r}")
            if n is not None and len(idx) != n:
                raise ValueError(f"residual group {name!r}: slot index arrays differ in length")
            n = len(idx)
            norm_slots.append((var, idx))
        if n == 0:
            return
        self.groups.append(ResidualGroup(name, func, norm_slots, dim, float(weight), loss, jacobian))

    def slot_params(self, group: ResidualGroup) -> list[np.ndarray]:
        return [self.variables[v].values[idx] for v, idx in group.slots]

    def cost(self) -> float:
        return float(sum(_group_cost(g, self.slot_params(g)) for g in self.groups))


def _group_cost(group: ResidualGroup, params: Sequence[np.ndarray]) -> float:
    r = group.func(*params)
    s = np.sum(r * r, axis=1)
    if group.loss is not None:
        s = group.loss.rho(s)
    return group.weight * float(np.sum(s))


# ---------------------------------------------------------------------------
# jacobians
# ---------------------------------------------------------------------------


def numeric_jacobian(func, params: Sequence[np.ndarray], manifolds, slot: int, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``func`` w.r.t. one slot's tangent.

    Returns ``(n, dim, tangent_dim)``.  Each row is perturbed only through
    its own slot variable, so rows sharing a variable do not contaminate
    each other.
    """
    if not step > 1e-15:
        raise ValueError(f"finite-difference step {step!r} underflows")
    man = manifolds[slot]
    base = params[slot]
    n = base.shape[0]
    cols = []
    for k in range(man.tangent_dim):
        d = np.zeros((n, man.tangent_dim))
        d[:, k] = step
        plus = list(params)
        minus = list(params)
        plus[slot] = man.retract(base, d)
        minus[slot] = man.retract(base, -d)
        cols.append((func(*plus) - func(*minus)) / (2.0 * step))
    return np.stack(cols, axis=-1)


def group_jacobians(problem: Problem, group: ResidualGroup, params=None, step: float = 1e-6):
    params = problem.slot_params(group) if params is None else params
    if group.jacobian is not None:
        return list(group.jacobian(*params))
    mans = [problem.variables[v].manifold for v, _ in group.slots]
    return [numeric_jacobian(group.func, params, mans, s, step) for s in range(len(group.slots))]


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


class Termination(enum.Enum):
    GRADIENT = "gradient_tolerance"
    COST = "cost_tolerance"
    STEP = "step_tolerance"
    MAX_ITERATIONS = "max_iterations"
    DAMPING_LIMIT = "damping_limit"
    NO_FREE_VARIABLES = "no_free_variables"


@dataclass
class SolverOptions:
    max_iterations: int = 100
    tol_gradient: float = 1e-8
    tol_cost: float = 1e-10
    tol_step: float = 1e-12
    initial_damping: float = 1e-4
    damping_decrease: float = 3.0
    damping_increase: float = 2.0
    min_damping: float = 1e-12
    max_damping: float = 1e12
    dense_below: int = 500
    numeric_step: float = 1e-6


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    termination_reason: Termination
    cost_history: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "converged": self.converged,
            "termination_reason": self.termination_reason.value,
        }


class _Layout:
    """Column offsets of the free variables in the stacked tangent vector.

    At most one eliminable set is placed last; ``schur`` then holds
    ``(first eliminated column, block size)``.
    """

    def __init__(self, problem: Problem):
        self.col_of = {}
        elim = [n for n, vs in problem.variables.items() if vs.eliminate]
        if len(elim) > 1 or any(sum(v in elim for v, _ in g.slots) > 1 for g in problem.groups):
            elim = []
        order = [n for n in problem.variables if n not in elim] + elim
        col = 0
        self.schur = None
        for name in order:
            vs = problem.variables[name]
            k = vs.manifold.tangent_dim
            if name in elim and np.any(~vs.fixed):
                self.schur = (col, k)
            cols = np.full(len(vs.values), -1, dtype=np.int64)
            free = np.flatnonzero(~vs.fixed)
            cols[free] = col + np.arange(len(free)) * k
            self.col_of[name] = cols
            col += len(free) * k
        self.ncols = col


def _linearize(problem: Problem, layout: _Layout, step: float):
    rows_i, cols_i, vals = [], [], []
    rvec = []
    row0 = 0
    cost = 0.0
    for g in problem.groups:
        params = problem.slot_params(g)
        r = g.func(*params)
        if not np.all(np.isfinite(r)):
            raise NonFiniteError(f"non-finite residual in group {g.name!r}")
        n, d = r.shape
        s = np.sum(r * r, axis=1)
        if g.loss is not None:
            cost += g.weight * float(np.sum(g.loss.rho(s)))
            w = g.weight * g.loss.weight(s)
        else:
            cost += g.weight * float(np.sum(s))
            w = np.full(n, g.weight)
        sw = np.sqrt(w)
        rvec.append((r * sw[:, None]).ravel())
        jacs = group_jacobians(problem, g, params, step)
        row_idx = row0 + np.arange(n * d).reshape(n, d)
        for (var, idx), J in zip(g.slots, jacs):
            if not np.all(np.isfinite(J)):
                raise NonFiniteError(f"non-finite Jacobian in group {g.name!r} (variable set {var!r})")
            base = layout.col_of[var][idx]
            live = base >= 0
            if not np.any(live):
                continue
            k = J.shape[2]
            Jw = J[live] * sw[live, None, None]
            rr = np.broadcast_to(row_idx[live][:, :, None], Jw.shape)
            cc = np.broadcast_to(base[live][:, None, None] + np.arange(k)[None, None, :], Jw.shape)
            rows_i.append(rr.ravel())
            cols_i.append(cc.ravel())
            vals.append(Jw.ravel())
        row0 += n * d
    r_all = np.concatenate(rvec) if rvec else np.zeros(0)
    if vals:
        J = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows_i), np.concatenate(cols_i))),
            shape=(row0, layout.ncols),
        )
    else:
        J = sp.csr_matrix((row0, layout.ncols))
    return cost, J, r_all


def _apply_step(problem: Problem, layout: _Layout, delta: np.ndarray) -> dict[str, np.ndarray]:
    new = {}
    for name, vs in problem.variables.items():
        cols = layout.col_of[name]
        free = cols >= 0
        vals = vs.values.copy()
        if np.any(free):
            k = vs.manifold.tangent_dim
            d = delta[cols[free][:, None] + np.arange(k)[None, :]]
            vals[free] = vs.manifold.retract(vs.values[free], d)
        new[name] = vals
    return new


def _solve_schur(H, g, start: int, k: int, dense_below: int) -> np.ndarray | None:
    """Solve with the block-diagonal tail eliminated; None if the tail is not block diagonal."""
    H = H.tocsr()
    n = H.shape[0]
    m = (n - start) // k
    C = H[start:, start:].tocoo()
    if np.any(C.row // k != C.col // k):
        return None
    blocks = np.zeros((m, k, k))
    np.add.at(blocks, (C.row // k, C.row % k, C.col % k), C.data)
    try:
        Cinv = np.linalg.inv(blocks)
    except np.linalg.LinAlgError:
        return None
    ii = np.arange(m)[:, None, None] * k
    rows = np.broadcast_to(ii + np.arange(k)[None, :, None], Cinv.shape).ravel()
    cols = np.broadcast_to(ii + np.arange(k)[None, None, :], Cinv.shape).ravel()
    Ci = sp.csr_matrix((Cinv.ravel(), (rows, cols)), shape=(n - start, n - start))
    A = H[:start, :start]
    B = H[:start, start:]
    ga, gc = g[:start], g[start:]
    BCi = B @ Ci
    S = A - BCi @ B.T
    rhs = -ga + BCi @ gc
    xa = _solve_normal(S, rhs, dense_below, negate=False)
    xc = Ci @ (-gc - B.T @ xa)
    return np.concatenate([xa, xc])


def _solve_normal(H, g, dense_below: int, negate: bool = True) -> np.ndarray:
    """Solve ``H x = -g`` (or ``H x = g`` with ``negate=False``)."""
    b = -g if negate else g
    n = H.shape[0]
    if n == 0:
        return np.zeros(0)
    if n < dense_below:
        Hd = H.toarray() if sp.issparse(H) else np.asarray(H)
        try:
            return np.linalg.solve(Hd, b)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(Hd, b, rcond=None)[0]
    return spla.spsolve(sp.csc_matrix(H), b)


def solve(problem: Problem, options: SolverOptions | None = None) -> SolveReport:
    """Minimise ``sum_g weight_g * sum_i rho(|r_i|^2)`` in place.

    The accepted-cost sequence is monotone non-increasing; rejected steps
    only raise the damping.
    """
    opt = options or SolverOptions()
    layout = _Layout(problem)
    cost, J, r = _linearize(problem, layout, opt.numeric_step)
    history = [cost]
    if layout.ncols == 0:
        return SolveReport(0, cost, cost, True, Termination.NO_FREE_VARIABLES, history)

    mu = opt.initial_damping
    initial = cost
    reason = Termination.MAX_ITERATIONS
    it = 0
    need_lin = False
    while it < opt.max_iterations:
        if need_lin:
            cost, J, r = _linearize(problem, layout, opt.numeric_step)
            need_lin = False
        g = J.T @ r
        if cost == 0.0 or np.max(np.abs(g)) < opt.tol_gradient:
            reason = Termination.GRADIENT
            break
        it += 1
        H = (J.T @ J).tocsr()
        diag = np.maximum(H.diagonal(), 1e-12)
        accepted = False
        while True:
            Hd = H + sp.diags(mu * diag)
            delta = None
            if layout.schur is not None:
                delta = _solve_schur(Hd, g, *layout.schur, opt.dense_below)
            if delta is None:
                delta = _solve_normal(Hd, g, opt.dense_below)
            if not np.all(np.isfinite(delta)):
                new_cost = np.inf
            else:
                trial = _apply_step(problem, layout, delta)
                saved = {n: vs.values for n, vs in problem.variables.items()}
                for n, v in trial.items():
                    problem.variables[n].values = v
                try:
                    new_cost = problem.cost()
                except FloatingPointError:
                    new_cost = np.inf
                if not np.isfinite(new_cost):
                    new_cost = np.inf
                if new_cost < cost:
                    accepted = True
                else:
                    for n, v in saved.items():
                        problem.variables[n].values = v
            if accepted:
                mu = max(mu / opt.damping_decrease, opt.min_damping)
                break
            mu *= opt.damping_increase
            if mu > opt.max_damping:
                log.warning("damping exceeded %.1e; stopping at cost %.6g", opt.max_damping, cost)
                reason = Termination.DAMPING_LIMIT
                break
            xnorm = sum(float(np.linalg.norm(vs.values)) for vs in problem.variables.values())
            if np.linalg.norm(delta) < opt.tol_step * (xnorm + opt.tol_step):
                reason = Termination.STEP
                break
        if not accepted:
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        history.append(new_cost)
        cost = new_cost
        need_lin = True
        if rel < opt.tol_cost:
            reason = Termination.COST
            break
    else:
        reason = Termination.MAX_ITERATIONS
    converged = reason in (Termination.GRADIENT, Termination.COST, Termination.STEP)
    return SolveReport(it, initial, cost, converged, reason, history)
