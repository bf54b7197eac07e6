"""Geometric programs in log-coefficient form and a barrier solver for them.

A monomial ``c * prod_k x_k^{a_k}`` is stored as ``(log c, a)`` and a
posynomial as a stack of monomials, so coefficients such as
``lambda^(2n) N^n`` never overflow.  With ``x = exp(y)`` a posynomial
constraint ``f(x) <= 1`` becomes ``logsumexp(A y + b) <= 0`` (convex) and a
monomial equality becomes the linear equation ``a . y = -log c``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .core import ConvergenceError, InfeasibleError

GAP_FLOOR = 1e-7
MAX_LOG_STEP = 5.0

__all__ = [
    "Posynomial",
    "Constraint",
    "GeometricProgram",
    "GPResult",
    "solve_gp",
]


@dataclass(frozen=True)
class Posynomial:
    """``sum_j exp(log_coef[j]) * prod_k x_k ** exponents[j, k]``."""

    log_coef: np.ndarray
    exponents: np.ndarray

    def __post_init__(self):
        lc = np.atleast_1d(np.asarray(self.log_coef, dtype=float))
        ex = np.atleast_2d(np.asarray(self.exponents, dtype=float))
        if ex.shape[0] != lc.size:
            raise ValueError("one exponent row per monomial term is required")
        if not np.all(np.isfinite(lc)):
            raise ValueError("monomial coefficients must be strictly positive and finite")
        object.__setattr__(self, "log_coef", lc)
        object.__setattr__(self, "exponents", ex)

    @classmethod
    def from_terms(cls, nvars: int, terms) -> "Posynomial":
        """Build from ``(log_coef, {var_index: exponent})`` pairs."""
        lc, rows = [], []
        for c, powers in terms:
            row = np.zeros(nvars)
            for k, a in powers.items():
                row[k] += a
            lc.append(c)
            rows.append(row)
        return cls(np.array(lc), np.array(rows).reshape(len(rows), nvars))

    @property
    def num_terms(self) -> int:
        return int(self.log_coef.size)

    @property
    def is_monomial(self) -> bool:
        return self.num_terms == 1

    def log_value(self, y: np.ndarray) -> float:
        return float(logsumexp(self.exponents @ y + self.log_coef))

    def __call__(self, x) -> float:
        return float(np.exp(self.log_value(np.log(np.asarray(x, dtype=float)))))


@dataclass(frozen=True)
class Constraint:
    """``posynomial <= 1`` (``strict`` means ``< 1``), or ``== 1`` for monomials."""

    posynomial: Posynomial
    kind: str = "<="
    strict: bool = False
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("<=", "=="):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "==" and not self.posynomial.is_monomial:
            raise ValueError("equality constraints must be monomials")


@dataclass
class GeometricProgram:
    """Minimise a posynomial subject to posynomial and monomial constraints.

    ``x0`` is an optional starting point; it need not be feasible.
    """

    variables: list[str]
    objective: Posynomial
    constraints: list[Constraint] = field(default_factory=list)
    x0: np.ndarray | None = None

    def __post_init__(self):
        k = len(self.variables)
        for p in [self.objective] + [c.posynomial for c in self.constraints]:
            if p.exponents.shape[1] != k:
                raise ValueError("posynomial width does not match the number of variables")
        used = np.any(self.objective.exponents != 0, axis=0)
        for c in self.constraints:
            used |= np.any(c.posynomial.exponents != 0, axis=0)
        if not np.all(used):
            unused = [v for v, u in zip(self.variables, used) if not u]
            raise ValueError(f"variables never used: {unused}")

    @property
    def inequalities(self) -> list[Constraint]:
        return [c for c in self.constraints if c.kind == "<="]

    @property
    def equalities(self) -> list[Constraint]:
        return [c for c in self.constraints if c.kind == "=="]

    def index(self, name: str) -> int:
        return self.variables.index(name)


@dataclass(frozen=True)
class GPResult:
    x: np.ndarray
    objective: float
    stats: dict


class _LogSumExp:
    """Value, gradient and Hessian of ``y -> logsumexp(A y + b) + shift``."""

    def __init__(self, p: Posynomial, shift: float = 0.0):
        self.A = p.exponents
        self.b = p.log_coef
        self.shift = shift

    def value(self, y):
        return float(logsumexp(self.A @ y + self.b)) + self.shift

    def derivs(self, y):
        z = self.A @ y + self.b
        w = softmax(z)
        g = self.A.T @ w
        H = self.A.T @ (w[:, None] * self.A) - np.outer(g, g)
        return float(logsumexp(z)) + self.shift, g, H


def _newton_centering(obj_derivs, cons, G, y, t, max_iter, tol=1e-9, stop=None):
    """Minimise ``t f0(y) - sum log(-f_i(y))`` over ``G y = const`` from a strictly feasible ``y``.

    Returns ``(y, iterations, decrement, converged)``.  ``converged`` is False
    when the iteration stalls at the floating-point floor (line search cannot
    make progress) or runs out of iterations.
    """
    k = y.size
    p = G.shape[0]
    alpha, beta = 0.25, 0.5

    def phi(y):
        vals = np.array([c.value(y) for c in cons])
        if np.any(vals >= 0) or not np.all(np.isfinite(vals)):
            return np.inf
        return t * obj_derivs(y)[0] - np.sum(np.log(-vals))

    decrement = np.inf
    best, stall = np.inf, 0
    for its in range(1, max_iter + 1):
        f0, g0, H0 = obj_derivs(y)
        grad = t * g0
        hess = t * H0
        for c in cons:
            fi, gi, Hi = c.derivs(y)
            grad += gi / -fi
            hess += Hi / -fi + np.outer(gi, gi) / fi ** 2
        ridge = 1e-14 * max(1.0, np.trace(hess) / k)
        kkt = np.zeros((k + p, k + p))
        kkt[:k, :k] = hess + ridge * np.eye(k)
        kkt[:k, k:] = G.T
        kkt[k:, :k] = G
        rhs = np.concatenate([-grad, np.zeros(p)])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        dy = sol[:k]
        decrement = float(-grad @ dy)
        # below this the barrier value itself is dominated by rounding
        noise = 1e-14 * (abs(t * f0) + sum(abs(np.log(-c.value(y))) for c in cons))
        if decrement / 2 <= max(tol, noise):
            return y, its, decrement, True
        if decrement < best * 0.5 or decrement > 1e-3:
            best, stall = min(best, decrement), 0
        else:
            stall += 1
            if stall >= 20:
                return y, its, decrement, False
        # trust cap in log space: near-linear log-sum-exp terms leave the
        # Hessian almost singular far from the optimum
        step = min(1.0, MAX_LOG_STEP / max(float(np.max(np.abs(dy))), 1e-300))
        base = phi(y)
        while True:
            cand = y + step * dy
            val = phi(cand)
            if val <= base - alpha * step * decrement:
                break
            step *= beta
            if step < 1e-20:
                return y, its, decrement, False
        y = cand
        if stop is not None and stop(y):
            return y, its, decrement, True
    return y, max_iter, decrement, False


def _project(G, h, y):
    if G.shape[0] == 0:
        return y
    r = h - G @ y
    return y + np.linalg.lstsq(G, r, rcond=None)[0]


def solve_gp(gp: GeometricProgram, tol: float = 1e-12, epsilon_margin: float = 1e-9,
             mu: float = 20.0, max_newton: int = 200, max_outer: int = 200) -> GPResult:
    """Solve ``gp`` with a log-barrier method on the convex (log-variable) form.

    Strict constraints are tightened to ``log f <= -epsilon_margin``.  The
    barrier parameter grows by ``mu`` until the duality-gap bound
    ``(#inequalities) / t`` falls below ``tol``; the objective therefore
    carries a relative error of about ``tol``.  A phase-I problem
    ``min s  s.t.  log f_i(y) <= s`` is solved first when ``gp.x0`` is missing
    or infeasible.

    Returns the solution in the original (positive) variables.

    Raises
    ------
    InfeasibleError
        If phase I certifies that no strictly feasible point exists.
    ConvergenceError
        If Newton centering stalls; the incumbent is attached.
    """
    k = len(gp.variables)
    ineq = gp.inequalities
    eq = gp.equalities
    G = np.array([c.posynomial.exponents[0] for c in eq]).reshape(len(eq), k)
    h = np.array([-c.posynomial.log_coef[0] for c in eq])
    cons = [_LogSumExp(c.posynomial, epsilon_margin if c.strict else 0.0) for c in ineq]
    objective = _LogSumExp(gp.objective)

    y = np.log(gp.x0) if gp.x0 is not None else np.zeros(k)
    y = _project(G, h, y)
    stats = {"newton_iterations": 0, "outer_iterations": 0, "phase1": False}

    if cons and max(c.value(y) for c in cons) >= 0:
        y = _phase_one(cons, G, y, stats, max_newton, max_outer)

    m = len(cons)
    t = 1.0 if m == 0 else max(1.0, m / max(abs(objective.value(y)), 1.0))
    for outer in range(max_outer):
        y_new, its, dec, converged = _newton_centering(objective.derivs, cons, G, y, t, max_newton)
        stats["newton_iterations"] += its
        stats["outer_iterations"] = outer + 1
        if not converged:
            # floating-point floor: keep the last well-centred point if the gap is already small
            if m * mu / t <= GAP_FLOOR:  # gap of the last centred point
                t /= mu
                stats["precision_floor"] = True
                break
            raise ConvergenceError("Newton centering did not converge",
                                   incumbent=GPResult(np.exp(y_new), float(np.exp(objective.value(y_new))),
                                                      dict(stats)))
        y = y_new
        if m == 0 or m / t < tol:
            break
        t *= mu
    else:
        raise ConvergenceError("barrier method hit its outer iteration budget",
                               incumbent=GPResult(np.exp(y), float(np.exp(objective.value(y))), dict(stats)))
    stats["duality_gap"] = m / t
    stats["newton_decrement"] = float(dec)
    stats["max_constraint"] = max((c.value(y) for c in cons), default=-np.inf)
    stats["equality_residual"] = float(np.max(np.abs(G @ y - h))) if len(eq) else 0.0
    return GPResult(np.exp(y), float(np.exp(objective.value(y))), stats)


def _phase_one(cons, G, y, stats, max_newton, max_outer):
    """Find ``y`` with every ``f_i(y) < 0`` by minimising a shared slack ``s``."""
    stats["phase1"] = True
    k = y.size
    s0 = max(c.value(y) for c in cons) + 1.0
    z = np.append(y, s0)
    G1 = np.hstack([G, np.zeros((G.shape[0], 1))])

    class _Shifted:
        def __init__(self, c):
            self.c = c

        def value(self, z):
            return self.c.value(z[:-1]) - z[-1]

        def derivs(self, z):
            v, g, H = self.c.derivs(z[:-1])
            H1 = np.zeros((k + 1, k + 1))
            H1[:k, :k] = H
            return v - z[-1], np.append(g, -1.0), H1

    shifted = [_Shifted(c) for c in cons]
    e = np.zeros(k + 1)
    e[-1] = 1.0

    def slack(z):
        return z[-1], e, np.zeros((k + 1, k + 1))

    t = 1.0
    target = -1e-3
    def reached(z):
        return max(c.value(z[:-1]) for c in cons) < target

    for _ in range(max_outer):
        z, its, _, _ = _newton_centering(slack, shifted, G1, z, t, max_newton, stop=reached)
        stats["newton_iterations"] += its
        if reached(z):
            return z[:-1]
        if len(cons) / t < 1e-10:
            break
        t *= 10.0
    if max(c.value(z[:-1]) for c in cons) < 0:
        return z[:-1]
    raise InfeasibleError("geometric program has no strictly feasible point")
