"""Dense convex QP: a primal active-set solver and the direct KKT path.

Problems have the form ``min 1/2 x^T H x + g^T x`` subject to
``A_eq x = b_eq`` and ``G x <= h``. Row indices reported in certificates
refer to the stacked system ``[A_eq; G]`` (equalities first).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

FEAS_TOL = 1e-9
STATIONARITY_TOL = 1e-7
RANK_TOL = 1e-10

STATUSES = ("optimal", "infeasible", "max_iter", "singular")


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    spans: dict = field(default_factory=dict)

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        d = H.shape[0]
        if H.shape != (d, d):
            raise ValueError("H must be square")
        g = np.asarray(self.g, dtype=float).reshape(-1)
        if g.shape != (d,):
            raise ValueError("g has the wrong length")
        a_eq, b_eq = _pair(self.A_eq, self.b_eq, d, "equality")
        G, h = _pair(self.G, self.h, d, "inequality")
        scale = max(1.0, np.abs(H).max(initial=0.0))
        if np.abs(H - H.T).max(initial=0.0) > 1e-10 * scale:
            raise ValueError("H must be symmetric")
        if d and np.linalg.eigvalsh(0.5 * (H + H.T)).min() < -1e-10 * scale:
            raise ValueError("H must be positive semidefinite")
        for name, arr in (("H", H), ("g", g), ("A_eq", a_eq), ("b_eq", b_eq), ("G", G), ("h", h)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        object.__setattr__(self, "H", 0.5 * (H + H.T))
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "A_eq", a_eq)
        object.__setattr__(self, "b_eq", b_eq)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)

    @property
    def dim(self):
        return self.H.shape[0]

    def objective(self, x):
        return float(0.5 * x @ self.H @ x + self.g @ x)

    def to_text(self):
        """Plain-text matrix dump for offline debugging."""
        lines = [f"dim {self.dim} eq {len(self.b_eq)} ineq {len(self.h)}"]
        for name, arr in (("H", self.H), ("g", self.g), ("A_eq", self.A_eq), ("b_eq", self.b_eq), ("G", self.G), ("h", self.h)):
            arr2 = np.atleast_2d(arr)
            lines.append(f"{name} {arr2.shape[0]} {arr2.shape[1] if arr2.size else 0}")
            for row in arr2:
                lines.append(" ".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def _pair(mat, vec, d, name):
    if mat is None:
        return np.zeros((0, d)), np.zeros(0)
    mat = np.asarray(mat, dtype=float).reshape(-1, d)
    vec = np.asarray(vec, dtype=float).reshape(-1)
    if mat.shape[0] != vec.shape[0]:
        raise ValueError(f"{name} rows and right-hand side disagree")
    return mat, vec


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray | None
    status: str
    active_set: tuple = ()
    objective: float = float("nan")
    iterations: int = 0
    y_eq: np.ndarray | None = None
    y_ineq: np.ndarray | None = None
    certificate: tuple = ()
    residuals: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.status == "optimal"


def _independent_rows(mat, tol=RANK_TOL):
    """Indices of a maximal independent subset of rows, preferring low indices."""
    if mat.shape[0] == 0:
        return np.zeros(0, dtype=int)
    _, r, piv = sla.qr(mat.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0:
        return np.zeros(0, dtype=int)
    rank = int(np.sum(diag > tol * diag[0]))
    return np.sort(piv[:rank])


def _null_space(c, d):
    if c.shape[0] == 0:
        return np.eye(d)
    q, _ = sla.qr(c.T, mode="full")
    return q[:, c.shape[0]:]


def _phase_one(a_eq, b_eq, G, h):
    """Feasible point by ``min t s.t. A_eq x = b_eq, G x - t <= h, t >= 0``."""
    d = G.shape[1] if G.size else a_eq.shape[1]
    c = np.zeros(d + 1)
    c[-1] = 1.0
    a_ub = np.hstack([G, -np.ones((G.shape[0], 1))])
    a_e = np.hstack([a_eq, np.zeros((a_eq.shape[0], 1))]) if a_eq.shape[0] else None
    bounds = [(None, None)] * d + [(0, None)]
    res = linprog(
        c,
        A_ub=a_ub,
        b_ub=h,
        A_eq=a_e,
        b_eq=b_eq if a_eq.shape[0] else None,
        bounds=bounds,
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        return None, res
    return res.x[:d], res


def _eqp_step(H, grad, c, d):
    """Step of the working-set subproblem and whether it is a descent ray."""
    z = _null_space(c, d)
    if z.shape[1] == 0:
        return np.zeros(d), False
    hr = z.T @ H @ z
    gr = z.T @ grad
    w, v = np.linalg.eigh(0.5 * (hr + hr.T))
    scale = max(1.0, np.abs(w).max(initial=0.0))
    flat = w <= 1e-10 * scale
    if flat.any():
        g_flat = v[:, flat].T @ gr
        if np.linalg.norm(g_flat) > 1e-12 * max(1.0, np.linalg.norm(gr)):
            return -z @ (v[:, flat] @ g_flat), True
    coef = np.where(flat, 0.0, 1.0 / np.where(flat, 1.0, w))
    return -z @ (v @ (coef * (v.T @ gr))), False


def solve(problem: QpProblem, warm_start=None, max_iter=None):
    """Primal active-set solve.

    ``warm_start`` is a previous :class:`QpSolution` or an iterable of
    inequality row indices believed active. Deterministic for identical
    inputs.
    """
    H, g = problem.H, problem.g
    d = problem.dim
    G, h = problem.G, problem.h
    m_ineq = G.shape[0]
    if max_iter is None:
        max_iter = 10 * (d + m_ineq + problem.A_eq.shape[0])

    keep = _independent_rows(problem.A_eq)
    a_eq, b_eq = problem.A_eq[keep], problem.b_eq[keep]
    if problem.A_eq.shape[0]:
        x_ls = np.linalg.lstsq(a_eq, b_eq, rcond=None)[0] if a_eq.shape[0] else np.zeros(d)
        res_eq = np.abs(problem.A_eq @ x_ls - problem.b_eq)
        bad = np.where(res_eq > 1e-8 * max(1.0, np.abs(problem.b_eq).max()))[0]
        if bad.size:
            return QpSolution(None, "infeasible", certificate=tuple(int(i) for i in bad))
    else:
        x_ls = np.zeros(d)

    x = None
    working = []
    if warm_start is not None:
        rows = warm_start.active_set if isinstance(warm_start, QpSolution) else tuple(warm_start)
        rows = [int(i) for i in rows if 0 <= int(i) < m_ineq]
        x, working = _warm_point(H, g, a_eq, b_eq, G, h, rows, d)
    if x is None:
        # minimizer on the equality manifold, then the least-norm point
        x, working = _warm_point(H, g, a_eq, b_eq, G, h, [], d)
    if x is None and (m_ineq == 0 or np.all(G @ x_ls - h <= FEAS_TOL)):
        x, working = x_ls, []
    iterations = 0
    if x is None:
        x, lp = _phase_one(a_eq, b_eq, G, h)
        iterations += 1
        if x is None or lp.x[-1] > FEAS_TOL:
            cert = ()
            if lp.status == 0:
                duals = np.abs(lp.ineqlin.marginals)
                cert = tuple(int(problem.A_eq.shape[0] + i) for i in np.where(duals > 1e-12)[0])
            return QpSolution(None, "infeasible", iterations=iterations, certificate=cert)
        working = []
    if not working:
        working = _initial_working_set(G, h, x, a_eq)

    while True:
        iterations += 1
        if iterations > max_iter:
            return _finish(problem, x, working, "max_iter", iterations, a_eq, keep)
        c = np.vstack([a_eq, G[working]]) if working else a_eq
        grad = H @ x + g
        p, ray = _eqp_step(H, grad, c, d)
        if not ray and _stationary(H, grad, c, d, p, x):
            y = _multipliers(c, grad)
            mu = y[a_eq.shape[0]:]
            if mu.size == 0 or mu.min() >= -1e-10:
                return _finish(problem, x, working, "optimal", iterations, a_eq, keep, y)
            drop = int(np.argmin(mu))  # first index among equal minima
            working.pop(drop)
            continue
        alpha, block = (np.inf if ray else 1.0), None
        if m_ineq:
            others = np.setdiff1d(np.arange(m_ineq), working)
            gp = G[others] @ p
            move = gp > 1e-12 * np.linalg.norm(G[others], axis=1) * np.linalg.norm(p)
            if move.any():
                cand = others[move]
                steps = np.maximum(h[cand] - G[cand] @ x, 0.0) / gp[move]
                k = int(np.argmin(steps))
                if steps[k] < alpha:
                    alpha, block = steps[k], int(cand[k])
        if not np.isfinite(alpha):
            return QpSolution(x, "singular", tuple(sorted(working)), problem.objective(x), iterations)
        x = x + alpha * p
        if block is not None:
            working.append(block)


def _stationary(H, grad, c, d, p, x):
    # a round-off sized step, or a reduced gradient that is noise next to the full one
    if np.linalg.norm(p) <= 1e-11 * (1.0 + np.linalg.norm(x)):
        return True
    gr = _null_space(c, d).T @ grad
    return np.linalg.norm(gr) <= 1e-10 * (1.0 + np.linalg.norm(grad)) or 0.5 * abs(p @ H @ p) <= 1e-14 * (1.0 + abs(x @ H @ x))


def _warm_point(H, g, a_eq, b_eq, G, h, rows, d):
    """Minimizer with the guessed working set held as equalities, if feasible."""
    rows = _greedy_independent(G, rows, a_eq)
    c = np.vstack([a_eq, G[rows]]) if rows else a_eq
    rhs = np.concatenate([b_eq, h[rows]]) if rows else b_eq
    k = np.block([[H, c.T], [c, np.zeros((c.shape[0], c.shape[0]))]])
    try:
        sol = np.linalg.solve(k, np.concatenate([-g, rhs]))
    except np.linalg.LinAlgError:
        return None, []
    x = sol[:d]
    if not np.all(np.isfinite(x)):
        return None, []
    if G.shape[0] and np.any(G @ x - h > FEAS_TOL):
        return None, []
    if c.shape[0] and np.abs(c @ x - rhs).max() > 1e-9 * max(1.0, np.abs(rhs).max()):
        return None, []
    return x, rows


def _greedy_independent(G, candidates, base):
    working = []
    for i in candidates:
        trial = np.vstack([base, G[i]])
        if _independent_rows(trial).size == trial.shape[0]:
            working.append(int(i))
            base = trial
    return working


def _initial_working_set(G, h, x, a_eq):
    if G.shape[0] == 0:
        return []
    active = np.where(np.abs(G @ x - h) <= FEAS_TOL * np.maximum(1.0, np.abs(h)))[0]
    return _greedy_independent(G, active, a_eq)


def _multipliers(c, grad):
    if c.shape[0] == 0:
        return np.zeros(0)
    return np.linalg.lstsq(c.T, -grad, rcond=None)[0]


def _finish(problem, x, working, status, iterations, a_eq, keep, y=None):
    d = problem.dim
    y_eq = np.zeros(problem.A_eq.shape[0])
    y_in = np.zeros(problem.G.shape[0])
    if y is not None:
        y_eq[keep] = y[: a_eq.shape[0]]
        y_in[working] = y[a_eq.shape[0]:]
    grad = problem.H @ x + problem.g
    residuals = {
        "stationarity": float(np.abs(grad + problem.A_eq.T @ y_eq + problem.G.T @ y_in).max(initial=0.0)),
        "equality": float(np.abs(problem.A_eq @ x - problem.b_eq).max(initial=0.0)),
        "inequality": float(np.maximum(problem.G @ x - problem.h, 0.0).max(initial=0.0)),
        "complementarity": float(np.abs(y_in * (problem.G @ x - problem.h)).max(initial=0.0)),
    }
    return QpSolution(
        x,
        status,
        tuple(sorted(int(i) for i in working)),
        problem.objective(x),
        iterations,
        y_eq,
        y_in,
        residuals=residuals,
    )


@dataclass(frozen=True)
class KktSolution:
    u: np.ndarray | None
    lam: np.ndarray | None
    columns: np.ndarray | None
    rcond: float
    status: str


def solve_equality_kkt(A, b=None, weight=None, columns=None, rcond_min=RANK_TOL):
    """Least-norm solve of ``min 1/2 u^T W u s.t. A u = b`` through its KKT matrix.

    ``K = [[W, A^T], [A, 0]]`` is LU-factorized once. ``columns`` selects
    constraint rows ``j`` for which ``K^{-1} e_{d+j}`` is returned, stacked as
    columns of a ``(d + r) x len(columns)`` array. A reciprocal condition
    estimate below ``rcond_min`` yields status ``singular``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    r, d = A.shape
    W = np.eye(d) if weight is None else np.asarray(weight, dtype=float)
    b = np.zeros(r) if b is None else np.asarray(b, dtype=float)
    k = np.block([[W, A.T], [A, np.zeros((r, r))]])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(k, check_finite=True)
    anorm = np.abs(k).sum(axis=0).max()
    rcond, _ = sla.lapack.dgecon(lu, anorm, norm="1")
    if not np.isfinite(rcond) or rcond < rcond_min:
        return KktSolution(None, None, None, float(rcond), "singular")
    sol = sla.lu_solve((lu, piv), np.concatenate([np.zeros(d), b]))
    cols = None
    if columns is not None:
        e = np.zeros((d + r, len(columns)))
        for j, c in enumerate(columns):
            e[d + c, j] = 1.0
        cols = sla.lu_solve((lu, piv), e)
    return KktSolution(sol[:d], sol[d:], cols, float(rcond), "optimal")
