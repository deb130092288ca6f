"""Dense convex QP solver with active-set polishing and KKT sensitivities.

Problem form::

    minimize    1/2 x'Px + q'x
    subject to  A x  = b
                G x <= h

Solved by a Mehrotra predictor-corrector interior-point method on the
reduced KKT system.  On convergence the active set (constraints whose dual
exceeds their slack) is used to re-solve the equality-constrained QP, which
removes the interior-point bias and gives residuals near machine precision.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

OPTIMAL = "optimal"
MAX_ITER = "max-iterations"
FAILED = "numerical-failure"


@dataclass
class QP:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray
    E: np.ndarray | None = None   # dh/dtheta for parametric right-hand sides
    basis: "NullSpace | None" = None

    def nullspace(self) -> "NullSpace":
        if self.basis is None:
            self.basis = NullSpace.of(self.A, self.P, self.G)
        return self.basis

    @property
    def n(self) -> int:
        return len(self.q)

    def objective(self, x) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)


@dataclass(frozen=True)
class NullSpace:
    """Equality elimination x = x_p + Z w, with A' = Q1 R (thin QR)."""
    Z: np.ndarray
    Q1: np.ndarray
    R: np.ndarray
    Pr: np.ndarray      # Z'PZ
    Gr: np.ndarray      # GZ

    @classmethod
    def of(cls, A, P, G) -> "NullSpace":
        n, p = A.shape[1], A.shape[0]
        if p == 0:
            Z = np.eye(n)
            return cls(Z, np.zeros((n, 0)), np.zeros((0, 0)), P.copy(), G.copy())
        Q, R = np.linalg.qr(A.T, mode="complete")
        Q1, Z = Q[:, :p], Q[:, p:]
        return cls(Z, Q1, R[:p], Z.T @ P @ Z, G @ Z)

    def particular(self, b) -> np.ndarray:
        if len(b) == 0:
            return np.zeros(self.Z.shape[0])
        return self.Q1 @ sla.solve_triangular(self.R, b, trans="T")

    def eq_duals(self, r) -> np.ndarray:
        """y with A'y = -r in the least-squares sense."""
        if self.R.shape[0] == 0:
            return np.zeros(0)
        return -sla.solve_triangular(self.R, self.Q1.T @ r)


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    status: str
    iterations: int
    active: np.ndarray
    polished: bool = False
    warm: bool = False
    objective: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(qp: QP, x, y, z) -> dict:
    """Infinity norms of stationarity, equality, inequality and complementarity."""
    s = qp.h - qp.G @ x
    return {
        "stationarity": float(np.max(np.abs(qp.P @ x + qp.q + qp.A.T @ y + qp.G.T @ z), initial=0)),
        "equality": float(np.max(np.abs(qp.A @ x - qp.b), initial=0)),
        "inequality": float(np.max(np.maximum(-s, 0), initial=0)),
        "dual_sign": float(np.max(np.maximum(-z, 0), initial=0)),
        "complementarity": float(np.max(np.abs(z * s), initial=0)),
    }


def max_kkt_residual(qp: QP, sol: QpSolution) -> float:
    return max(kkt_residuals(qp, sol.x, sol.y, sol.z).values())


def _active_kkt(qp: QP, active: np.ndarray, reg: float = 0.0):
    n, p = qp.n, len(qp.b)
    Ga = qp.G[active]
    k = len(Ga)
    K = np.zeros((n + p + k, n + p + k))
    K[:n, :n] = qp.P
    K[:n, n:n + p] = qp.A.T
    K[:n, n + p:] = Ga.T
    K[n:n + p, :n] = qp.A
    K[n + p:, :n] = Ga
    if reg:
        K[:n, :n] += reg * np.eye(n)
        K[n:, n:] -= reg * np.eye(p + k)
    return K


def solve_active(qp: QP, active: np.ndarray, tol: float = 1e-9):
    """Solve the QP with ``active`` inequalities as equalities and the rest
    dropped.  Returns a solution if it satisfies all KKT sign conditions,
    otherwise None."""
    active = np.asarray(active, dtype=bool)
    n, p = qp.n, len(qp.b)
    K = _active_kkt(qp, active)
    rhs = np.concatenate([-qp.q, qp.b, qp.h[active]])
    try:
        with np.errstate(all="ignore"):
            sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    x, y = sol[:n], sol[n:n + p]
    z = np.zeros(len(qp.h))
    z[active] = sol[n + p:]
    s = qp.h - qp.G @ x
    scale = 1.0 + np.abs(qp.h)
    if np.any(s < -tol * scale) or np.any(z < -tol * (1.0 + np.max(np.abs(z), initial=0))):
        return None
    if np.max(np.abs(K @ sol - rhs)) > 1e-7 * (1.0 + np.max(np.abs(rhs))):
        return None
    return x, y, z


def _step_to_boundary(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def solve_qp(qp: QP, tol: float = 1e-10, max_iter: int = 100, active_guess=None,
             polish: bool = True) -> QpSolution:
    """Interior-point solve, optionally short-circuited by a verified active-set guess."""
    n, p, m = qp.n, len(qp.b), len(qp.h)
    if active_guess is not None:
        res = solve_active(qp, active_guess)
        if res is not None:
            x, y, z = res
            return QpSolution(x, y, z, OPTIMAL, 0, np.asarray(active_guess, dtype=bool).copy(),
                              polished=True, warm=True, objective=qp.objective(x))
    P, q, A, b, G, h = qp.P, qp.q, qp.A, qp.b, qp.G, qp.h
    ns = qp.nullspace()
    x_p = ns.particular(b)
    Pr, Gr = ns.Pr, ns.Gr
    qr = ns.Z.T @ (P @ x_p + q)
    hr = h - G @ x_p
    try:
        # start: least-squares fit of the inequalities, then shift into the interior
        w = np.linalg.solve(Pr + Gr.T @ Gr, -qr + Gr.T @ hr)
    except np.linalg.LinAlgError:
        w = np.linalg.lstsq(Pr + Gr.T @ Gr, -qr + Gr.T @ hr, rcond=None)[0]
    s = hr - Gr @ w
    s = np.where(s < 1.0, 1.0, s)
    z = np.ones(m)
    status, it, crossed = MAX_ITER, 0, None
    crossover_mu = 1e-8
    qscale = 1.0 + np.max(np.abs(qr), initial=0)
    hscale = 1.0 + np.max(np.abs(hr), initial=0)
    with np.errstate(over="raise", divide="raise", invalid="raise", under="ignore"):
        try:
            for it in range(1, max_iter + 1):
                rd = Pr @ w + qr + Gr.T @ z
                rg = Gr @ w + s - hr
                mu = float(s @ z) / max(m, 1)
                if (np.max(np.abs(rd), initial=0) <= tol * qscale
                        and np.max(np.abs(rg), initial=0) <= tol * hscale and mu <= tol):
                    status = OPTIMAL
                    break
                if polish and mu <= crossover_mu:
                    # the barrier Hessian degrades as mu -> 0; try the identified face
                    crossed = solve_active(qp, z > s)
                    if crossed is not None:
                        status = OPTIMAL
                        break
                d = z / s
                H = Pr + Gr.T @ (d[:, None] * Gr)
                try:
                    fac = sla.cho_factor(H, check_finite=False)
                    solve = lambda r: sla.cho_solve(fac, r, check_finite=False)  # noqa: E731
                except np.linalg.LinAlgError:
                    lu = sla.lu_factor(H, check_finite=False)
                    solve = lambda r: sla.lu_solve(lu, r, check_finite=False)  # noqa: E731

                def direction(rc):
                    dw = solve(-rd - Gr.T @ (d * rg - rc / s))
                    gdw = Gr @ dw
                    return dw, -rg - gdw, d * (gdw + rg) - rc / s

                dw, ds, dz = direction(s * z)
                alpha = min(_step_to_boundary(s, ds), _step_to_boundary(z, dz))
                mu_aff = float((s + alpha * ds) @ (z + alpha * dz)) / max(m, 1)
                sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
                dw, ds, dz = direction(s * z + ds * dz - sigma * mu)
                alpha = min(1.0, 0.99 * min(_step_to_boundary(s, ds), _step_to_boundary(z, dz)))
                w = w + alpha * dw
                s = np.maximum(s + alpha * ds, 1e-300)
                z = np.maximum(z + alpha * dz, 1e-300)
        except (FloatingPointError, np.linalg.LinAlgError, ValueError):
            status = FAILED
    x = x_p + ns.Z @ w
    y = ns.eq_duals(P @ x + q + G.T @ z) if np.all(np.isfinite(x)) else np.full(p, np.nan)
    if status == FAILED or not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
        return QpSolution(x, y, z, FAILED, it, np.zeros(m, dtype=bool))
    active = z > s
    result = QpSolution(x, y, z, status, it, active, objective=qp.objective(x))
    if not polish:
        return result
    res = None
    if status == OPTIMAL:
        res = crossed if crossed is not None else solve_active(qp, active)
    mu = float(s @ z) / max(m, 1)
    if res is None and mu <= 1e-6 and np.all(Gr @ w - hr <= 1e-9 * hscale):
        # nearly flat faces (tiny control curvature) can leave the interior
        # iterate far from the optimal vertex; finish with primal active-set steps
        refined = _refine_active_set(ns, qr, hr, w)
        if refined is not None:
            active = refined
            res = solve_active(qp, active)
    if res is not None:
        result.x, result.y, result.z = res
        result.status = OPTIMAL
        result.active = active
        result.polished = True
        result.objective = qp.objective(result.x)
        result.diagnostics["min_active_dual"] = float(np.min(z[active], initial=np.inf))
        result.diagnostics["min_inactive_slack"] = float(np.min(s[~active], initial=np.inf))
    return result


def _refine_active_set(ns: NullSpace, qr, hr, w, max_iter: int = 500, tol: float = 1e-10):
    """Primal active-set method on the reduced problem from a feasible ``w``.

    Starts with an empty working set, so every added row is a blocking
    constraint and the working set stays linearly independent.  Returns the
    final working set as a boolean mask, or None if it does not settle.
    """
    Pr, Gr = ns.Pr, ns.Gr
    nw, m = Pr.shape[0], Gr.shape[0]
    w = w.copy()
    work: list[int] = []
    settled = False     # a full, unblocked step lands on the working-set minimizer
    with np.errstate(all="ignore"):
        for _ in range(max_iter):
            k = len(work)
            Gw = Gr[work]
            K = np.zeros((nw + k, nw + k))
            K[:nw, :nw] = Pr
            K[:nw, nw:] = Gw.T
            K[nw:, :nw] = Gw
            try:
                sol = np.linalg.solve(K, np.concatenate([-(Pr @ w + qr), np.zeros(k)]))
            except np.linalg.LinAlgError:
                return None
            step, lam = sol[:nw], sol[nw:]
            if settled or np.max(np.abs(step), initial=0) <= tol * (1.0 + np.max(np.abs(w), initial=0)):
                settled = False
                if k == 0 or lam.min() >= -tol * (1.0 + np.max(np.abs(lam))):
                    mask = np.zeros(m, dtype=bool)
                    mask[work] = True
                    return mask
                work.pop(int(np.argmin(lam)))
                continue
            gs = Gr @ step
            room = np.maximum(hr - Gr @ w, 0.0)
            cand = gs > 1e-14 * (1.0 + np.abs(hr))
            cand[work] = False
            alpha, block = 1.0, None
            if cand.any():
                ratios = np.full(m, np.inf)
                ratios[cand] = room[cand] / gs[cand]
                j = int(np.argmin(ratios))
                if ratios[j] < 1.0:
                    alpha, block = ratios[j], j
            w = w + alpha * step
            if block is not None:
                work.append(block)
            else:
                settled = True
    return None


@dataclass
class Sensitivity:
    dx: np.ndarray      # (n, k) d x / d theta
    dz: np.ndarray      # (m, k) d z / d theta (zero rows for inactive constraints)
    degenerate: bool


def sensitivity(qp: QP, sol: QpSolution, deg_tol: float = 1e-9, reg: float = 1e-8) -> Sensitivity:
    """Implicit derivative of the primal/dual solution with respect to theta,
    where ``h = h0 + E theta``.

    Uses the KKT system restricted to the active set.  A weakly active
    constraint (zero dual) or a barely inactive one (zero slack) is harmless
    when its dual, respectively slack, does not move with theta; otherwise the
    solution map has a kink there and ``degenerate`` is set.  A singular KKT
    matrix falls back to a damped solve with diagonal regularization ``reg``.
    """
    if qp.E is None:
        raise ValueError("QP has no parametric right-hand side")
    active = sol.active
    n, p = qp.n, len(qp.b)
    k = qp.E.shape[1]
    rhs = np.zeros((n + p + int(active.sum()), k))
    rhs[n + p:] = qp.E[active]
    degenerate = False
    try:
        d = np.linalg.solve(_active_kkt(qp, active), rhs)
        if not np.all(np.isfinite(d)):
            raise np.linalg.LinAlgError("non-finite sensitivity")
    except np.linalg.LinAlgError:
        degenerate = True
        d = np.linalg.solve(_active_kkt(qp, active, reg), rhs)
    dx = d[:n]
    dz = np.zeros((len(qp.h), k))
    dz[active] = d[n + p:]
    s = qp.h - qp.G @ sol.x
    ds = qp.E - qp.G @ dx
    zmax = 1.0 + np.max(np.abs(sol.z), initial=0)
    weak = active & (sol.z < deg_tol * zmax)
    near = ~active & (s < deg_tol * (1.0 + np.abs(qp.h)))
    move_tol = 1e-9 * (1.0 + np.max(np.abs(d), initial=0))
    if np.any(np.abs(dz[weak]) > move_tol) or np.any(np.abs(ds[near]) > move_tol):
        degenerate = True
    return Sensitivity(dx, dz, degenerate)


def brute_force_qp(qp: QP, tol: float = 1e-9):
    """Enumerate every active set; return (objective, x) of the best KKT point.

    Exponential in the number of inequalities: test oracle only.
    """
    m = len(qp.h)
    best = (np.inf, None)
    for mask in range(1 << m):
        active = np.array([(mask >> i) & 1 for i in range(m)], dtype=bool)
        n, p = qp.n, len(qp.b)
        K = _active_kkt(qp, active)
        rhs = np.concatenate([-qp.q, qp.b, qp.h[active]])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            continue
        x = sol[:n]
        zs = sol[n + p:]
        if np.any(qp.G @ x > qp.h + tol) or np.any(zs < -tol):
            continue
        f = qp.objective(x)
        if f < best[0]:
            best = (f, x)
    return best
