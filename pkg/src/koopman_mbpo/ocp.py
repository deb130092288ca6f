"""Koopman economic MPC as a parametric QP, plus the Gaussian policy around it.

Horizon: 10 points (t .. t+9) and 9 control moves.  Decision variables,
in this order::

    u_0 .. u_8   scaled (rho, F)            18
    z_1 .. z_9   latent states              72
    l_1 .. l_9   storage levels (hours)      9
    s_0 .. s_9   slacks (c, T, l) per point 30
                                           ---
                                           129

Equalities (81): latent dynamics z_{k+1} = A z_k + B u_k and storage
l_{k+1} = l_k + 0.2 u_rho,k (one scaled unit of rho is 0.2 h of production).
Inequalities (126): per point four c/T bounds and two storage bounds, all
relaxed by slacks and shifted by the six bound offsets theta_B; slack
nonnegativity; the control box [-1, 1].

theta_B = (c_lb, c_ub, T_lb, T_ub, l_lb, l_ub).  A positive lower offset
tightens its bound and a positive upper offset relaxes its bound.  Offsets
for c and T are in scaled units, storage offsets in hours.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import koopman
from .cstr import ACTION_SS, STORAGE_MAX, STORAGE_MIN, scale_action
from .diffcore import Params
from .qp import QP, NullSpace, QpSolution, Sensitivity, sensitivity, solve_qp

N_POINTS = 10
N_MOVES = 9
LATENT = 8
N_U = 2 * N_MOVES
OFF_Z = N_U
OFF_L = OFF_Z + LATENT * N_MOVES
OFF_S = OFF_L + N_MOVES
N_VARS = OFF_S + 3 * N_POINTS
N_EQ = LATENT * N_MOVES + N_MOVES
N_INEQ = 4 * N_POINTS + 2 * N_POINTS + 3 * N_POINTS + 2 * N_U
RHO_GAIN = 0.2
THETA_NAMES = ("c_lb", "c_ub", "T_lb", "T_ub", "l_lb", "l_ub")
U_SS = scale_action(ACTION_SS)


def iz(k: int) -> slice:
    """Columns of z_k, k = 1 .. 9."""
    return slice(OFF_Z + LATENT * (k - 1), OFF_Z + LATENT * k)


def il(k: int) -> int:
    return OFF_L + k - 1


def is_(k: int, j: int) -> int:
    return OFF_S + 3 * k + j


@dataclass
class OcpInstance:
    z0: np.ndarray
    l0: float
    prices: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    theta: np.ndarray = field(default_factory=lambda: np.zeros(6))
    M: float = 1e3
    eps: float = 1e-6

    def __post_init__(self):
        self.z0 = np.asarray(self.z0, dtype=np.float64)
        self.prices = np.asarray(self.prices, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.z0.shape != (LATENT,) or self.prices.shape != (N_POINTS,) or self.theta.shape != (6,):
            raise ValueError("OCP instance needs an 8-vector z0, 10 prices and 6 bound offsets")

    @classmethod
    def from_state(cls, kparams, x_scaled, l0, prices, theta=None, M=1e3, eps=1e-6):
        return cls(koopman.encode(kparams, np.asarray(x_scaled, dtype=np.float64)), float(l0),
                   prices, kparams["A"], kparams["B"], kparams["C"],
                   np.zeros(6) if theta is None else theta, M, eps)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.z0, [self.l0], self.prices, self.A, self.B, self.C, self.theta,
                  [self.M, self.eps]):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {"z0": self.z0.tolist(), "l0": self.l0, "prices": self.prices.tolist(),
                "A": np.asarray(self.A).tolist(), "B": np.asarray(self.B).tolist(),
                "C": np.asarray(self.C).tolist(), "theta": self.theta.tolist(),
                "M": self.M, "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> "OcpInstance":
        return cls(np.array(d["z0"]), d["l0"], np.array(d["prices"]), np.array(d["A"]),
                   np.array(d["B"]), np.array(d["C"]), np.array(d["theta"]), d["M"], d["eps"])


_TEMPLATES: dict = {}


def _template(A, B, C, M, eps):
    """Instance-independent parts of the QP; cached per (A, B, C, M, eps)."""
    key = hashlib.sha1(b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                                for a in (A, B, C, [M, eps]))).hexdigest()
    hit = _TEMPLATES.get(key)
    if hit is not None:
        return hit
    P = np.zeros((N_VARS, N_VARS))
    P[np.arange(N_U), np.arange(N_U)] = 2.0 * eps
    P[np.arange(OFF_S, N_VARS), np.arange(OFF_S, N_VARS)] = 2.0 * M

    Aeq = np.zeros((N_EQ, N_VARS))
    for k in range(N_MOVES):
        rows = slice(LATENT * k, LATENT * (k + 1))
        Aeq[rows, iz(k + 1)] = np.eye(LATENT)
        Aeq[rows, 2 * k:2 * k + 2] = -B
        if k > 0:
            Aeq[rows, iz(k)] = -A
        r = LATENT * N_MOVES + k
        Aeq[r, il(k + 1)] = 1.0
        Aeq[r, 2 * k] = -RHO_GAIN
        if k > 0:
            Aeq[r, il(k)] = -1.0

    G = np.zeros((N_INEQ, N_VARS))
    h = np.zeros(N_INEQ)
    E = np.zeros((N_INEQ, 6))
    for k in range(N_POINTS):
        for j in range(2):          # c, T
            lo, hi = 4 * k + 2 * j, 4 * k + 2 * j + 1
            G[lo, is_(k, j)] = -1.0
            G[hi, is_(k, j)] = -1.0
            h[lo] = 1.0
            h[hi] = 1.0
            E[lo, 2 * j] = -1.0
            E[hi, 2 * j + 1] = 1.0
            if k > 0:
                G[lo, iz(k)] = -C[j]
                G[hi, iz(k)] = C[j]
        lo, hi = 4 * N_POINTS + 2 * k, 4 * N_POINTS + 2 * k + 1
        G[lo, is_(k, 2)] = -1.0
        G[hi, is_(k, 2)] = -1.0
        h[lo] = -STORAGE_MIN
        h[hi] = STORAGE_MAX
        E[lo, 4] = -1.0
        E[hi, 5] = 1.0
        if k > 0:
            G[lo, il(k)] = -1.0
            G[hi, il(k)] = 1.0
    base = 6 * N_POINTS
    for i in range(3 * N_POINTS):
        G[base + i, OFF_S + i] = -1.0
    base += 3 * N_POINTS
    for i in range(N_U):
        G[base + 2 * i, i] = 1.0
        G[base + 2 * i + 1, i] = -1.0
        h[base + 2 * i] = 1.0
        h[base + 2 * i + 1] = 1.0
    for a in (P, Aeq, G, h, E):
        a.flags.writeable = False
    if len(_TEMPLATES) > 64:
        _TEMPLATES.clear()
    _TEMPLATES[key] = (P, Aeq, G, h, E, NullSpace.of(Aeq, P, G))
    return _TEMPLATES[key]


# rows of the t = 0 bounds, whose right-hand sides absorb the known x0 and l0
_ROW0_X = np.array([0, 1, 2, 3])
_ROW0_L = np.array([4 * N_POINTS, 4 * N_POINTS + 1])


def build_qp(inst: OcpInstance) -> QP:
    A, B, C = np.asarray(inst.A), np.asarray(inst.B), np.asarray(inst.C)
    P, Aeq, G, h0, E, basis = _template(A, B, C, inst.M, inst.eps)
    q = np.zeros(N_VARS)
    q[1:N_U:2] = inst.prices[:N_MOVES]
    beq = np.zeros(N_EQ)
    beq[:LATENT] = A @ inst.z0
    beq[LATENT * N_MOVES] = inst.l0
    x0 = C @ inst.z0
    h = h0 + E @ inst.theta
    h[_ROW0_X] += np.array([x0[0], -x0[0], x0[1], -x0[1]])
    h[_ROW0_L] += np.array([inst.l0, -inst.l0])
    return QP(P, q, Aeq, beq, G, h, E, basis)


@dataclass
class OcpSolution:
    controls: np.ndarray     # (9, 2) scaled
    latents: np.ndarray      # (10, 8), row 0 is z0
    states: np.ndarray       # (10, 2) decoded, scaled
    storage: np.ndarray      # (10,)
    slacks: np.ndarray       # (10, 3)
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    objective: float
    status: str
    raw: QpSolution

    @property
    def u_star(self) -> np.ndarray:
        return self.controls[0]

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in self.__dict__.items() if k != "raw"}


def unpack(inst: OcpInstance, sol: QpSolution) -> OcpSolution:
    x = sol.x
    z = np.vstack([inst.z0, x[OFF_Z:OFF_L].reshape(N_MOVES, LATENT)])
    return OcpSolution(
        controls=x[:N_U].reshape(N_MOVES, 2).copy(),
        latents=z,
        states=z @ np.asarray(inst.C).T,
        storage=np.concatenate([[inst.l0], x[OFF_L:OFF_S]]),
        slacks=x[OFF_S:].reshape(N_POINTS, 3).copy(),
        eq_duals=sol.y, ineq_duals=sol.z, objective=sol.objective, status=sol.status, raw=sol)


def solve_instance(inst: OcpInstance, active_guess=None) -> tuple[QP, OcpSolution]:
    qp = build_qp(inst)
    return qp, unpack(inst, solve_qp(qp, active_guess=active_guess))


def grad_theta_B(qp: QP, sol: OcpSolution) -> tuple[np.ndarray, bool]:
    """Jacobian d u*_0 / d theta_B (2 x 6) and a degeneracy flag."""
    sens = sensitivity(qp, sol.raw)
    return sens.dx[:2].copy(), sens.degenerate


def dump_json(path, inst: OcpInstance, sol: OcpSolution | None = None):
    doc = {"instance": inst.to_dict(), "digest": inst.digest()}
    if sol is not None:
        doc["solution"] = sol.to_dict()
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


# ------------------------------------------------------------------- policy

@dataclass
class Piece:
    """Affine map theta -> solution, valid while the active set stays optimal."""
    theta0: np.ndarray
    u0: np.ndarray
    J: np.ndarray
    slack0: np.ndarray
    dslack: np.ndarray
    dual0: np.ndarray
    ddual: np.ndarray
    active: np.ndarray

    @classmethod
    def from_solution(cls, qp: QP, sol: QpSolution, theta, sens: Sensitivity) -> "Piece":
        a = sol.active
        slack = qp.h - qp.G @ sol.x
        return cls(np.array(theta, dtype=np.float64), sol.x[:2].copy(), sens.dx[:2].copy(),
                   slack[~a], (qp.E - qp.G @ sens.dx)[~a], sol.z[a], sens.dz[a], a.copy())

    def at(self, theta, tol: float = 1e-9):
        """(u*, J) at ``theta`` if the active set is still optimal there, else None."""
        d = np.asarray(theta) - self.theta0
        if np.any(self.slack0 + self.dslack @ d < -tol) or np.any(self.dual0 + self.ddual @ d < -tol):
            return None
        return self.u0 + self.J @ d, self.J


@dataclass
class PolicyOutput:
    u_star: np.ndarray       # scaled, deterministic
    u: np.ndarray            # scaled, sampled and clipped to the box
    u_raw: np.ndarray        # scaled, sampled before clipping
    logp: np.ndarray         # per-dimension log density of u_raw
    sigma: np.ndarray
    failed: bool = False
    jacobian: np.ndarray | None = None
    degenerate: bool = False
    piece: Piece | None = None
    active: np.ndarray | None = None


def gaussian_logp(a, mean, sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    return -0.5 * ((np.asarray(a) - mean) / sigma) ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)


def sample_action(u_star, sigma, rng) -> tuple:
    """Draw N(u*, sigma^2), clip to [-1, 1]; log-prob is of the unclipped draw."""
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (2,)).copy()
    if np.all(sigma == 0):
        raw = np.array(u_star, dtype=np.float64)
        logp = np.zeros(2)
    else:
        raw = u_star + sigma * rng.standard_normal(2)
        logp = gaussian_logp(raw, u_star, np.maximum(sigma, 1e-300))
    return np.clip(raw, -1.0, 1.0), raw, logp, sigma


def policy_act(x_scaled, l, prices, kparams, theta, sigma, rng=None, active_guess=None,
               with_jacobian: bool = False, M: float = 1e3, eps: float = 1e-6) -> PolicyOutput:
    """Solve the MPC at the current observation and sample around its first move.

    On any solver failure the steady-state controls are used and ``failed``
    is set; this never raises mid-episode.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    failed, J, degenerate, piece, active = False, None, False, None, None
    try:
        inst = OcpInstance.from_state(kparams, x_scaled, l, prices, theta, M, eps)
        qp = build_qp(inst)
        sol = solve_qp(qp, active_guess=active_guess)
        if not sol.ok or not np.all(np.isfinite(sol.x)):
            raise FloatingPointError(sol.status)
        u_star = np.clip(sol.x[:2], -1.0, 1.0)
        active = sol.active
        if with_jacobian:
            sens = sensitivity(qp, sol)
            J, degenerate = sens.dx[:2].copy(), sens.degenerate
            piece = Piece.from_solution(qp, sol, inst.theta, sens)
    except (FloatingPointError, ValueError, np.linalg.LinAlgError):
        failed = True
        u_star = U_SS.copy()
    u, raw, logp, sig = sample_action(u_star, sigma, rng)
    return PolicyOutput(u_star, u, raw, logp, sig, failed, J, degenerate, piece, active)


class KoopmanPolicy:
    """Koopman MPC with learnable bound offsets and a state-independent log-sigma.

    ``params`` holds the trainable blocks ``theta_B`` (6) and ``log_sigma`` (2);
    the Koopman matrices stay frozen.  Remembers the last active set as a
    warm-start guess for the next solve.
    """

    kind = "koopman"

    def __init__(self, kparams, theta=None, log_sigma=np.log(0.05), M=1e3, eps=1e-6):
        self.kparams = kparams
        self.params = Params({"theta_B": np.zeros(6) if theta is None else theta,
                              "log_sigma": np.broadcast_to(log_sigma, (2,))})
        self.M = M
        self.eps = eps
        self._guess = None

    @property
    def theta(self) -> np.ndarray:
        return self.params["theta_B"]

    @property
    def log_sigma(self) -> np.ndarray:
        return self.params["log_sigma"]

    def act(self, x_scaled, l, prices, rng=None, sigma=None, with_jacobian=False) -> PolicyOutput:
        sigma = np.exp(self.log_sigma) if sigma is None else sigma
        out = policy_act(x_scaled, l, prices, self.kparams, self.theta, sigma, rng, self._guess,
                         with_jacobian, self.M, self.eps)
        self._guess = out.active
        return out

    def mean_and_jacobian(self, x_scaled, l, prices, piece: Piece | None = None):
        """u*(theta) and d u*/d theta, reusing ``piece`` when it is still valid."""
        if piece is not None:
            hit = piece.at(self.theta)
            if hit is not None:
                return hit[0], hit[1], piece
        out = policy_act(x_scaled, l, prices, self.kparams, self.theta, 0.0,
                         active_guess=None if piece is None else piece.active,
                         with_jacobian=True, M=self.M, eps=self.eps)
        if out.failed:
            return out.u_star, np.zeros((2, 6)), None
        return out.u_star, out.jacobian, out.piece
