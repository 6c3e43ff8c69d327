"""Numerical machinery: fixed-step integration, CARE, a dense QP solver,
and a finite-difference linearizer.

The CARE solver uses the Hamiltonian invariant-subspace method (real Schur
form with left-half-plane ordering) followed by a Kleinman-Newton refinement
pass so the residual contract holds even on marginally conditioned problems.

The QP solver is a primal active-set method for small dense problems
(inequality constraints only, convention A_ineq @ x <= b_ineq).
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize


class NonFiniteDerivativeError(RuntimeError):
    """The supplied derivative produced NaN or infinity."""


class CareError(RuntimeError):
    """No stabilizing CARE solution (pair not stabilizable) or bad problem."""


class QpInfeasibleError(RuntimeError):
    """QP has an empty feasible region."""

    def __init__(self, msg, violated_rows=()):
        super().__init__(msg)
        self.violated_rows = tuple(violated_rows)


class QpUnboundedError(RuntimeError):
    """QP objective is unbounded below along a feasible ray."""


@dataclass(frozen=True)
class StepperConfig:
    dt: float = 1e-3
    method: str = "rk4"  # "rk4" or "euler"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.method not in ("rk4", "euler"):
            raise ValueError(f"unknown stepper method {self.method!r}")


def rk4_step(deriv, x, dt, t=None):
    """One classical fourth-order Runge-Kutta step of x' = deriv(x)."""
    x = np.asarray(x, dtype=float)
    k1 = np.asarray(deriv(x))
    k2 = np.asarray(deriv(x + 0.5 * dt * k1))
    k3 = np.asarray(deriv(x + 0.5 * dt * k2))
    k4 = np.asarray(deriv(x + dt * k3))
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        when = "" if t is None else f" at t = {t:.6g} s"
        raise NonFiniteDerivativeError(f"non-finite derivative{when}")
    return out


def euler_step(deriv, x, dt, t=None):
    """One explicit Euler step; kept for integrator cross-checks."""
    x = np.asarray(x, dtype=float)
    out = x + dt * np.asarray(deriv(x))
    if not np.all(np.isfinite(out)):
        when = "" if t is None else f" at t = {t:.6g} s"
        raise NonFiniteDerivativeError(f"non-finite derivative{when}")
    return out


@dataclass(frozen=True)
class CareProblem:
    """F'P + PF - P G R^-1 G' P + Q = 0 with symmetric positive definite Q, R."""

    F: np.ndarray
    G: np.ndarray
    Q: np.ndarray
    R: np.ndarray = None

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        G = np.asarray(self.G, dtype=float)
        if G.ndim == 1:
            G = G[:, None]
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = self.R
        if R is None:
            R = np.eye(G.shape[1])
        R = np.atleast_2d(np.asarray(R, dtype=float))
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)


def care_residual(prob: CareProblem, P) -> float:
    F, G, Q, R = prob.F, prob.G, prob.Q, prob.R
    S = G @ np.linalg.solve(R, G.T)
    return np.linalg.norm(F.T @ P + P @ F - P @ S @ P + Q, "fro")


def solve_care(prob: CareProblem) -> np.ndarray:
    """Stabilizing solution of the continuous algebraic Riccati equation."""
    F, G, Q, R = prob.F, prob.G, prob.Q, prob.R
    n = F.shape[0]
    if not np.allclose(Q, Q.T):
        raise CareError("Q must be symmetric")
    if np.min(np.linalg.eigvalsh(Q)) < -1e-12:
        raise CareError("Q must be positive semidefinite")
    if np.min(np.linalg.eigvalsh(R)) <= 0:
        raise CareError("R must be positive definite")

    S = G @ np.linalg.solve(R, G.T)
    ham = np.block([[F, -S], [-Q, -F.T]])
    _, U, ndim = scipy.linalg.schur(ham, sort="lhp")
    if ndim != n:
        raise CareError(
            f"expected {n} stable Hamiltonian eigenvalues, found {ndim}; "
            "the pair (F, G) is likely not stabilizable")
    U11 = U[:n, :n]
    U21 = U[n:, :n]
    try:
        P = np.linalg.solve(U11.T, U21.T).T
    except np.linalg.LinAlgError as exc:
        raise CareError("singular invariant-subspace basis") from exc
    P = 0.5 * (P + P.T)

    # Kleinman-Newton refinement: each pass solves a Lyapunov equation for
    # the current gain and is quadratically convergent near the solution.
    qnorm = np.linalg.norm(Q, "fro")
    for _ in range(10):
        if care_residual(prob, P) < 1e-10 * max(qnorm, 1.0):
            break
        K = np.linalg.solve(R, G.T @ P)
        Acl = F - G @ K
        rhs = -(Q + K.T @ R @ K)
        P_next = scipy.linalg.solve_continuous_lyapunov(Acl.T, rhs)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            break
        P = P_next

    if care_residual(prob, P) >= 1e-8 * max(qnorm, 1.0):
        raise CareError("CARE residual contract not met")
    if np.min(np.linalg.eigvalsh(P)) <= 0:
        raise CareError("CARE solution is not positive definite")
    Acl = F - S @ P
    if np.max(np.linalg.eigvals(Acl).real) >= -1e-10:
        raise CareError("closed loop is not strictly stable")
    return P


@dataclass(frozen=True)
class QpProblem:
    """min 1/2 x'Hx + f'x  s.t.  A_ineq @ x <= b_ineq."""

    H: np.ndarray
    f: np.ndarray
    A_ineq: np.ndarray = None
    b_ineq: np.ndarray = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        f = np.atleast_1d(np.asarray(self.f, dtype=float))
        n = H.shape[0]
        if H.shape != (n, n):
            raise ValueError("H must be square")
        if f.shape != (n,):
            raise ValueError("f length must match H")
        A = self.A_ineq
        b = self.b_ineq
        if A is None:
            A = np.zeros((0, n))
            b = np.zeros(0)
        A = np.asarray(A, dtype=float).reshape(-1, n)
        b = np.atleast_1d(np.asarray(b, dtype=float))
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "A_ineq", A)
        object.__setattr__(self, "b_ineq", b)


@dataclass
class QpResult:
    x: np.ndarray
    active_set: tuple
    multipliers: np.ndarray  # one per constraint row, zero if inactive
    iterations: int

    def objective(self, prob: QpProblem) -> float:
        return float(0.5 * self.x @ prob.H @ self.x + prob.f @ self.x)


def _feasible_start(A, b, n, tol):
    """Point satisfying Ax <= b, via phase-1 LP when the origin fails."""
    x0 = np.zeros(n)
    if A.shape[0] == 0 or np.all(A @ x0 <= b + tol):
        return x0
    # minimize t  s.t.  Ax - t <= b, t >= 0
    k = A.shape[0]
    c = np.zeros(n + 1)
    c[-1] = 1.0
    A_ub = np.hstack([A, -np.ones((k, 1))])
    bounds = [(None, None)] * n + [(0, None)]
    res = scipy.optimize.linprog(c, A_ub=A_ub, b_ub=b, bounds=bounds,
                                 method="highs")
    if not res.success or res.x[-1] > 1e-7:
        viol = np.where(A @ (res.x[:n] if res.success else x0) > b + tol)[0]
        raise QpInfeasibleError("QP constraints are infeasible",
                                violated_rows=viol)
    return res.x[:n]


def solve_qp(prob: QpProblem, x0=None, max_iter=200) -> QpResult:
    """Primal active-set solution of a small dense convex QP."""
    H, f, A, b = prob.H, prob.f, prob.A_ineq, prob.b_ineq
    n = H.shape[0]
    k = A.shape[0]
    tol = 1e-10

    if x0 is not None:
        x = np.asarray(x0, dtype=float).copy()
        if k and not np.all(A @ x <= b + 1e-9):
            x = _feasible_start(A, b, n, tol)
    else:
        x = _feasible_start(A, b, n, tol)

    work = [i for i in range(k) if A[i] @ x >= b[i] - 1e-9]
    # Keep the working set linearly independent.
    if len(work) > n:
        work = work[:n]

    lam_full = np.zeros(k)
    for it in range(1, max_iter + 1):
        Aw = A[work] if work else np.zeros((0, n))
        grad = H @ x + f
        m = len(work)
        KKT = np.block([[H, Aw.T], [Aw, np.zeros((m, m))]])
        rhs = np.concatenate([-grad, np.zeros(m)])
        try:
            sol = np.linalg.solve(KKT, rhs)
            consistent = np.all(np.isfinite(sol))
        except np.linalg.LinAlgError:
            consistent = False
        if not consistent:
            sol, *_ = np.linalg.lstsq(KKT, rhs, rcond=None)
            if np.linalg.norm(KKT @ sol - rhs) > 1e-8 * (1 + np.linalg.norm(rhs)):
                # The gradient has a component in the common null space of H
                # and the working constraints: a feasible descent ray unless
                # an inactive constraint blocks it.
                null = scipy.linalg.null_space(np.vstack([H, Aw]))
                d = -null @ (null.T @ grad)
                others = [i for i in range(k) if i not in work]
                if not others or np.all(A[others] @ d <= tol):
                    raise QpUnboundedError(
                        "objective unbounded along feasible ray")
                sol = np.concatenate([d, np.zeros(m)])
        p = sol[:n]
        lam = sol[n:]

        if np.linalg.norm(p) <= 1e-11 * (1.0 + np.linalg.norm(x)):
            if m == 0 or np.all(lam >= -1e-9):
                lam_full[:] = 0.0
                for i, ci in enumerate(work):
                    lam_full[ci] = max(lam[i], 0.0)
                return QpResult(x=x, active_set=tuple(sorted(work)),
                                multipliers=lam_full, iterations=it)
            work.pop(int(np.argmin(lam)))
            continue

        # Unbounded descent is only possible with singular H.
        if np.linalg.norm(H @ p) <= 1e-12 and grad @ p < -1e-12:
            others = [i for i in range(k) if i not in work]
            if not others or np.all(A[others] @ p <= tol):
                raise QpUnboundedError("objective unbounded along feasible ray")

        alpha = 1.0
        blocker = None
        for i in range(k):
            if i in work:
                continue
            ai_p = A[i] @ p
            if ai_p > tol:
                step = (b[i] - A[i] @ x) / ai_p
                if step < alpha - 1e-14:
                    alpha = max(step, 0.0)
                    blocker = i
        x = x + alpha * p
        if blocker is not None:
            work.append(blocker)

    raise RuntimeError("active-set QP did not converge")


def linearize(f, x0, u0, eps=1e-5):
    """Central finite-difference Jacobians (A, B) of xdot = f(x, u)."""
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    n = x0.size
    m = u0.size
    f0 = np.asarray(f(x0, u0), dtype=float)
    A = np.zeros((f0.size, n))
    B = np.zeros((f0.size, m))
    for j in range(n):
        dx = np.zeros(n)
        dx[j] = eps
        hi = np.asarray(f(x0 + dx, u0), dtype=float)
        lo = np.asarray(f(x0 - dx, u0), dtype=float)
        col = (hi - lo) / (2.0 * eps)
        if not np.all(np.isfinite(col)):
            raise NonFiniteDerivativeError(f"non-finite sample in state column {j}")
        A[:, j] = col
    for j in range(m):
        du = np.zeros(m)
        du[j] = eps
        hi = np.asarray(f(x0, u0 + du), dtype=float)
        lo = np.asarray(f(x0, u0 - du), dtype=float)
        col = (hi - lo) / (2.0 * eps)
        if not np.all(np.isfinite(col)):
            raise NonFiniteDerivativeError(f"non-finite sample in input column {j}")
        B[:, j] = col
    return A, B
