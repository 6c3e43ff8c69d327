"""Controller syntheses for the quadrotor and the coupled pendulum.

Four families:

* feedback-linearizing output regulation/tracking on y = [p_Z, phi, theta, psi]
  (vector relative degree [2, 2, 2, 2]),
* a CLF-QP that picks the minimum-effort virtual input satisfying the
  Lyapunov decrease inequality and the rotor box constraints,
* pendulum feedback linearization producing a desired vehicle acceleration,
  either through the pseudo-inverse of the full 2x3 coupling matrix (xi) or
  the inverse of its planar 2x2 restriction (xi'),
* a combined pendulum + horizontal-position LQR that emits roll/pitch
  set-points from the linearized 8-state model.

Position-to-attitude force allocation (zero yaw) bridges desired
accelerations and attitude set-points for the inner loop.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .models import (ControlCommand, PendulumParams, PendulumState, QuadState,
                     SingularAttitudeError, VehicleParams, euler_rate_matrix,
                     gravity_direction_map, mixer_matrix,
                     pendulum_drift_and_coupling)
from .numerics import CareProblem, QpProblem, QpInfeasibleError, solve_care, solve_qp

DECOUPLING_MARGIN = 1e-6


class AllocationError(ValueError):
    """Desired force vector too small to define a thrust direction."""


@dataclass(frozen=True)
class FblTerms:
    """Drift vector and decoupling matrix of the output dynamics."""

    Lf_h: np.ndarray  # (4,)
    A_x: np.ndarray   # (4, 4), acts on the body wrench [f_z, tau]


@dataclass(frozen=True)
class OutputReference:
    """Desired output [p_Zd, phi_d, theta_d, psi_d] and its derivatives."""

    y_d: np.ndarray
    y_d_dot: np.ndarray
    y_d_ddot: np.ndarray


@dataclass(frozen=True)
class AttitudeSetpoint:
    """Desired Euler angles, their numeric derivatives, and thrust magnitude."""

    q_d: np.ndarray
    q_d_dot: np.ndarray
    q_d_ddot: np.ndarray
    f_zd_norm: float


@dataclass(frozen=True)
class TrackingGains:
    """Gain set for every controller family; see README for defaults."""

    alpha1: float = 100.0
    alpha2: float = 20.0
    kp: float = 4.0
    kd: float = 4.0
    q_care: float = 1.0       # scalar multiple of I_8
    k1: float = 8.0           # pendulum velocity gain
    k2: float = 16.0          # pendulum position gain
    q_lqr: tuple = (10.0, 10.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    r_lqr: tuple = (100.0, 100.0)
    attitude_clamp: float = 0.5  # rad, LQR set-point clamp


def output_error_matrices():
    """Double-integrator error dynamics (F, G) of the four outputs."""
    F = np.zeros((8, 8))
    F[:4, 4:] = np.eye(4)
    G = np.zeros((8, 4))
    G[4:, :] = np.eye(4)
    return F, G


@dataclass(frozen=True)
class OutputClf:
    """CARE-based CLF for the output error dynamics: V = eta' P eta."""

    P: np.ndarray
    c3: float
    Q: np.ndarray
    F: np.ndarray
    G: np.ndarray


def setup_output_clf(q_care=1.0) -> OutputClf:
    F, G = output_error_matrices()
    Q = np.eye(8) * float(q_care) if np.isscalar(q_care) else np.asarray(q_care)
    P = solve_care(CareProblem(F=F, G=G, Q=Q))
    c3 = float(np.min(np.linalg.eigvalsh(Q)) / np.max(np.linalg.eigvalsh(P)))
    return OutputClf(P=P, c3=c3, Q=Q, F=F, G=G)


def _euler_rate_jacobian(q, omega):
    """Jacobian of Z(q) @ omega with respect to q (3x3)."""
    phi, theta = float(q[0]), float(q[1])
    wy, wz = float(omega[1]), float(omega[2])
    sphi, cphi = math.sin(phi), math.cos(phi)
    cth = math.cos(theta)
    tth = math.tan(theta)
    sec = 1.0 / cth
    J = np.zeros((3, 3))
    J[0, 0] = (cphi * wy - sphi * wz) * tth
    J[0, 1] = (sphi * wy + cphi * wz) * sec * sec
    J[1, 0] = -sphi * wy - cphi * wz
    J[2, 0] = (cphi * wy - sphi * wz) * sec
    J[2, 1] = (sphi * wy + cphi * wz) * sec * tth
    return J


def output_vector(s: QuadState):
    """Output y = [p_Z, phi, theta, psi] and its derivative."""
    y = np.array([s.p[2], s.q[0], s.q[1], s.q[2]])
    q_dot = euler_rate_matrix(s.q) @ s.omega
    y_dot = np.concatenate([[s.v[2]], q_dot])
    return y, y_dot


def fbl_terms(s: QuadState, p: VehicleParams) -> FblTerms:
    """Drift Lf_h and decoupling A(x) of the second output derivative."""
    phi, theta = float(s.q[0]), float(s.q[1])
    cc = math.cos(phi) * math.cos(theta)
    if abs(cc) < DECOUPLING_MARGIN:
        raise SingularAttitudeError(
            "decoupling singularity: cos(phi)cos(theta) below margin")
    Z = euler_rate_matrix(s.q)
    I = p.inertia
    Iw = I * s.omega
    gyro = np.cross(Iw, s.omega) / I
    q_dot = Z @ s.omega
    Lf_att = _euler_rate_jacobian(s.q, s.omega) @ q_dot + Z @ gyro
    Lf_h = np.concatenate([[p.g], Lf_att])
    A_x = np.zeros((4, 4))
    A_x[0, 0] = -cc / p.m
    A_x[1:, 1:] = Z / I  # Z @ diag(1/I)
    return FblTerms(Lf_h=Lf_h, A_x=A_x)


def _decoupling_inverse(terms: FblTerms, p: VehicleParams):
    """(A(x) B)^-1 mapping virtual output accelerations to rotor commands."""
    return np.linalg.inv(terms.A_x @ mixer_matrix(p))


def fbl_regulator(s: QuadState, y_d, p: VehicleParams,
                  clf: OutputClf) -> ControlCommand:
    """Set-point regulation u = (A(x)B)^-1 (-Lf_h - G'P eta)."""
    terms = fbl_terms(s, p)
    y, y_dot = output_vector(s)
    eta = np.concatenate([y - np.asarray(y_d, dtype=float), y_dot])
    v = -(clf.P @ eta)[4:]
    u = _decoupling_inverse(terms, p) @ (-terms.Lf_h + v)
    return ControlCommand.from_rotor_commands(u, p)


def fbl_tracker(s: QuadState, ref: OutputReference, p: VehicleParams,
                alpha1=100.0, alpha2=20.0) -> ControlCommand:
    """PD trajectory tracking with exact feedforward of the reference."""
    terms = fbl_terms(s, p)
    y, y_dot = output_vector(s)
    w = (ref.y_d_ddot
         - np.asarray(alpha2) * (y_dot - ref.y_d_dot)
         - np.asarray(alpha1) * (y - ref.y_d))
    u = _decoupling_inverse(terms, p) @ (-terms.Lf_h + w)
    return ControlCommand.from_rotor_commands(u, p)


def attitude_from_force(f_d, m: float):
    """Zero-yaw Euler angles aligning the thrust axis with a force demand.

    Branch choice keeps the thrust pointing body-up (cos(theta_d) > 0 for
    f_zd < 0 in the Z-down frame); the reconstruction identity
    g1(q_d) * m * ||f_d|| == f_d holds exactly.
    """
    f_d = np.asarray(f_d, dtype=float)
    norm = float(np.linalg.norm(f_d))
    if norm < 1e-6:
        raise AllocationError("degenerate force demand (norm below 1e-6)")
    phi_d = math.asin(f_d[1] / norm)
    theta_d = math.atan2(-f_d[0], -f_d[2])
    return np.array([phi_d, theta_d, 0.0]), m * norm


def position_allocation(pos, vel, ref_pos, ref_vel, ref_acc, kp, kd,
                        g: float, m: float):
    """Desired force (PD + feedforward, gravity in the z row) and attitude.

    Returns (f_d, q_d, thrust_norm) with q_d = (phi_d, theta_d, 0).
    """
    pos = np.asarray(pos, dtype=float)
    vel = np.asarray(vel, dtype=float)
    f_d = (np.asarray(ref_acc, dtype=float)
           + kd * (np.asarray(ref_vel, dtype=float) - vel)
           + kp * (np.asarray(ref_pos, dtype=float) - pos))
    f_d[2] -= g
    q_d, thrust = attitude_from_force(f_d, m)
    return f_d, q_d, thrust


@dataclass
class QpReport:
    """Per-step CLF-QP diagnostics for the simulation log."""

    feasible: bool = True
    relaxed: bool = False
    fault: bool = False
    slack: float = 0.0
    active_set: tuple = ()
    iterations: int = 0


# L1 penalty on the CLF decrease slack when the raw QP is infeasible.
CLF_SLACK_WEIGHT = 1e3


def clf_qp_controller(s: QuadState, ref: OutputReference, p: VehicleParams,
                      clf: OutputClf):
    """Minimum-effort virtual input subject to CLF decrease and rotor bounds.

    The rotor box constraints are kept hard; on infeasibility the decrease
    row is relaxed with an L1-penalized slack and the step is flagged.
    Returns (ControlCommand, QpReport).
    """
    terms = fbl_terms(s, p)
    M = _decoupling_inverse(terms, p)
    y, y_dot = output_vector(s)
    eta = np.concatenate([y - ref.y_d, y_dot - ref.y_d_dot])
    P, F, G = clf.P, clf.F, clf.G

    # u = M (v + y_d_ddot - Lf_h); error dynamics eta_dot = F eta + G v.
    clf_row = 2.0 * (eta @ P @ G)
    clf_rhs = -float(eta @ (F.T @ P + P @ F + clf.c3 * P) @ eta)
    shift = M @ (ref.y_d_ddot - terms.Lf_h)
    u_min = np.asarray(p.u_min, dtype=float)
    u_max = np.asarray(p.u_max, dtype=float)

    A = np.vstack([clf_row, M, -M])
    b = np.concatenate([[clf_rhs], u_max - shift, -(u_min - shift)])

    # Cheap exits: v = 0 when the decrease row is slack at the origin, and
    # the analytic projection onto the decrease hyperplane otherwise.
    report = QpReport()
    v = None
    if clf_rhs >= 0.0 and np.all(shift >= u_min - 1e-12) \
            and np.all(shift <= u_max + 1e-12):
        v = np.zeros(4)
    else:
        nrm2 = float(clf_row @ clf_row)
        if nrm2 > 1e-14 and clf_rhs < 0.0:
            cand = clf_row * (clf_rhs / nrm2)
            u_cand = M @ cand + shift
            if np.all(u_cand >= u_min - 1e-12) and np.all(u_cand <= u_max + 1e-12):
                v = cand
                report.active_set = (0,)

    if v is None:
        try:
            res = solve_qp(QpProblem(H=2.0 * np.eye(4), f=np.zeros(4),
                                     A_ineq=A, b_ineq=b))
            v = res.x
            report.active_set = res.active_set
            report.iterations = res.iterations
        except QpInfeasibleError:
            # Relax the decrease row; box rows stay hard.
            H = np.diag([2.0, 2.0, 2.0, 2.0, 2e-6])
            f = np.array([0.0, 0.0, 0.0, 0.0, CLF_SLACK_WEIGHT])
            A_rel = np.zeros((A.shape[0] + 1, 5))
            A_rel[:A.shape[0], :4] = A
            A_rel[0, 4] = -1.0  # CLF row minus slack
            A_rel[-1, 4] = -1.0  # slack >= 0
            b_rel = np.concatenate([b, [0.0]])
            res = solve_qp(QpProblem(H=H, f=f, A_ineq=A_rel, b_ineq=b_rel))
            v = res.x[:4]
            report.relaxed = True
            report.slack = float(res.x[4])
            report.active_set = res.active_set
            report.iterations = res.iterations

    u = M @ v + shift
    return ControlCommand.from_rotor_commands(u, p), report


def _pendulum_nu(ps: PendulumState, ref_pend, ref_pend_dot, ref_pend_ddot,
                 k1: float, k2: float):
    y_p = np.array([ps.a, ps.b])
    y_p_dot = np.array([ps.a_dot, ps.b_dot])
    return (np.asarray(ref_pend_ddot, dtype=float)
            - k1 * (y_p_dot - np.asarray(ref_pend_dot, dtype=float))
            - k2 * (y_p - np.asarray(ref_pend, dtype=float)))


def pendulum_fbl_xi(ps: PendulumState, ref_pend, ref_pend_dot, ref_pend_ddot,
                    pp: PendulumParams, g: float, k1=8.0, k2=16.0):
    """Minimum-norm vehicle acceleration xi = B_p^+ (-f_p + nu)."""
    nu = _pendulum_nu(ps, ref_pend, ref_pend_dot, ref_pend_ddot, k1, k2)
    f_p, B_p = pendulum_drift_and_coupling(ps.a, ps.b, ps.a_dot, ps.b_dot,
                                           pp.L, g)
    rhs = -f_p + nu
    # B_p has full row rank inside the valid region, so the pseudo-inverse
    # is B_p' (B_p B_p')^-1.
    return B_p.T @ np.linalg.solve(B_p @ B_p.T, rhs)


def pendulum_fbl_xi_prime(ps: PendulumState, pz_ddot: float, ref_pend,
                          ref_pend_dot, ref_pend_ddot, pp: PendulumParams,
                          g: float, k1=8.0, k2=16.0):
    """Planar acceleration xi' from the 2x2 restriction of B_p.

    The vertical acceleration pz_ddot is supplied externally and folded
    into the drift through the third column of B_p.
    """
    nu = _pendulum_nu(ps, ref_pend, ref_pend_dot, ref_pend_ddot, k1, k2)
    f_p, B_p = pendulum_drift_and_coupling(ps.a, ps.b, ps.a_dot, ps.b_dot,
                                           pp.L, g)
    B_prime = B_p[:, :2]
    if abs(np.linalg.det(B_prime)) < 1e-9:
        raise PendulumCouplingError("planar coupling matrix near singular")
    f_prime = f_p + B_p[:, 2] * pz_ddot
    return np.linalg.solve(B_prime, -f_prime + nu)


class PendulumCouplingError(RuntimeError):
    """Planar pendulum coupling matrix lost invertibility."""


def pendulum_linear_system(g: float, L: float):
    """Linearized pendulum + horizontal-position model about hover.

    State eta_p = [a, b, p_X, p_Y, a_dot, b_dot, pX_dot, pY_dot], inputs
    (phi, theta).  The b row couples to b (the symmetric form; the a-coupled
    variant fails the finite-difference cross-check against the nonlinear
    model).
    """
    A = np.zeros((8, 8))
    A[:4, 4:] = np.eye(4)
    A[4, 0] = 3.0 * g / (4.0 * L)
    A[5, 1] = 3.0 * g / (4.0 * L)
    B = np.zeros((8, 2))
    B[4, 1] = 0.75 * g     # a_ddot <- theta
    B[5, 0] = -0.75 * g    # b_ddot <- phi
    B[6, 1] = -g           # pX_ddot <- theta
    B[7, 0] = g            # pY_ddot <- phi
    return A, B


def setup_pendulum_lqr(g: float, L: float, q_lqr, r_lqr):
    """LQR gain K (2x8) for the linearized pendulum + position model."""
    A, B = pendulum_linear_system(g, L)
    Q = np.diag(np.asarray(q_lqr, dtype=float))
    R = np.diag(np.asarray(r_lqr, dtype=float))
    P = solve_care(CareProblem(F=A, G=B, Q=Q, R=R))
    return np.linalg.solve(R, B.T @ P)


def pendulum_position_lqr(eta_p, eta_ref, K, clamp=0.5):
    """Roll/pitch set-points (phi_d, theta_d) = -K (eta_p - ref), clamped."""
    u = -K @ (np.asarray(eta_p, dtype=float) - np.asarray(eta_ref, dtype=float))
    return np.clip(u, -clamp, clamp)
