"""Continuous-time dynamics of a quadrotor with an inertially coupled spherical pendulum.

Conventions
-----------
World frame is Z-down: gravity is the vector (0, 0, +g) and a hovering
vehicle produces thrust acceleration (0, 0, -g).  Attitude is parametrized
by ZYX Euler angles q = (phi, theta, psi) with body angular velocity omega.

Quadrotor (12 states):

    p_dot     = v
    v_dot     = g*e_Z + g1(q) * f_z
    q_dot     = Z(q) * omega
    omega_dot = I^-1 (I omega x omega) + I^-1 tau

The four rotor commands u map linearly to the body wrench [f_z, tau]
through the mixer matrix B (cross configuration, scaled by rho*D^4).

Spherical pendulum (4 states), attached at the vehicle CoM and light enough
not to back-react on the vehicle.  Its CoM offset from the vehicle CoM is
(a, b, zeta) with zeta = sqrt(L^2 - a^2 - b^2):

    [a_ddot, b_ddot] = f_p(a, b, adot, bdot) + B_p(a, b) * p_ddot
"""

import math
from dataclasses import dataclass, field

import numpy as np


class SingularAttitudeError(ValueError):
    """Pitch at or beyond +-pi/2, where the Euler-rate map is singular."""


class PendulumHorizontalError(ValueError):
    """Pendulum offset reached the horizontal (a^2 + b^2 >= L^2)."""


# Fraction of L at which the harness aborts, before the exact singularity.
PENDULUM_MARGIN = 0.999


@dataclass(frozen=True)
class VehicleParams:
    """Physical and actuation parameters of the quadrotor."""

    m: float = 1.0
    I_diag: tuple = (0.01, 0.01, 0.02)
    rho: float = 1.225
    D: float = 0.2
    C_T: float = 0.1
    C_Q: float = 0.01
    l: float = 0.17
    g: float = 9.81
    u_min: tuple = None
    u_max: tuple = None

    def __post_init__(self):
        if not (self.m > 0 and self.C_T > 0 and self.l > 0 and self.D > 0
                and self.rho > 0):
            raise ValueError("vehicle parameters must be positive")
        if any(i <= 0 for i in self.I_diag):
            raise ValueError("inertia values must be positive")
        if self.u_min is None:
            object.__setattr__(self, "u_min", (0.0,) * 4)
        if self.u_max is None:
            # Total thrust authority of 4x hover by default.
            cap = self.m * self.g / (self.rho * self.D ** 4 * self.C_T)
            object.__setattr__(self, "u_max", (cap,) * 4)
        if not all(lo < hi for lo, hi in zip(self.u_min, self.u_max)):
            raise ValueError("u_min must be below u_max elementwise")

    @property
    def inertia(self):
        return np.asarray(self.I_diag, dtype=float)


@dataclass(frozen=True)
class PendulumParams:
    """Spherical pendulum parameters; the rod has length 2L."""

    L: float = 0.5
    m_p: float = 0.05  # recorded only; too light to affect the vehicle

    def __post_init__(self):
        if self.L <= 0:
            raise ValueError("pendulum half-length must be positive")
        if self.m_p < 0:
            raise ValueError("pendulum mass must be nonnegative")


@dataclass(frozen=True)
class QuadState:
    """Quadrotor state: position, velocity, Euler angles, body rates."""

    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    omega: np.ndarray

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(p=x[0:3].copy(), v=x[3:6].copy(), q=x[6:9].copy(),
                   omega=x[9:12].copy())

    def as_vector(self):
        return np.concatenate([self.p, self.v, self.q, self.omega])

    def validate(self):
        x = self.as_vector()
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite quadrotor state")
        if abs(self.q[1]) >= math.pi / 2:
            raise SingularAttitudeError(
                f"pitch {self.q[1]:.4f} rad at or beyond +-pi/2")


@dataclass(frozen=True)
class PendulumState:
    """Pendulum CoM offsets from the vehicle CoM and their rates."""

    a: float
    b: float
    a_dot: float
    b_dot: float

    @classmethod
    def from_vector(cls, x):
        return cls(a=float(x[0]), b=float(x[1]), a_dot=float(x[2]),
                   b_dot=float(x[3]))

    def as_vector(self):
        return np.array([self.a, self.b, self.a_dot, self.b_dot])


def mixer_matrix(p: VehicleParams) -> np.ndarray:
    """Full-rank cross-configuration mixer mapping rotor commands to wrench."""
    ct, cq, l = p.C_T, p.C_Q, p.l
    B = np.array([
        [ct, ct, ct, ct],
        [0.0, ct * l, 0.0, -ct * l],
        [ct * l, 0.0, -ct * l, 0.0],
        [cq, -cq, cq, -cq],
    ])
    return p.rho * p.D ** 4 * B


def mixer_forward(u, p: VehicleParams) -> np.ndarray:
    """Body wrench [f_z, tau_x, tau_y, tau_z] produced by rotor commands u."""
    return mixer_matrix(p) @ np.asarray(u, dtype=float)


def mixer_inverse(wrench, p: VehicleParams) -> np.ndarray:
    """Rotor commands realizing a wrench exactly; no clamping applied here."""
    return np.linalg.solve(mixer_matrix(p), np.asarray(wrench, dtype=float))


@dataclass(frozen=True)
class ControlCommand:
    """Per-rotor commands and the equivalent body wrench, kept consistent."""

    u: np.ndarray
    wrench: np.ndarray

    @classmethod
    def from_rotor_commands(cls, u, p: VehicleParams):
        u = np.asarray(u, dtype=float)
        return cls(u=u, wrench=mixer_forward(u, p))

    @classmethod
    def from_wrench(cls, wrench, p: VehicleParams):
        wrench = np.asarray(wrench, dtype=float)
        return cls(u=mixer_inverse(wrench, p), wrench=wrench)

    @property
    def f_z(self):
        return float(self.wrench[0])

    @property
    def tau(self):
        return self.wrench[1:4]


def gravity_direction_map(q, m: float) -> np.ndarray:
    """Thrust direction map g1(q); a rotated unit axis scaled by -1/m."""
    phi, theta, psi = float(q[0]), float(q[1]), float(q[2])
    sphi, cphi = math.sin(phi), math.cos(phi)
    sth, cth = math.sin(theta), math.cos(theta)
    sps, cps = math.sin(psi), math.cos(psi)
    return np.array([
        -(sphi * sps + cphi * sth * cps) / m,
        -(-sphi * cps + cphi * sth * sps) / m,
        -(cphi * cth) / m,
    ])


def euler_rate_matrix(q) -> np.ndarray:
    """Map Z(q) from body rates to Euler-angle rates; det Z = sec(theta)."""
    phi, theta = float(q[0]), float(q[1])
    if abs(theta) >= math.pi / 2:
        raise SingularAttitudeError(
            f"pitch {theta:.4f} rad at or beyond +-pi/2")
    sphi, cphi = math.sin(phi), math.cos(phi)
    tth = math.tan(theta)
    sec = 1.0 / math.cos(theta)
    return np.array([
        [1.0, sphi * tth, cphi * tth],
        [0.0, cphi, -sphi],
        [0.0, sphi * sec, cphi * sec],
    ])


def quad_derivative(s: QuadState, c: ControlCommand,
                    p: VehicleParams) -> np.ndarray:
    """Time derivative of the 12-component quadrotor state."""
    f_z = c.f_z
    tau = c.wrench[1:4]
    v_dot = gravity_direction_map(s.q, p.m) * f_z
    v_dot[2] += p.g
    q_dot = euler_rate_matrix(s.q) @ s.omega
    I = p.inertia
    Iw = I * s.omega
    w_dot = (np.cross(Iw, s.omega) + tau) / I
    return np.concatenate([s.v, v_dot, q_dot, w_dot])


def pendulum_zeta(a: float, b: float, L: float) -> float:
    """Vertical offset zeta = sqrt(L^2 - a^2 - b^2) of the pendulum CoM."""
    r2 = a * a + b * b
    if r2 >= L * L:
        raise PendulumHorizontalError(
            f"pendulum horizontal: a^2+b^2 = {r2:.6g} >= L^2 = {L * L:.6g}")
    return math.sqrt(L * L - r2)


def pendulum_drift_and_coupling(a, b, a_dot, b_dot, L, g):
    """Drift term f_p (2,) and coupling matrix B_p (2, 3) of the pendulum."""
    zeta = pendulum_zeta(a, b, L)
    L2 = L * L
    H = (4.0 * b_dot * b_dot * (a * a - L2)
         - 8.0 * a_dot * b_dot * a * b
         + 4.0 * a_dot * a_dot * (b * b - L2)
         + 3.0 * zeta ** 3 * g)
    scale = H / (4.0 * L2 * zeta * zeta)
    f_p = np.array([a * scale, b * scale])
    k = 3.0 / (4.0 * L2)
    B_p = k * np.array([
        [a * a - L2, a * b, a * zeta],
        [a * b, b * b - L2, b * zeta],
    ])
    return f_p, B_p


def pendulum_derivative(ps: PendulumState, quad_accel, pp: PendulumParams,
                        g: float) -> np.ndarray:
    """Pendulum offset accelerations (a_ddot, b_ddot) given the vehicle p_ddot."""
    f_p, B_p = pendulum_drift_and_coupling(
        ps.a, ps.b, ps.a_dot, ps.b_dot, pp.L, g)
    return f_p + B_p @ np.asarray(quad_accel, dtype=float)
