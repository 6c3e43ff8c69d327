"""Reference-signal generators and the attitude set-point differentiation stream.

All position references live in the Z-down world frame, so "2 m altitude"
is p_Z = -2.  The takeoff-then-circle profile offers both a raw switch
(velocity jumps at the transition, reproducing the non-smooth reference the
tracked path smooths over) and a quintic smooth-step blend that is C^2 at
both ends of the blend window.
"""

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

TRAJECTORY_KINDS = ("set-point", "circle", "takeoff-then-circle",
                    "pendulum-circle")


@dataclass(frozen=True)
class ReferenceSample:
    """Position and pendulum references with first and second derivatives."""

    t: float
    pos: np.ndarray
    pos_dot: np.ndarray
    pos_ddot: np.ndarray
    pend: np.ndarray
    pend_dot: np.ndarray
    pend_ddot: np.ndarray


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "set-point"
    radius: float = 1.0
    rate: float = 0.5  # rad/s
    altitude: float = -2.0  # p_Z value (Z-down)
    setpoint: tuple = (0.0, 0.0, -2.0)
    transition_time: float = 5.0
    blend: bool = True
    blend_window: float = 1.0
    pend_radius: float = 0.1  # pendulum-circle amplitude (m)

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.radius < 0 or self.pend_radius < 0:
            raise ValueError("radius must be nonnegative")
        if not math.isfinite(self.rate):
            raise ValueError("rate must be finite")


def _smoothstep5(s):
    """Quintic smooth-step and its first two derivatives on [0, 1]."""
    if s <= 0.0:
        return 0.0, 0.0, 0.0
    if s >= 1.0:
        return 1.0, 0.0, 0.0
    sig = s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)
    dsig = 30.0 * s * s * (1.0 - s) ** 2
    ddsig = 60.0 * s * (1.0 - 3.0 * s + 2.0 * s * s)
    return sig, dsig, ddsig


def _circle(R, k, alt, t):
    c, s = math.cos(k * t), math.sin(k * t)
    pos = np.array([R * c, R * s, alt])
    vel = np.array([-R * k * s, R * k * c, 0.0])
    acc = np.array([-R * k * k * c, -R * k * k * s, 0.0])
    return pos, vel, acc


def sample_trajectory(spec: TrajectorySpec, t: float) -> ReferenceSample:
    """Reference sample at time t with analytic derivatives."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    zero2 = np.zeros(2)
    pend = zero2
    pend_dot = zero2
    pend_ddot = zero2

    if spec.kind == "set-point":
        pos = np.asarray(spec.setpoint, dtype=float)
        vel = np.zeros(3)
        acc = np.zeros(3)
    elif spec.kind == "circle":
        pos, vel, acc = _circle(spec.radius, spec.rate, spec.altitude, t)
    elif spec.kind == "takeoff-then-circle":
        t1 = spec.transition_time
        hold = np.array([spec.radius, 0.0, spec.altitude])
        if t < t1:
            # Quintic climb from z = 0 to the target altitude above (R, 0).
            sig, dsig, ddsig = _smoothstep5(t / t1)
            pos = np.array([spec.radius, 0.0, spec.altitude * sig])
            vel = np.array([0.0, 0.0, spec.altitude * dsig / t1])
            acc = np.array([0.0, 0.0, spec.altitude * ddsig / t1 ** 2])
        else:
            cpos, cvel, cacc = _circle(spec.radius, spec.rate, spec.altitude,
                                       t - t1)
            if not spec.blend or spec.blend_window <= 0:
                pos, vel, acc = cpos, cvel, cacc
            else:
                w = spec.blend_window
                sig, dsig, ddsig = _smoothstep5((t - t1) / w)
                dsig /= w
                ddsig /= w * w
                d = cpos - hold
                pos = hold + sig * d
                vel = sig * cvel + dsig * d
                acc = sig * cacc + 2.0 * dsig * cvel + ddsig * d
    else:  # pendulum-circle
        pos = np.array([0.0, 0.0, spec.altitude])
        vel = np.zeros(3)
        acc = np.zeros(3)
        r, k = spec.pend_radius, spec.rate
        c, s = math.cos(k * t), math.sin(k * t)
        pend = np.array([r * c, r * s])
        pend_dot = np.array([-r * k * s, r * k * c])
        pend_ddot = np.array([-r * k * k * c, -r * k * k * s])

    return ReferenceSample(t=t, pos=pos, pos_dot=vel, pos_ddot=acc,
                           pend=pend, pend_dot=pend_dot, pend_ddot=pend_ddot)


class SetpointDifferentiator:
    """Backward finite-difference estimates of set-point derivatives.

    Single-consumer stream: push one sample per control step at uniform
    spacing dt.  Returns first-order differences once two samples exist and
    second-order backward differences plus the three-point second-derivative
    stencil once three do.  The first two steps are flagged as startup.
    """

    def __init__(self, dt: float, dim: int = 3):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.dt = dt
        self.dim = dim
        self._hist = deque(maxlen=3)

    def update(self, value):
        value = np.asarray(value, dtype=float)
        self._hist.append(value.copy())
        n = len(self._hist)
        if n == 1:
            return np.zeros(self.dim), np.zeros(self.dim), True
        if n == 2:
            x1, x2 = self._hist
            return (x2 - x1) / self.dt, np.zeros(self.dim), True
        x0, x1, x2 = self._hist
        d1 = (3.0 * x2 - 4.0 * x1 + x0) / (2.0 * self.dt)
        d2 = (x2 - 2.0 * x1 + x0) / (self.dt * self.dt)
        return d1, d2, False
