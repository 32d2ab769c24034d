"""Quadrotor rigid-body model driven by individual rotor thrusts.

The state is packed into a flat vector of 16 floats for the compiled kernels::

    [p_WB (3), q_WB (4, w-first), v_WB (3), omega_B (3), a_WB (3)]

``a_WB`` is not integrated. It caches the linear acceleration evaluated at the
start of the most recent integration step so that observations can report it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

STATE_DIM = 16
P, Q, V, W, A = slice(0, 3), slice(3, 7), slice(7, 10), slice(10, 13), slice(13, 16)

# packed parameter vector layout
PRM_M, PRM_JX, PRM_JY, PRM_JZ, PRM_L, PRM_KAPPA, PRM_G, PRM_FMIN, PRM_FMAX = range(9)

SQRT1_2 = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class QuadParams:
    """Physical parameters of the vehicle.

    The per-rotor upper limit is derived from the thrust-to-weight ratio:
    ``f_max = thrust_to_weight * mass * gravity / 4``.
    """

    mass: float = 1.0
    inertia_diag: tuple[float, float, float] = (0.003, 0.003, 0.005)
    arm_length: float = 0.17
    torque_const: float = 0.01
    gravity: float = 9.81
    thrust_to_weight: float = 6.4
    f_min: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "inertia_diag", tuple(float(j) for j in self.inertia_diag))
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if len(self.inertia_diag) != 3 or min(self.inertia_diag) <= 0:
            raise ValueError("inertia_diag needs three positive entries")
        if self.arm_length <= 0:
            raise ValueError("arm_length must be positive")
        if self.thrust_to_weight <= 0:
            raise ValueError("thrust_to_weight must be positive")
        if not 0 <= self.f_min < self.f_max:
            raise ValueError(f"need 0 <= f_min < f_max, got f_min={self.f_min}, f_max={self.f_max}")

    @property
    def f_max(self) -> float:
        return self.thrust_to_weight * self.mass * self.gravity / 4.0

    @property
    def hover_thrust(self) -> float:
        """Per-rotor thrust that balances gravity."""
        return self.mass * self.gravity / 4.0

    def packed(self) -> np.ndarray:
        jx, jy, jz = self.inertia_diag
        return np.array(
            [self.mass, jx, jy, jz, self.arm_length, self.torque_const,
             self.gravity, self.f_min, self.f_max],
            dtype=np.float64,
        )


@dataclass
class QuadState:
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    a: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.q, self.v, self.w, self.a]).astype(np.float64)

    @classmethod
    def from_vector(cls, x: np.ndarray) -> QuadState:
        x = np.asarray(x, dtype=np.float64)
        return cls(x[P].copy(), x[Q].copy(), x[V].copy(), x[W].copy(), x[A].copy())

    @property
    def rotation(self) -> np.ndarray:
        from gateracer.geometry import quat_to_rot

        return quat_to_rot(np.ascontiguousarray(self.q, dtype=np.float64))


@dataclass(frozen=True)
class RotorCommand:
    f: np.ndarray

    @classmethod
    def clamped(cls, f, params: QuadParams) -> RotorCommand:
        return cls(np.clip(np.asarray(f, dtype=np.float64), params.f_min, params.f_max))


@dataclass(frozen=True)
class Wrench:
    c: float
    eta: np.ndarray


@njit(cache=True, nogil=True)
def _wrench(f, prm):
    k = prm[PRM_L] * SQRT1_2
    c = (f[0] + f[1] + f[2] + f[3]) / prm[PRM_M]
    e0 = k * (f[0] - f[1] - f[2] + f[3])
    e1 = k * (-f[0] - f[1] + f[2] + f[3])
    e2 = prm[PRM_KAPPA] * (f[0] - f[1] + f[2] - f[3])
    return c, e0, e1, e2


@njit(cache=True, nogil=True)
def _deriv(x, c, e0, e1, e2, prm, dx):
    """Time derivative of the first 13 state entries, written into ``dx``."""
    qw, qx, qy, qz = x[3], x[4], x[5], x[6]
    wx, wy, wz = x[10], x[11], x[12]
    dx[0] = x[7]
    dx[1] = x[8]
    dx[2] = x[9]
    # q_dot = 0.5 * q (x) [0, w]
    dx[3] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    dx[4] = 0.5 * (qw * wx + qy * wz - qz * wy)
    dx[5] = 0.5 * (qw * wy - qx * wz + qz * wx)
    dx[6] = 0.5 * (qw * wz + qx * wy - qy * wx)
    # thrust along body z rotated into the world frame, plus gravity
    dx[7] = c * 2.0 * (qx * qz + qw * qy)
    dx[8] = c * 2.0 * (qy * qz - qw * qx)
    dx[9] = c * (1.0 - 2.0 * (qx * qx + qy * qy)) - prm[PRM_G]
    jx, jy, jz = prm[PRM_JX], prm[PRM_JY], prm[PRM_JZ]
    dx[10] = (e0 - (wy * jz * wz - wz * jy * wy)) / jx
    dx[11] = (e1 - (wz * jx * wx - wx * jz * wz)) / jy
    dx[12] = (e2 - (wx * jy * wy - wy * jx * wx)) / jz


@njit(cache=True, nogil=True)
def _rk4(x, c, e0, e1, e2, dt, prm):
    """One classical RK4 step of ``x`` in place with the wrench held constant."""
    k1 = np.empty(13)
    k2 = np.empty(13)
    k3 = np.empty(13)
    k4 = np.empty(13)
    tmp = np.empty(13)
    _deriv(x, c, e0, e1, e2, prm, k1)
    for i in range(13):
        tmp[i] = x[i] + 0.5 * dt * k1[i]
    _deriv(tmp, c, e0, e1, e2, prm, k2)
    for i in range(13):
        tmp[i] = x[i] + 0.5 * dt * k2[i]
    _deriv(tmp, c, e0, e1, e2, prm, k3)
    for i in range(13):
        tmp[i] = x[i] + dt * k3[i]
    _deriv(tmp, c, e0, e1, e2, prm, k4)
    h = dt / 6.0
    for i in range(13):
        x[i] = x[i] + h * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    n = math.sqrt(x[3] * x[3] + x[4] * x[4] + x[5] * x[5] + x[6] * x[6])
    for i in range(3, 7):
        x[i] = x[i] / n
    x[13] = k1[7]
    x[14] = k1[8]
    x[15] = k1[9]


@njit(cache=True, nogil=True)
def _clamp_rotors(f, prm, out):
    for i in range(4):
        out[i] = min(max(f[i], prm[PRM_FMIN]), prm[PRM_FMAX])


@njit(cache=True, nogil=True)
def _step_rk4(x, f, dt, prm):
    fc = np.empty(4)
    _clamp_rotors(f, prm, fc)
    c, e0, e1, e2 = _wrench(fc, prm)
    out = x.copy()
    _rk4(out, c, e0, e1, e2, dt, prm)
    return out


def rotor_to_wrench(cmd: RotorCommand, params: QuadParams) -> Wrench:
    c, e0, e1, e2 = _wrench(np.asarray(cmd.f, dtype=np.float64), params.packed())
    return Wrench(c, np.array([e0, e1, e2]))


def derivative(state: QuadState, wrench: Wrench, params: QuadParams) -> QuadState:
    """State derivative returned as a ``QuadState`` (``a`` holds zeros)."""
    dx = np.zeros(STATE_DIM)
    e = np.asarray(wrench.eta, dtype=np.float64)
    _deriv(state.to_vector(), float(wrench.c), e[0], e[1], e[2], params.packed(), dx)
    return QuadState.from_vector(dx)


def step_rk4(state: QuadState, cmd: RotorCommand, dt: float, params: QuadParams) -> QuadState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = _step_rk4(state.to_vector(), np.asarray(cmd.f, dtype=np.float64), float(dt), params.packed())
    return QuadState.from_vector(x)


def hover_state(position=(0.0, 0.0, 0.0), yaw: float = 0.0) -> QuadState:
    return QuadState(
        p=np.asarray(position, dtype=np.float64).copy(),
        q=np.array([math.cos(0.5 * yaw), 0.0, 0.0, math.sin(0.5 * yaw)]),
    )
