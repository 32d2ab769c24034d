"""Scripted center-line pilot with privileged access to the simulator state.

It tracks a carrot point on the active center-line segment with a cascaded
position / attitude / body-rate controller and converts the resulting wrench
into rotor thrusts by inverting the mixer. It serves as an oracle for
evaluation tests and as the default policy for observation statistics.
"""

from __future__ import annotations

import math

import numpy as np

from gateracer.dynamics import QuadParams
from gateracer.env import forces_to_actions


def mixer_matrix(params: QuadParams) -> np.ndarray:
    k = params.arm_length / math.sqrt(2.0)
    kap = params.torque_const
    return np.array(
        [
            [1.0, 1.0, 1.0, 1.0],
            [k, -k, -k, k],
            [-k, -k, k, k],
            [kap, -kap, kap, -kap],
        ]
    )


def _quat_to_rot_batch(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


class ScriptedPilot:
    def __init__(self, params: QuadParams, speed: float = 3.0, lookahead: float = 1.5,
                 kp: float = 3.0, kd: float = 3.0, k_att: float = 6.0, k_rate: float = 20.0,
                 max_tilt_deg: float = 40.0):
        self.params = params
        self.speed = speed
        self.lookahead = lookahead
        self.kp, self.kd = kp, kd
        self.k_att, self.k_rate = k_att, k_rate
        self.max_tilt = math.radians(max_tilt_deg)
        self.J = np.array(params.inertia_diag)
        self.mix_inv = np.linalg.inv(mixer_matrix(params))

    def __call__(self, obs, core) -> np.ndarray:
        n = core.n
        idx = np.arange(n)
        x = core.x
        p, v, w = x[:, 0:3], x[:, 7:10], x[:, 10:13]
        k = core.nxt
        g2 = core.centers[idx, k]
        prev = np.where(k > 0, k - 1, core.ngates - 1)
        g1 = np.where(((k == 0) & (core.lap == 0))[:, None], core.start, core.centers[idx, prev])
        seg = g2 - g1
        seg_len = np.linalg.norm(seg, axis=1)
        d = seg / seg_len[:, None]
        s = np.einsum("ij,ij->i", p - g1, d)
        target = g1 + d * np.clip(s + self.lookahead, 0.0, seg_len)[:, None]

        g = self.params.gravity
        a_des = self.kp * (target - p) + self.kd * (self.speed * d - v)
        a_des[:, 2] += g
        # tilt limit
        horiz = np.linalg.norm(a_des[:, :2], axis=1)
        a_des[:, 2] = np.maximum(a_des[:, 2], 0.2 * g)
        max_h = a_des[:, 2] * math.tan(self.max_tilt)
        scale = np.where(horiz > max_h, max_h / np.maximum(horiz, 1e-9), 1.0)
        a_des[:, :2] *= scale[:, None]

        R = _quat_to_rot_batch(x[:, 3:7])
        zb = a_des / np.linalg.norm(a_des, axis=1, keepdims=True)
        yaw = np.arctan2(d[:, 1], d[:, 0])
        xc = np.stack([np.cos(yaw), np.sin(yaw), np.zeros(n)], axis=1)
        yb = np.cross(zb, xc)
        yb /= np.linalg.norm(yb, axis=1, keepdims=True)
        xb = np.cross(yb, zb)
        Rd = np.stack([xb, yb, zb], axis=2)

        E = np.einsum("nji,njk->nik", Rd, R) - np.einsum("nji,njk->nik", R, Rd)
        e_R = 0.5 * np.stack([E[:, 2, 1], E[:, 0, 2], E[:, 1, 0]], axis=1)
        w_des = -self.k_att * e_R
        Jw = w * self.J
        eta = self.J * (self.k_rate * (w_des - w)) + np.cross(w, Jw)

        thrust = self.params.mass * np.einsum("ij,ij->i", a_des, R[:, :, 2])
        wrench = np.column_stack([thrust, eta])
        f = wrench @ self.mix_inv.T
        f = np.clip(f, self.params.f_min, self.params.f_max)
        return forces_to_actions(f, self.params)
