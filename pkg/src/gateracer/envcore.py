"""Compiled per-environment kernels for the racing environments.

Every kernel loops over an index range ``[i0, i1)`` of a batch and treats each
environment independently with scalar arithmetic, so results for one
environment never depend on the batch size or on how the batch is split
across worker threads. Kernels release the GIL.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from gateracer.dynamics import _clamp_rotors, _rk4, _wrench
from gateracer.geometry import quat_to_rot, spherical

# event codes
EV_NONE, EV_CRASH, EV_OOB, EV_TIMEOUT, EV_FINISHED = 0, 1, 2, 3, 4

# output columns of step_envs
(C_RP, C_RS, C_WSQ, C_RT, C_CODE, C_CRASH_GATE, C_DG, C_NPASS, C_PASS0, C_MARGIN0,
 C_PASS1, C_MARGIN1, C_NLAPS, C_LAPTIME, C_LAPNO, C_GATE0) = range(16)
NOUT = 16

QUAD_OBS = 18


@njit(cache=True, nogil=True)
def seg_progress(p, g1, g2):
    dx, dy, dz = g2[0] - g1[0], g2[1] - g1[1], g2[2] - g1[2]
    n = math.sqrt(dx * dx + dy * dy + dz * dz)
    return ((p[0] - g1[0]) * dx + (p[1] - g1[1]) * dy + (p[2] - g1[2]) * dz) / n


@njit(cache=True, nogil=True)
def plane_and_lateral(p, center, R):
    """Distance to the gate plane and to the gate normal axis."""
    ox, oy, oz = p[0] - center[0], p[1] - center[1], p[2] - center[2]
    dn = ox * R[0, 0] + oy * R[1, 0] + oz * R[2, 0]
    lx, ly, lz = ox - dn * R[0, 0], oy - dn * R[1, 0], oz - dn * R[2, 0]
    return abs(dn), math.sqrt(lx * lx + ly * ly + lz * lz)


@njit(cache=True, nogil=True)
def safety_value(d_plane, d_lat, width, d_max):
    if d_max <= 0.0:
        return 0.0
    f = max(1.0 - d_plane / d_max, 0.0)
    v = max((1.0 - f) * (width / 6.0), 0.05)
    return -f * f * (1.0 - math.exp(-0.5 * d_lat * d_lat / v))


@njit(cache=True, nogil=True)
def terminal_value(d_g, width):
    r = d_g / width
    return -min(r * r, 20.0)


@njit(cache=True, nogil=True)
def gate_crossing(p0, p1, center, R, width):
    """Classify the motion ``p0 -> p1`` against one gate.

    Returns ``(kind, value, frac, xc)`` with kind 0 (no crossing), 1 (pass,
    value = margin) or 2 (crash, value = distance of the crossing point to
    the center); ``frac`` locates the crossing along the motion.
    """
    xc = np.empty(3)
    d0 = (p0[0] - center[0]) * R[0, 0] + (p0[1] - center[1]) * R[1, 0] + (p0[2] - center[2]) * R[2, 0]
    d1 = (p1[0] - center[0]) * R[0, 0] + (p1[1] - center[1]) * R[1, 0] + (p1[2] - center[2]) * R[2, 0]
    if not (d0 < 0.0 and d1 >= 0.0):
        return 0, 0.0, 0.0, xc
    frac = d0 / (d0 - d1)
    for i in range(3):
        xc[i] = p0[i] + frac * (p1[i] - p0[i])
    ox, oy, oz = xc[0] - center[0], xc[1] - center[1], xc[2] - center[2]
    u = abs(ox * R[0, 1] + oy * R[1, 1] + oz * R[2, 1])
    w = abs(ox * R[0, 2] + oy * R[1, 2] + oz * R[2, 2])
    m = max(u, w)
    if m <= 0.5 * width:
        return 1, 0.5 * width - m, frac, xc
    return 2, math.sqrt(ox * ox + oy * oy + oz * oz), frac, xc


@njit(cache=True, nogil=True)
def _seg_start(e, k, lap, centers, ngates, start):
    if k > 0:
        return centers[e, k - 1]
    if lap == 0:
        return start[e]
    return centers[e, ngates[e] - 1]


@njit(cache=True, nogil=True)
def step_envs(i0, i1, active, x, forces, prm, dt, nsub, centers, axes, widths, ngates, nlaps, start,
              lo, hi, nxt, lap, t, lap_t0, timeout, d_max, penalize_oob, out):
    """Advance environments ``[i0, i1)`` by one control period of ``nsub`` RK4 substeps.

    Inactive environments are left untouched and report zeros.
    """
    fc = np.empty(4)
    p0 = np.empty(3)
    for e in range(i0, i1):
        for j in range(NOUT):
            out[e, j] = 0.0
        if not active[e]:
            continue
        _clamp_rotors(forces[e], prm, fc)
        c, e0, e1, e2 = _wrench(fc, prm)
        k0 = nxt[e]
        out[e, C_GATE0] = k0
        rp = 0.0
        code = EV_NONE
        xe = x[e]
        for _s in range(nsub):
            p0[0], p0[1], p0[2] = xe[0], xe[1], xe[2]
            _rk4(xe, c, e0, e1, e2, dt, prm)
            t_prev = t[e]
            t[e] = t_prev + dt
            p1 = xe[0:3]
            k = nxt[e]
            g1 = _seg_start(e, k, lap[e], centers, ngates, start)
            g2 = centers[e, k]
            kind, val, frac, xc = gate_crossing(p0, p1, g2, axes[e, k], widths[e, k])
            if kind == 0:
                rp += seg_progress(p1, g1, g2) - seg_progress(p0, g1, g2)
            else:
                rp += seg_progress(xc, g1, g2) - seg_progress(p0, g1, g2)
                if kind == 2:
                    code = EV_CRASH
                    out[e, C_CRASH_GATE] = k
                    out[e, C_DG] = val
                    break
                npass = int(out[e, C_NPASS])
                if npass < 2:
                    out[e, C_PASS0 + 2 * npass] = k
                    out[e, C_MARGIN0 + 2 * npass] = val
                out[e, C_NPASS] = npass + 1
                if k + 1 < ngates[e]:
                    nxt[e] = k + 1
                else:
                    t_cross = t_prev + frac * dt
                    out[e, C_NLAPS] += 1.0
                    out[e, C_LAPTIME] = t_cross - lap_t0[e]
                    out[e, C_LAPNO] = lap[e] + 1
                    lap_t0[e] = t_cross
                    if lap[e] + 1 >= nlaps[e]:
                        code = EV_FINISHED
                        break
                    lap[e] += 1
                    nxt[e] = 0
                kn = nxt[e]
                g1n = _seg_start(e, kn, lap[e], centers, ngates, start)
                rp += seg_progress(p1, g1n, centers[e, kn]) - seg_progress(xc, g1n, centers[e, kn])
            if (p1[0] < lo[e, 0] or p1[1] < lo[e, 1] or p1[2] < lo[e, 2]
                    or p1[0] > hi[e, 0] or p1[1] > hi[e, 1] or p1[2] > hi[e, 2]):
                code = EV_OOB
                if penalize_oob:
                    kc = nxt[e]
                    gc = centers[e, kc]
                    out[e, C_DG] = math.sqrt((p1[0] - gc[0]) ** 2 + (p1[1] - gc[1]) ** 2 + (p1[2] - gc[2]) ** 2)
                    out[e, C_RT] = terminal_value(out[e, C_DG], widths[e, kc])
                break
        if code == EV_NONE and t[e] >= timeout - 1e-9:
            code = EV_TIMEOUT
        dpl, dlat = plane_and_lateral(xe[0:3], centers[e, k0], axes[e, k0])
        out[e, C_RP] = rp
        out[e, C_RS] = safety_value(dpl, dlat, widths[e, k0], d_max)
        out[e, C_WSQ] = xe[10] * xe[10] + xe[11] * xe[11] + xe[12] * xe[12]
        if code == EV_CRASH:
            out[e, C_RT] = terminal_value(out[e, C_DG], widths[e, k0])
        out[e, C_CODE] = code


@njit(cache=True, nogil=True)
def observe_quad_into(xe, out):
    R = quat_to_rot(xe[3:7])
    out[0], out[1], out[2] = xe[7], xe[8], xe[9]
    out[3], out[4], out[5] = xe[13], xe[14], xe[15]
    for i in range(3):
        for j in range(3):
            out[6 + 3 * i + j] = R[i, j]
    out[15], out[16], out[17] = xe[10], xe[11], xe[12]


@njit(cache=True, nogil=True)
def _angle_to(nx, ny, nz, vx, vy, vz):
    r = math.sqrt(vx * vx + vy * vy + vz * vz)
    if r == 0.0:
        return 0.0
    cosang = (nx * vx + ny * vy + nz * vz) / r
    return math.acos(min(1.0, max(-1.0, cosang)))


@njit(cache=True, nogil=True)
def observe_track_into(xe, centers, axes, ngates, k, nfut, literal_alpha, out):
    """Relative observation of ``nfut`` upcoming gates starting at gate ``k``."""
    R = quat_to_rot(xe[3:7])
    for i in range(nfut):
        j = (k + i) % ngates
        cj = centers[j]
        if i == 0:
            wx, wy, wz = cj[0] - xe[0], cj[1] - xe[1], cj[2] - xe[2]
            F = R
        else:
            jp = (k + i - 1) % ngates
            wx, wy, wz = cj[0] - centers[jp, 0], cj[1] - centers[jp, 1], cj[2] - centers[jp, 2]
            F = axes[jp]
        lx = F[0, 0] * wx + F[1, 0] * wy + F[2, 0] * wz
        ly = F[0, 1] * wx + F[1, 1] * wy + F[2, 1] * wz
        lz = F[0, 2] * wx + F[1, 2] * wy + F[2, 2] * wz
        r, th, ph = spherical(lx, ly, lz)
        if literal_alpha and i > 0:
            wx, wy, wz = cj[0] - xe[0], cj[1] - xe[1], cj[2] - xe[2]
        A = axes[j]
        out[4 * i] = r
        out[4 * i + 1] = th
        out[4 * i + 2] = ph
        out[4 * i + 3] = _angle_to(A[0, 0], A[1, 0], A[2, 0], wx, wy, wz)


@njit(cache=True, nogil=True)
def observe_envs(i0, i1, x, centers, axes, ngates, nxt, nfut, literal_alpha, out):
    for e in range(i0, i1):
        observe_quad_into(x[e], out[e, 0:QUAD_OBS])
        observe_track_into(x[e], centers[e], axes[e], ngates[e], nxt[e], nfut, literal_alpha,
                           out[e, QUAD_OBS:])


class RaceCore:
    """Packed state of ``n`` environments, each with its own track.

    Track arrays are padded to a shared gate capacity that grows on demand.
    ``n_workers > 1`` partitions the batch statically over a thread pool; the
    compiled kernels release the GIL so partitions run concurrently.
    """

    def __init__(self, n: int, params, cfg, gate_capacity: int = 8, n_workers: int = 1):
        self.n = n
        self.params = params
        self.cfg = cfg
        self.prm = params.packed()
        self.x = np.zeros((n, 16))
        self.x[:, 3] = 1.0
        self.nxt = np.zeros(n, dtype=np.int64)
        self.lap = np.zeros(n, dtype=np.int64)
        self.t = np.zeros(n)
        self.lap_t0 = np.zeros(n)
        self.ngates = np.ones(n, dtype=np.int64)
        self.nlaps = np.ones(n, dtype=np.int64)
        self.start = np.zeros((n, 3))
        self.lo = np.full((n, 3), -np.inf)
        self.hi = np.full((n, 3), np.inf)
        self._alloc_gates(gate_capacity)
        self.out = np.zeros((n, NOUT))
        self.obs = np.zeros((n, QUAD_OBS + 4 * cfg.n_gates_obs))
        self.n_workers = max(1, int(n_workers))
        self._chunks = [(int(a[0]), int(a[-1]) + 1) for a in np.array_split(np.arange(n), min(self.n_workers, n))]
        self._pool = None
        if len(self._chunks) > 1:
            from concurrent.futures import ThreadPoolExecutor

            self._pool = ThreadPoolExecutor(max_workers=len(self._chunks))

    def _alloc_gates(self, cap: int):
        old = getattr(self, "centers", None)
        centers = np.zeros((self.n, cap, 3))
        axes = np.tile(np.eye(3), (self.n, cap, 1, 1))
        widths = np.ones((self.n, cap))
        if old is not None:
            g = old.shape[1]
            centers[:, :g] = old
            axes[:, :g] = self.axes
            widths[:, :g] = self.widths
        self.centers, self.axes, self.widths = centers, axes, widths

    def set_track(self, e: int, track):
        ng = len(track.gates)
        if ng > self.centers.shape[1]:
            self._alloc_gates(max(ng, 2 * self.centers.shape[1]))
        for k, g in enumerate(track.gates):
            self.centers[e, k] = g.center
            self.axes[e, k] = g.rotation
            self.widths[e, k] = g.width
        self.ngates[e] = ng
        self.nlaps[e] = track.laps
        self.start[e] = track.start_pos
        pts = np.vstack([track.start_pos, track.centers])
        m = self.cfg.bounds_margin
        self.lo[e] = pts.min(axis=0) - m
        self.hi[e] = pts.max(axis=0) + m
        self.lo[e, 2] = self.cfg.z_floor

    def set_state(self, e: int, x, next_idx: int = 0, lap: int = 0, timed: bool = True):
        """Place env ``e``; with ``timed=False`` the first lap time is reported as NaN."""
        self.x[e] = x
        self.nxt[e] = next_idx
        self.lap[e] = lap
        self.t[e] = 0.0
        self.lap_t0[e] = 0.0 if timed else np.nan

    def _map(self, fn):
        if self._pool is None:
            fn(0, self.n)
        else:
            list(self._pool.map(lambda c: fn(*c), self._chunks))

    def step(self, forces: np.ndarray, active=None) -> np.ndarray:
        forces = np.ascontiguousarray(forces, dtype=np.float64)
        if active is None:
            active = np.ones(self.n, dtype=np.bool_)
        cfg = self.cfg
        dt = cfg.dt_ctrl / cfg.substeps

        def run(i0, i1):
            step_envs(i0, i1, active, self.x, forces, self.prm, dt, cfg.substeps, self.centers,
                      self.axes, self.widths, self.ngates, self.nlaps, self.start, self.lo, self.hi,
                      self.nxt, self.lap, self.t, self.lap_t0, cfg.timeout, cfg.d_max, cfg.penalize_oob, self.out)

        self._map(run)
        return self.out

    def observe(self) -> np.ndarray:
        cfg = self.cfg

        def run(i0, i1):
            observe_envs(i0, i1, self.x, self.centers, self.axes, self.ngates, self.nxt,
                         cfg.n_gates_obs, cfg.literal_alpha, self.obs)

        self._map(run)
        return self.obs

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __getstate__(self):
        d = self.__dict__.copy()
        d["_pool"] = None
        return d

    def __setstate__(self, d):
        self.__dict__.update(d)
        if len(self._chunks) > 1:
            from concurrent.futures import ThreadPoolExecutor

            self._pool = ThreadPoolExecutor(max_workers=len(self._chunks))
