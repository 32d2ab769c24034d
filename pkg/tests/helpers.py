"""Shared oracles and fixtures for the test suite."""

import math

import numpy as np

from gateracer.dynamics import QuadParams
from gateracer.env import EnvConfig, RacingEnv, forces_to_actions
from gateracer.track import Gate, Track


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_unit_quat(rng) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def bisector_track(points, start, laps=1, width=1.5) -> Track:
    """Gates at ``points`` whose yaw bisects the incoming and outgoing headings."""
    pts = [np.asarray(start, float)] + [np.asarray(p, float) for p in points]
    gates = []
    for i in range(1, len(pts)):
        d_in = pts[i] - pts[i - 1]
        if i + 1 < len(pts):
            d_out = pts[i + 1] - pts[i]
        elif laps > 1:
            d_out = pts[1] - pts[i]
        else:
            d_out = d_in
        h = d_in[:2] / np.linalg.norm(d_in[:2]) + d_out[:2] / np.linalg.norm(d_out[:2])
        gates.append(Gate(pts[i], yaw=math.atan2(h[1], h[0]), width=width))
    return Track(tuple(gates), start_pos=pts[0], laps=laps)


def fly_center_line(track: Track, params: QuadParams = QuadParams(), steps_per_segment: int = 37):
    """Fly the exact center-line at hover thrust, switching velocity at each gate.

    Each segment takes ``steps_per_segment`` control steps, so every gate is
    reached at a control-step boundary. Returns the per-step results.
    """
    cfg = EnvConfig(timeout=1e4, bounds_margin=100.0, z_floor=-100.0)
    env = RacingEnv(track, cfg, params)
    env.reset("start")
    hover = forces_to_actions(np.full(4, params.hover_thrust), params)
    pts = [track.start_pos] + [g.center for g in track.gates]
    legs = [(pts[i], pts[i + 1]) for i in range(len(pts) - 1)]
    c = [g.center for g in track.gates]
    for _ in range(track.laps - 1):
        legs += [(c[-1], c[0])] + [(c[i], c[i + 1]) for i in range(len(c) - 1)]
    T = steps_per_segment * cfg.dt_ctrl
    results = []
    for a, b in legs:
        env.core.x[0, 7:10] = (b - a) / T
        for _ in range(steps_per_segment):
            res = env.step(hover)
            results.append(res)
            if res.done:
                return results
    # the last crossing can land a rounding error past the final step
    for _ in range(3):
        res = env.step(hover)
        results.append(res)
        if res.done:
            break
    return results


ACCEPTANCE: dict[int, str] = {}


def report(num: int, ok, title: str, detail: str) -> None:
    """Record and print one acceptance line; ``ok=None`` marks a criterion that was not run."""
    status = "NOT RUN" if ok is None else ("PASS" if ok else "FAIL")
    line = f"[{status}] criterion {num:2d}: {title} ({detail})"
    ACCEPTANCE[num] = line
    print(line)
