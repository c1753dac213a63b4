"""Comparison controllers: velocity PID, acceleration-estimating PID, random walk.

All three run at a fixed period and emit a pedal angle in degrees, clamped to
``[u_min, u_max]``.
"""
from __future__ import annotations

import numpy as np


def _clamp(u: float, lo: float, hi: float) -> float:
    return min(max(u, lo), hi)


class PID1:
    """Velocity PID: ``u = kp e + ki sum(e dt) + kd de/dt`` with ``e = v_target - v``.

    The integral freezes while the output sits on a bound and the error would
    push it further out. Default gains come from :func:`ddcnet.tuning.tune_pid1`
    on the default plant.
    """

    def __init__(self, kp=79.5795, ki=1.9923, kd=14.1574, dt=0.2, u_min=0.0, u_max=50.0):
        self.kp, self.ki, self.kd = kp, ki, kd
        self.dt = dt
        self.u_min, self.u_max = u_min, u_max
        self.reset()

    def reset(self) -> None:
        self.integral = 0.0
        self.prev_error: float | None = None

    def step(self, v: float, v_target: float) -> float:
        e = v_target - v
        de = 0.0 if self.prev_error is None else (e - self.prev_error) / self.dt
        self.prev_error = e
        integral = self.integral + e * self.dt
        raw = self.kp * e + self.ki * integral + self.kd * de
        u = _clamp(raw, self.u_min, self.u_max)
        winding_up = (raw > self.u_max and e > 0) or (raw < self.u_min and e < 0)
        if not winding_up:
            self.integral = integral
        return u


class PID2:
    """PD control on an acceleration error, integrated into the pedal angle.

    The target acceleration is ``(v_target - v) / t_delay`` and the measured one
    a backward difference of velocity. The integrator state is the pedal angle
    itself, clamped to its bounds.
    """

    def __init__(self, kp=0.9993, kd=1.7812, t_delay=1.0, dt=0.2, u_min=0.0, u_max=50.0, u0=0.0):
        if t_delay <= 0:
            raise ValueError("t_delay must be positive")
        self.kp, self.kd = kp, kd
        self.t_delay = t_delay
        self.dt = dt
        self.u_min, self.u_max = u_min, u_max
        self.u0 = u0
        self.reset()

    def reset(self) -> None:
        self.u = _clamp(self.u0, self.u_min, self.u_max)
        self.prev_v: float | None = None
        self.prev_ea: float | None = None

    def errors(self, v: float, v_target: float) -> tuple[float, float, float]:
        """Return ``(a_target, a, e_a)`` for the current sample without updating state."""
        a_target = (v_target - v) / self.t_delay
        a = 0.0 if self.prev_v is None else (v - self.prev_v) / self.dt
        return a_target, a, a_target - a

    def step(self, v: float, v_target: float) -> float:
        _, _, ea = self.errors(v, v_target)
        dea = 0.0 if self.prev_ea is None else (ea - self.prev_ea) / self.dt
        self.prev_v, self.prev_ea = v, ea
        self.u = _clamp(self.u + (self.kp * ea + self.kd * dea) * self.dt, self.u_min, self.u_max)
        return self.u


class RandomPolicy:
    """Random walk on the pedal that leans toward the target velocity.

    Below (or at) the target the pedal moves by ``+Uniform(lo, hi)``, above it
    by ``-Uniform(lo, hi)``. With the default ``[-1, 2]`` range the walk drifts
    half a degree per tick in the corrective direction.
    """

    def __init__(self, increment_min=-1.0, increment_max=2.0, u_min=0.0, u_max=50.0,
                 u0=0.0, seed=0, rng=None):
        self.increment_min, self.increment_max = increment_min, increment_max
        self.u_min, self.u_max = u_min, u_max
        self.u0 = u0
        self.seed = seed
        self._external_rng = rng
        self.reset()

    def reset(self) -> None:
        self.u = _clamp(self.u0, self.u_min, self.u_max)
        self.rng = self._external_rng or np.random.default_rng(self.seed)

    def step(self, v: float, v_target: float) -> float:
        inc = float(self.rng.uniform(self.increment_min, self.increment_max))
        self.u += inc if v <= v_target else -inc
        self.u = _clamp(self.u, self.u_min, self.u_max)
        return self.u
