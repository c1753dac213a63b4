"""Simulated pedal actuator and vehicle on free rollers.

The commanded pedal angle goes through a pure delay of ``delay_steps`` ticks
and a first-order lag, then a deadzone maps it to throttle. Velocity follows
``dv/dt = K p - c v - f_roll``, integrated with explicit Euler at the control
period and clipped at zero.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, fields

import numpy as np


class PlantParameterError(ValueError):
    pass


@dataclass(frozen=True)
class PlantParams:
    tau_act: float = 0.4  # s
    theta_dead: float = 5.0  # deg
    theta_max: float = 50.0  # deg
    drive_gain: float = 2.4  # km/h per s at full throttle
    drag: float = 0.18  # 1/s
    f_roll: float = 0.3  # km/h per s
    sigma_v: float = 0.05  # km/h
    delay_steps: int = 1

    def validate(self) -> None:
        if not self.tau_act > 0:
            raise PlantParameterError(f"tau_act must be positive, got {self.tau_act}")
        if not 0 <= self.theta_dead < self.theta_max:
            raise PlantParameterError("need 0 <= theta_dead < theta_max")
        if self.drive_gain < 0 or self.drag < 0 or self.f_roll < 0 or self.sigma_v < 0:
            raise PlantParameterError("drive_gain, drag, f_roll and sigma_v must be >= 0")
        if self.delay_steps < 0 or int(self.delay_steps) != self.delay_steps:
            raise PlantParameterError("delay_steps must be a non-negative integer")

    @classmethod
    def from_mapping(cls, mapping) -> "PlantParams":
        kwargs = {}
        for f in fields(cls):
            if f.name in mapping:
                kwargs[f.name] = int(mapping[f.name]) if f.type == "int" else float(mapping[f.name])
        return cls(**kwargs)

    @property
    def steady_state_full_pedal(self) -> float:
        return (self.drive_gain - self.f_roll) / self.drag


@dataclass(frozen=True)
class Observation:
    v: float  # km/h
    a: float  # km/h per s, backward difference
    theta: float  # deg
    theta_rate: float  # deg/s, backward difference


class PedalPlant:
    def __init__(self, params: PlantParams | None = None, seed: int = 0, dt: float = 0.2):
        self.params = params or PlantParams()
        self.dt = dt
        self.reset(seed)

    def reset(self, seed: int | None = None) -> Observation:
        self.params.validate()
        if seed is not None:
            self.seed = seed
        self.rng = np.random.default_rng(self.seed)
        self.v = 0.0
        self.theta = 0.0
        self.queue = deque([0.0] * self.params.delay_steps)
        self.last = Observation(0.0, 0.0, 0.0, 0.0)
        return self.last

    def observe(self) -> Observation:
        return self.last

    def step(self, u_cmd: float, dt: float | None = None) -> Observation:
        p = self.params
        dt = self.dt if dt is None else dt
        if not (0.0 <= u_cmd <= p.theta_max) or not np.isfinite(u_cmd):
            raise ValueError(f"pedal command {u_cmd} outside [0, {p.theta_max}] deg")
        self.queue.append(float(u_cmd))
        target = self.queue.popleft()

        theta_prev, v_prev = self.theta, self.v
        self.theta = target + (theta_prev - target) * np.exp(-dt / p.tau_act)
        self.theta = min(max(self.theta, 0.0), p.theta_max)
        throttle = min(max((self.theta - p.theta_dead) / (p.theta_max - p.theta_dead), 0.0), 1.0)
        dv = (p.drive_gain * throttle - p.drag * v_prev - p.f_roll) * dt
        noise = self.rng.normal(0.0, p.sigma_v) if p.sigma_v > 0 else 0.0
        self.v = max(0.0, v_prev + dv + noise)

        self.last = Observation(
            v=self.v,
            a=(self.v - v_prev) / dt,
            theta=self.theta,
            theta_rate=(self.theta - theta_prev) / dt,
        )
        return self.last
