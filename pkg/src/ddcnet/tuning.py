"""Reproducible gain tuning for the PID baselines.

All tests run on the noise-free plant with a step from rest to 5 km/h for 60 s.

PID1
  1. With ``ki = kd = 0`` raise ``kp`` along a geometric grid and stop at the
     first value whose settled response overshoots its own final value by 20 %; if the
     loop starts to oscillate first, keep the last non-oscillating value.
  2. Raise ``ki`` until the final error drops below 2 % of the target.
  3. Pick the ``kd`` on the grid with the smallest integrated absolute error
     (ties: smaller kd); oscillating responses are skipped.
PID2
  1. Raise ``kp`` the same way (PID2 has no steady-state error, so its final
     value is the target).
  2. Pick ``kd`` as in PID1 step 3.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .baselines import PID1, PID2
from .plant import PedalPlant, PlantParams

TARGET = 5.0
DURATION_S = 60.0
OVERSHOOT = 0.20
SS_TOLERANCE = 0.02
KP_GRID = tuple(float(x) for x in np.round(np.geomspace(0.05, 200.0, 37), 4))
KI_GRID = tuple(float(x) for x in np.round(np.geomspace(0.01, 50.0, 38), 4))
KD_GRID = (0.0,) + tuple(float(x) for x in np.round(np.geomspace(0.01, 20.0, 23), 4))


def step_response(controller, params: PlantParams, target=TARGET, duration_s=DURATION_S, dt=0.2):
    plant = PedalPlant(replace(params, sigma_v=0.0), seed=0, dt=dt)
    obs = plant.reset()
    v = np.empty(int(round(duration_s / dt)))
    for k in range(v.size):
        v[k] = obs.v
        obs = plant.step(controller.step(obs.v, target))
    return v


def response_stats(v: np.ndarray, target=TARGET, dt=0.2) -> dict:
    n5 = int(round(5.0 / dt))
    final = float(v[-n5:].mean())
    settled = abs(final - float(v[-2 * n5 : -n5].mean())) < 0.02 * target
    window = v[-int(round(20.0 / dt)):]
    centered = window - window.mean()
    crossings = int(np.count_nonzero(np.diff(np.sign(centered)) != 0))
    return {
        "final": final,
        # an unsettled response has no final value to overshoot
        "overshoot": (float(v.max()) - final) / final if final > 0 and settled else 0.0,
        # sustained swing: repeated mean crossings with a visible amplitude
        "oscillating": crossings >= 4 and float(np.ptp(window)) > 0.05 * target,
        "ss_error": abs(final - target) / target,
        "iae": float(np.sum(np.abs(v - target)) * dt),
    }


def _scan_kp(make, params):
    chosen = None
    for kp in KP_GRID:
        stats = response_stats(step_response(make(kp), params))
        if stats["oscillating"]:
            break
        chosen = kp
        if stats["overshoot"] >= OVERSHOOT:
            break
    return chosen if chosen is not None else KP_GRID[0]


def _pick_kd(make, params):
    best = None
    for kd in KD_GRID:
        stats = response_stats(step_response(make(kd), params))
        if stats["oscillating"]:
            continue
        if best is None or stats["iae"] < best[1] - 1e-9:
            best = (kd, stats["iae"])
    return best[0] if best else 0.0


def tune_pid1(params: PlantParams | None = None) -> dict:
    params = params or PlantParams()
    kp = _scan_kp(lambda k: PID1(k, 0.0, 0.0), params)
    ki = KI_GRID[-1]
    for cand in KI_GRID:
        stats = response_stats(step_response(PID1(kp, cand, 0.0), params))
        if not stats["oscillating"] and stats["ss_error"] < SS_TOLERANCE:
            ki = cand
            break
    kd = _pick_kd(lambda k: PID1(kp, ki, k), params)
    return {"kp": kp, "ki": ki, "kd": kd}


def tune_pid2(params: PlantParams | None = None, t_delay: float = 1.0) -> dict:
    params = params or PlantParams()
    kp = _scan_kp(lambda k: PID2(k, 0.0, t_delay), params)
    kd = _pick_kd(lambda k: PID2(kp, k, t_delay), params)
    return {"kp": kp, "kd": kd, "t_delay": t_delay}
