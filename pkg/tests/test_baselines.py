import numpy as np
import pytest

from ddcnet.baselines import PID1, PID2, RandomPolicy
from ddcnet.harness import load_config, simulate, with_overrides
from ddcnet.plant import PedalPlant
from ddcnet.tuning import tune_pid1, tune_pid2


class StubRng:
    def __init__(self, value):
        self.value = value

    def uniform(self, lo, hi):
        return self.value


# --------------------------------------------------------------------------- PID1


def test_pid1_zero_error():
    pid = PID1()
    assert all(pid.step(5.0, 5.0) == 0.0 for _ in range(50))


def test_pid1_pure_proportional():
    assert PID1(kp=1.0, ki=0.0, kd=0.0).step(3.0, 5.0) == 2.0


def test_pid1_zero_gains_emit_zero():
    pid = PID1(0.0, 0.0, 0.0)
    rng = np.random.default_rng(0)
    assert all(pid.step(v, 5.0) == 0.0 for v in rng.uniform(0, 12, 100))


def test_pid1_terms():
    pid = PID1(kp=2.0, ki=0.5, kd=0.1, dt=0.2)
    assert pid.step(4.0, 5.0) == pytest.approx(2.0 * 1 + 0.5 * 0.2)
    # e = 2, integral = 0.2 + 0.4, de/dt = 5
    assert pid.step(3.0, 5.0) == pytest.approx(4.0 + 0.3 + 0.5)


def test_pid1_integrator_plant_steady_state():
    pid = PID1(kp=1.0, ki=0.5, kd=0.0)
    v = 0.0
    for _ in range(2000):
        u = pid.step(v, 5.0)
        v += (0.5 * u - 1.0) * 0.2  # constant load needs the integral term
    assert abs(v - 5.0) < 1e-6


def test_pid1_anti_windup():
    pid = PID1(kp=1.0, ki=1.0, kd=0.0)
    for _ in range(100):
        assert pid.step(0.0, 100.0) == 50.0
    assert pid.integral == 0.0
    # saturated low with a negative error: still frozen
    pid.step(200.0, 100.0)
    assert pid.integral == 0.0
    # unsaturated output integrates again
    assert pid.step(99.5, 100.0) == pytest.approx(0.5 + 0.1)
    assert pid.integral == pytest.approx(0.1)


# --------------------------------------------------------------------------- PID2


def test_pid2_equilibrium():
    pid = PID2(u0=12.0)
    for _ in range(20):
        assert pid.step(5.0, 5.0) == 12.0


def test_pid2_error_formula():
    pid = PID2(t_delay=1.0)
    pid.step(0.0, 5.0)
    assert pid.errors(0.0, 5.0) == (5.0, 0.0, 5.0)


def test_pid2_integrates():
    pid = PID2(kp=1.0, kd=0.5, t_delay=1.0, dt=0.2)
    assert pid.step(0.0, 5.0) == pytest.approx(1.0 * 5.0 * 0.2)
    # v rises 0.2 in one period: a = 1, e_a = 4.8 - 1 = 3.8, de_a = -6
    assert pid.step(0.2, 5.0) == pytest.approx(1.0 + (3.8 + 0.5 * -6.0) * 0.2)


def test_pid2_output_clamped():
    pid = PID2(kp=100.0, kd=0.0)
    assert all(0.0 <= pid.step(0.0, 10.0) <= 50.0 for _ in range(20))
    assert pid.u == 50.0


def test_pid2_rejects_bad_delay():
    with pytest.raises(ValueError):
        PID2(t_delay=0.0)


def test_pid2_converges_faster_than_pid1():
    cfg = with_overrides(load_config(), target_kmh=5.0)
    t1 = simulate(with_overrides(cfg, controller="pid1")).summary["t_conv_s"]
    t2 = simulate(with_overrides(cfg, controller="pid2")).summary["t_conv_s"]
    assert t2 is not None and t1 is not None
    assert t2 < t1, f"pid2 T_conv {t2} s is not below pid1 T_conv {t1} s"


# --------------------------------------------------------------------------- random


def test_random_stub_increment():
    pol = RandomPolicy(u0=10.0, rng=StubRng(2.0))
    assert pol.step(3.0, 5.0) == 12.0


def test_random_stub_decrement():
    pol = RandomPolicy(u0=10.0, rng=StubRng(2.0))
    assert pol.step(7.0, 5.0) == 8.0


def test_random_clamped():
    pol = RandomPolicy(u0=49.5, rng=StubRng(2.0))
    assert pol.step(0.0, 5.0) == 50.0
    pol = RandomPolicy(u0=0.5, rng=StubRng(2.0))
    assert pol.step(9.0, 5.0) == 0.0


def test_random_mean_increment():
    n = 100_000
    pol = RandomPolicy(u_min=-1e9, u_max=1e9, seed=0)
    for _ in range(n):
        pol.step(0.0, 5.0)
    assert pol.u / n == pytest.approx(0.5, abs=0.05)


def test_random_reproducible():
    def stream():
        pol = RandomPolicy(seed=9)
        return [pol.step(v, 5.0) for v in np.linspace(0, 10, 200)]

    assert stream() == stream()


def test_random_oscillates_about_target():
    plant = PedalPlant(seed=0)
    pol = RandomPolicy(seed=1)
    obs = plant.reset()
    v = []
    for _ in range(300):
        obs = plant.step(pol.step(obs.v, 5.0))
        v.append(obs.v)
    side = np.sign(np.array(v) - 5.0)
    side = side[side != 0]
    assert np.count_nonzero(np.diff(side)) >= 5


def test_commands_bounded_for_all_baselines():
    rng = np.random.default_rng(2)
    for ctl in (PID1(), PID2(), RandomPolicy(seed=3)):
        for v in rng.uniform(0, 15, 300):
            assert 0.0 <= ctl.step(v, 5.0) <= 50.0


# --------------------------------------------------------------------------- tuning


def test_shipped_gains_follow_tuning_procedure():
    cfg = load_config()
    assert tune_pid1() == cfg.pid1
    t2 = tune_pid2()
    assert {k: cfg.pid2[k] for k in t2} == t2
