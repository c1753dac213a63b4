"""Experiment pipeline: collect random data, train, run closed loop, evaluate, plot.

Configuration is a sectioned ``key = value`` file read with :mod:`configparser`;
any missing key falls back to the defaults below.
"""
from __future__ import annotations

import configparser
import csv
import io
import json
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import PID1, PID2, RandomPolicy
from .controller import ControllerConfig, GradientMPC
from .model import Trajectory, load_model, save_model, train_model, window_trajectory
from .plant import Observation, PedalPlant, PlantParams

CONTROLLERS = ("pid1", "pid2", "random", "proposed")
RUN_LOG_HEADER = ("time_s", "u_cmd_deg", "theta_deg", "v_kmh", "v_target_kmh", "loss")
TIMING_HEADER = ("time_s", "step_compute_ms")
ENV_SEED = "DDCNET_SEED"
ENV_OUTPUT_DIR = "DDCNET_OUTPUT_DIR"
# controllers expected to converge in this order, fastest first
EXPECTED_ORDER = ("proposed", "pid2", "pid1")


class ConfigError(ValueError):
    pass


class LogFormatError(ValueError):
    pass


DEFAULT_CONFIG = {
    "experiment": {
        "controller": "proposed",
        "target_kmh": "5.0",
        "duration_s": "60.0",
        "seed": "1",
        "period_s": "0.2",
    },
    "collect": {"duration_s": "60.0", "target_kmh": "10.0, 5.0", "seed": "0"},
    "train": {
        "epochs": "100",
        "horizon": "30",
        "hidden_sizes": "80, 50, 20",
        "batch_size": "32",
        "learning_rate": "0.001",
        "test_fraction": "0.2",
        "seed": "0",
    },
    "paths": {
        "output_dir": ".",
        "trajectory": "random.csv",
        "model": "ddcnet.ddcn",
        "log": "run.csv",
        "summary": "run.json",
        "plot": "run.svg",
    },
    "plant": {},
    "controller": {},
    "pid1": {"kp": "79.5795", "ki": "1.9923", "kd": "14.1574"},
    "pid2": {"kp": "0.9993", "kd": "1.7812", "t_delay": "1.0", "u0": "0.0"},
    "random": {"increment_min": "-1.0", "increment_max": "2.0", "u0": "0.0"},
}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


@dataclass
class ExperimentConfig:
    controller: str = "proposed"
    target_kmh: float = 5.0
    duration_s: float = 60.0
    seed: int = 1
    period_s: float = 0.2
    collect_duration_s: float = 60.0
    collect_targets: tuple[float, ...] = (10.0, 5.0)
    collect_seed: int = 0
    train: dict = field(default_factory=dict)
    plant: PlantParams = field(default_factory=PlantParams)
    controller_params: ControllerConfig = field(default_factory=ControllerConfig)
    pid1: dict = field(default_factory=dict)
    pid2: dict = field(default_factory=dict)
    random: dict = field(default_factory=dict)
    output_dir: Path = Path(".")
    paths: dict = field(default_factory=dict)

    def path(self, key: str) -> Path:
        p = Path(self.paths[key])
        return p if p.is_absolute() else self.output_dir / p

    def validate(self) -> None:
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"unknown controller {self.controller!r}; choose from {CONTROLLERS}")
        if not self.duration_s > 0 or not self.collect_duration_s > 0:
            raise ConfigError("durations must be positive")
        if not self.period_s > 0:
            raise ConfigError("period_s must be positive")
        if not self.collect_targets:
            raise ConfigError("collect target_kmh needs at least one value")
        self.plant.validate()

    def steps(self, duration_s: float | None = None) -> int:
        duration = self.duration_s if duration_s is None else duration_s
        n = duration / self.period_s
        if abs(n - round(n)) > 1e-9:
            raise ConfigError(f"duration {duration} s is not a whole number of {self.period_s} s periods")
        return int(round(n))


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a config file (or defaults only when ``path`` is None) and apply overrides.

    Overrides accept ``controller``, ``target_kmh``, ``duration_s`` and ``seed``;
    ``None`` values are ignored. ``DDCNET_SEED`` and ``DDCNET_OUTPUT_DIR``
    override the file, explicit keyword overrides override the environment.
    """
    parser = configparser.ConfigParser()
    parser.read_dict(DEFAULT_CONFIG)
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
    exp, col, paths = parser["experiment"], parser["collect"], parser["paths"]
    try:
        cfg = ExperimentConfig(
            controller=exp["controller"].strip(),
            target_kmh=float(exp["target_kmh"]),
            duration_s=float(exp["duration_s"]),
            seed=int(exp["seed"]),
            period_s=float(exp["period_s"]),
            collect_duration_s=float(col["duration_s"]),
            collect_targets=_floats(col["target_kmh"]),
            collect_seed=int(col["seed"]),
            train=dict(parser["train"]),
            plant=PlantParams.from_mapping(parser["plant"]),
            controller_params=ControllerConfig.from_mapping(parser["controller"]),
            pid1={k: float(v) for k, v in parser["pid1"].items()},
            pid2={k: float(v) for k, v in parser["pid2"].items()},
            random={k: float(v) for k, v in parser["random"].items()},
            output_dir=Path(paths["output_dir"]),
            paths=dict(paths),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None

    if os.environ.get(ENV_SEED):
        cfg.seed = int(os.environ[ENV_SEED])
    if os.environ.get(ENV_OUTPUT_DIR):
        cfg.output_dir = Path(os.environ[ENV_OUTPUT_DIR])
    for key, value in overrides.items():
        if value is None:
            continue
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown override {key!r}")
        setattr(cfg, key, type(getattr(cfg, key))(value))
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------- metric


def t_conv(times, v, v_target: float, a_percent: float) -> float | None:
    """Earliest sample time after which ``|v - v_target|`` stays within ``a_percent``% of the target.

    Returns ``None`` when the last sample is out of band.
    """
    if v_target == 0:
        raise ValueError("T_conv is undefined for a zero target (percentage band)")
    times = np.asarray(times, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or times.shape != v.shape:
        raise ValueError("need a non-empty series with matching times")
    band = a_percent / 100.0 * abs(v_target)
    outside = np.nonzero(np.abs(v - v_target) > band)[0]
    if outside.size == 0:
        return float(times[0])
    last = outside[-1]
    if last == v.size - 1:
        return None
    return float(times[last + 1])


def primary_band(v_target: float) -> float:
    """Band used to score a run: 20 % for slow targets (up to 5 km/h), 10 % above."""
    return 20.0 if v_target <= 5.0 else 10.0


# --------------------------------------------------------------------------- collection


def piecewise_target(targets, k: int, n_steps: int) -> float:
    seg = max(n_steps // len(targets), 1)
    return targets[min(k // seg, len(targets) - 1)]


def collect_data(cfg: ExperimentConfig, path=None) -> Trajectory:
    """Drive the plant with the random controller and write the trajectory CSV.

    The target velocity is piecewise constant over equal segments, one per
    entry of ``collect_targets``.
    """
    n = cfg.steps(cfg.collect_duration_s)
    plant = PedalPlant(cfg.plant, seed=cfg.collect_seed, dt=cfg.period_s)
    policy = RandomPolicy(seed=cfg.collect_seed + 1000, **cfg.random)
    obs = plant.reset()
    u, v = [policy.u], [obs.v]
    for k in range(n - 1):
        cmd = policy.step(obs.v, piecewise_target(cfg.collect_targets, k, n))
        obs = plant.step(cmd)
        u.append(cmd)
        v.append(obs.v)
    traj = Trajectory(np.round(np.arange(n) * cfg.period_s, 9), u, v, period=cfg.period_s)
    path = cfg.path("trajectory") if path is None else Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        traj.to_csv(path)
    except OSError as exc:
        raise OSError(f"cannot write trajectory to {path}: {exc.strerror}") from None
    return traj


def train_from_file(cfg: ExperimentConfig, trajectory_path=None, model_path=None):
    trajectory_path = cfg.path("trajectory") if trajectory_path is None else Path(trajectory_path)
    model_path = cfg.path("model") if model_path is None else Path(model_path)
    traj = Trajectory.from_csv(trajectory_path, period=cfg.period_s)
    tc = cfg.train
    samples = window_trajectory(traj, int(tc["horizon"]))
    model = train_model(
        samples,
        epochs=int(tc["epochs"]),
        seed=int(tc["seed"]),
        hidden_sizes=tuple(int(h) for h in _floats(tc["hidden_sizes"])),
        batch_size=int(tc["batch_size"]),
        learning_rate=float(tc["learning_rate"]),
        test_fraction=float(tc["test_fraction"]),
        period=cfg.period_s,
        u_min=cfg.controller_params.u_min,
        u_max=cfg.controller_params.u_max,
    )
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, model_path)
    return model


# --------------------------------------------------------------------------- closed loop


def make_controller(name: str, cfg: ExperimentConfig, model=None):
    cp = cfg.controller_params
    bounds = {"u_min": cp.u_min, "u_max": cp.u_max}
    if name == "pid1":
        return PID1(dt=cfg.period_s, **bounds, **cfg.pid1)
    if name == "pid2":
        return PID2(dt=cfg.period_s, **bounds, **cfg.pid2)
    if name == "random":
        return RandomPolicy(seed=cfg.seed + 2, **bounds, **cfg.random)
    if name == "proposed":
        if model is None:
            model_path = cfg.path("model")
            if not model_path.exists():
                raise FileNotFoundError(f"model file not found: {model_path}")
            model = load_model(model_path)
        return GradientMPC(model, cp, seed=cfg.seed + 1)
    raise ConfigError(f"unknown controller {name!r}")


@dataclass
class RunResult:
    rows: list  # tuples matching RUN_LOG_HEADER
    step_ms: np.ndarray
    summary: dict

    @property
    def commands(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    @property
    def velocities(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows])


def simulate(cfg: ExperimentConfig, controller=None, model=None) -> RunResult:
    """Closed loop at the control period: observe, compute command, step the plant."""
    name = cfg.controller
    if controller is None:
        controller = make_controller(name, cfg, model)
    n = cfg.steps()
    plant = PedalPlant(cfg.plant, seed=cfg.seed, dt=cfg.period_s)
    obs = plant.reset()
    u_held, u_rate = 0.0, 0.0
    rows, step_ms = [], np.empty(n)
    for k in range(n):
        t = round(k * cfg.period_s, 9)
        start = time.perf_counter()
        if isinstance(controller, GradientMPC):
            cmd = controller.control_step(Observation(obs.v, obs.a, u_held, u_rate), cfg.target_kmh)
            loss = controller.last_diagnostics.best_loss
        else:
            cmd = controller.step(obs.v, cfg.target_kmh)
            loss = float("nan")
        step_ms[k] = (time.perf_counter() - start) * 1e3
        rows.append((t, cmd, obs.theta, obs.v, cfg.target_kmh, loss))
        u_rate = (cmd - u_held) / cfg.period_s
        u_held = cmd
        obs = plant.step(cmd)
    return RunResult(rows, step_ms, summarize(name, cfg.target_kmh, rows, step_ms, cfg.duration_s))


def summarize(name, target, rows, step_ms, duration_s) -> dict:
    times = [r[0] for r in rows]
    v = [r[3] for r in rows]
    conv = {str(a): t_conv(times, v, target, a) for a in (10, 20)}
    band = primary_band(target)
    return {
        "controller": name,
        "target_kmh": target,
        "duration_s": duration_s,
        "band_percent": band,
        "t_conv_s": t_conv(times, v, target, band),
        "t_conv_by_band_s": conv,
        "final_error_kmh": abs(v[-1] - target),
        "command_total_variation_deg": float(np.abs(np.diff([r[1] for r in rows])).sum()),
        "mean_step_ms": float(np.mean(step_ms)),
        "max_step_ms": float(np.max(step_ms)),
    }


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.10g}"


def write_run_log(rows, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_LOG_HEADER)
    for t, u, theta, v, vt, loss in rows:
        w.writerow((f"{t:.3f}", _fmt(u), _fmt(theta), _fmt(v), _fmt(vt), _fmt(loss)))
    Path(path).write_text(buf.getvalue())


def read_run_log(path) -> dict[str, np.ndarray]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = [r for r in reader if r]
    except OSError as exc:
        raise LogFormatError(f"cannot read log {path}: {exc.strerror}") from None
    if header is None or tuple(header) != RUN_LOG_HEADER:
        raise LogFormatError(f"{path}: expected header {','.join(RUN_LOG_HEADER)}")
    if not rows:
        raise LogFormatError(f"{path}: log has no rows")
    try:
        data = np.array([[float(x) for x in r] for r in rows])
    except ValueError as exc:
        raise LogFormatError(f"{path}: {exc}") from None
    if data.shape[1] != len(RUN_LOG_HEADER):
        raise LogFormatError(f"{path}: expected {len(RUN_LOG_HEADER)} columns")
    return {name: data[:, i] for i, name in enumerate(RUN_LOG_HEADER)}


def run_experiment(cfg: ExperimentConfig, model=None, write: bool = True) -> RunResult:
    """Run one closed-loop experiment and write log, timing sidecar and summary."""
    result = simulate(cfg, model=model)
    if write:
        log = cfg.path("log")
        log.parent.mkdir(parents=True, exist_ok=True)
        write_run_log(result.rows, log)
        timing = log.with_suffix(".timing.csv")
        lines = [",".join(TIMING_HEADER)]
        lines += [f"{r[0]:.3f},{ms:.3f}" for r, ms in zip(result.rows, result.step_ms)]
        timing.write_text("\n".join(lines) + "\n")
        cfg.path("summary").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    return result


# --------------------------------------------------------------------------- plot


def emit_plot(log_path, out_path) -> Path:
    """Two-panel SVG: velocity with target band on top, pedal command and angle below."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    log = read_run_log(log_path)
    t, v, vt = log["time_s"], log["v_kmh"], log["v_target_kmh"]
    band = np.array([primary_band(x) for x in vt]) / 100.0 * np.abs(vt)
    with matplotlib.rc_context({"svg.hashsalt": "ddcnet", "svg.fonttype": "none"}):
        fig, (ax_v, ax_u) = plt.subplots(2, 1, sharex=True, figsize=(7, 5))
        ax_v.fill_between(t, vt - band, vt + band, color="0.85", label="target band")
        ax_v.plot(t, vt, "k--", lw=1, label="target")
        ax_v.plot(t, v, lw=1.5, label="velocity")
        ax_v.set_ylabel("velocity [km/h]")
        ax_v.legend(loc="lower right", fontsize=8)
        ax_u.plot(t, log["u_cmd_deg"], lw=1.2, label="command")
        ax_u.plot(t, log["theta_deg"], lw=1.2, label="pedal angle")
        ax_u.set_ylabel("pedal [deg]")
        ax_u.set_xlabel("time [s]")
        ax_u.legend(loc="lower right", fontsize=8)
        ax_u.set_xlim(t[0], t[-1] if t[-1] > t[0] else t[0] + 1)
        fig.tight_layout()
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out_path


# --------------------------------------------------------------------------- comparison


def _conv_key(summary: dict) -> float:
    t = summary["t_conv_s"]
    return math.inf if t is None else t


def compare(summaries) -> tuple[str, list[str]]:
    """Tabulate summaries and list any pair that breaks the expected convergence order."""
    summaries = list(summaries)
    if len(summaries) < 2:
        raise ValueError("compare needs at least two summaries")
    targets = {s["target_kmh"] for s in summaries}
    if len(targets) != 1:
        raise ValueError(f"summaries have different targets: {sorted(targets)}")
    ranked = sorted(summaries, key=_conv_key)
    lines = [f"target {summaries[0]['target_kmh']:g} km/h, band {summaries[0]['band_percent']:g}%",
             f"{'controller':<10} {'T_conv [s]':>11} {'final err':>10}"]
    for s in ranked:
        t = "never" if s["t_conv_s"] is None else f"{s['t_conv_s']:.2f}"
        lines.append(f"{s['controller']:<10} {t:>11} {s['final_error_kmh']:>10.3f}")

    by_name = {s["controller"]: s for s in summaries}
    present = [c for c in EXPECTED_ORDER if c in by_name]
    violations = []
    for i, faster in enumerate(present):
        for slower in present[i + 1 :]:
            if _conv_key(by_name[faster]) > _conv_key(by_name[slower]):
                violations.append(f"{faster} slower than {slower}")
    ties = [
        f"{a['controller']} ties {b['controller']}"
        for i, a in enumerate(ranked) for b in ranked[i + 1 :]
        if _conv_key(a) == _conv_key(b)
    ]
    lines.append("order: " + " < ".join(s["controller"] for s in ranked))
    lines += [f"tie: {t}" for t in ties]
    lines += [f"VIOLATION: {v}" for v in violations] or ["no ordering violations"]
    return "\n".join(lines), violations


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, **changes)
