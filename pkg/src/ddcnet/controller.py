"""Receding-horizon control by gradient descent through a trained forward model.

Each tick the previous optimized input sequence is shifted forward by one
step to seed the search. Stage 1 refines that seed plus noise-perturbed copies
with large unit-norm gradient steps; stage 2 refines the best of them with
small steps. Every sequence is clamped to the input bounds after each change,
and the lowest-loss sequence seen anywhere is the one returned.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .model import DDCNetRegressor, InputGradient, initial_state

GRAD_EPS = 1e-12


@dataclass(frozen=True)
class ControllerConfig:
    alpha: float = 30.0
    beta1_step: float = 3.0  # deg
    beta2_step: float = 0.5  # deg
    n_batch: int = 10
    n1: int = 10
    n2: int = 20
    delta_u_batch: float = 5.0  # deg
    u_min: float = 0.0
    u_max: float = 50.0
    noise: str = "offset"  # "element": iid per entry, "offset": one shift per sequence

    def __post_init__(self):
        if not self.beta2_step < self.beta1_step:
            raise ValueError("beta2_step must be smaller than beta1_step")
        if not self.u_min < self.u_max:
            raise ValueError("u_min must be below u_max")
        if min(self.n_batch, self.n1, self.n2) <= 0:
            raise ValueError("n_batch, n1 and n2 must be positive")
        if self.alpha < 0 or self.delta_u_batch < 0:
            raise ValueError("alpha and delta_u_batch must be non-negative")
        if self.noise not in ("element", "offset"):
            raise ValueError(f"unknown noise mode {self.noise!r}")

    @classmethod
    def from_mapping(cls, mapping) -> "ControllerConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in mapping:
                raw = mapping[f.name]
                kwargs[f.name] = {"int": int, "float": float}.get(f.type, str)(raw)
        return cls(**kwargs)


@dataclass
class Diagnostics:
    stage1_losses: np.ndarray  # (n1, n_candidates), loss before each step
    stage1_final: np.ndarray  # (n_candidates,), loss after the last stage-1 step
    stage2_losses: np.ndarray  # (n2,)
    winner: int  # candidate carried into stage 2
    best_loss: float
    start_loss: float  # unperturbed warm start, nan on a cold tick
    n_candidates: int
    n_grad_evals: int  # per-sequence forward/backward pairs
    cold: bool
    initial: np.ndarray | None = None  # (n_candidates, N, N_u), clamped stage-1 starting points


def warm_start(prev_u_seq: np.ndarray) -> np.ndarray:
    """Drop the first step of the previous sequence and repeat its last one."""
    prev = np.asarray(prev_u_seq, dtype=np.float64)
    return np.concatenate([prev[1:], prev[-1:]], axis=0)


def cold_start_batch(config: ControllerConfig, rng: np.random.Generator, horizon: int = 30,
                     n_input: int = 1) -> np.ndarray:
    """``n_batch`` sequences, each a single uniform level held over the horizon."""
    levels = rng.uniform(config.u_min, config.u_max, size=(config.n_batch, 1, n_input))
    return np.repeat(levels, horizon, axis=1)


def adjacent_error(u_seq: np.ndarray) -> float:
    u = np.asarray(u_seq, dtype=np.float64)
    if u.shape[0] < 2:
        return 0.0
    return float(np.mean(np.diff(u, axis=0) ** 2))


def control_loss(s_pred_seq, s_target_seq, u_seq, alpha: float) -> float:
    """Tracking MSE plus ``alpha`` times the mean squared step between adjacent inputs."""
    s_pred = np.asarray(s_pred_seq, dtype=np.float64)
    s_target = np.asarray(s_target_seq, dtype=np.float64)
    if s_pred.shape != s_target.shape:
        raise ValueError(f"predicted {s_pred.shape} and target {s_target.shape} differ")
    if np.shape(u_seq)[0] != s_pred.shape[0]:
        raise ValueError("input and state sequences have different lengths")
    return float(np.mean((s_pred - s_target) ** 2)) + alpha * adjacent_error(u_seq)


def _batch_loss_and_grads(s_pred, s_target, U, alpha):
    """Vectorized loss over candidates plus ``dL/ds`` and the smoothness part of ``dL/du``.

    ``s_pred``: (B, N, N_s); ``U``: (B, N, N_u).
    """
    B, N, n_u = U.shape
    err = s_pred - s_target
    losses = np.mean(err**2, axis=(1, 2))
    grad_s = 2.0 * err / (N * s_pred.shape[2])
    grad_u = np.zeros_like(U)
    if N > 1:
        d = np.diff(U, axis=1)
        losses = losses + alpha * np.mean(d**2, axis=(1, 2))
        gd = 2.0 * alpha * d / ((N - 1) * n_u)
        grad_u[:, 1:] += gd
        grad_u[:, :-1] -= gd
    return losses, grad_s, grad_u


def gradient_step(u_seq, grad, beta_step: float, u_min: float, u_max: float) -> np.ndarray:
    """Move ``beta_step`` against the unit gradient, then clamp. No-op for a vanishing gradient."""
    u = np.asarray(u_seq, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    norm = np.sqrt(np.sum(g * g))
    if norm < GRAD_EPS:
        return u.copy()
    return np.clip(u - beta_step * g / norm, u_min, u_max)


def _batched_step(U, G, beta_step, u_min, u_max):
    if not np.all(np.isfinite(G)):
        raise FloatingPointError("non-finite gradient")
    norms = np.sqrt(np.sum(G * G, axis=(1, 2)))
    moving = norms >= GRAD_EPS
    out = U.copy()
    out[moving] = np.clip(
        U[moving] - beta_step * G[moving] / norms[moving, None, None], u_min, u_max
    )
    return out


class GradientMPC:
    """Stateful controller around a fitted :class:`DDCNetRegressor`.

    Parameters
    ----------
    model : DDCNetRegressor
        Fitted forward model.
    config : ControllerConfig
    seed : int
        Seeds the cold-start levels and the stage-1 noise.
    """

    def __init__(self, model: DDCNetRegressor, config: ControllerConfig | None = None, seed: int = 0):
        self.model = model
        self.config = config or ControllerConfig()
        if model.n_initial != 4:
            raise ValueError(f"controller builds a 4-element initial state, model expects {model.n_initial}")
        self.horizon = model.horizon
        self.n_input = model.n_input
        self.n_state = model.n_state
        self.seed = seed
        self._grad = InputGradient(model)
        self.reset()

    def reset(self) -> None:
        self.prev_u_seq: np.ndarray | None = None
        self.rng = np.random.default_rng(self.seed)
        self.last_diagnostics: Diagnostics | None = None

    def _evaluate(self, i_t, U, s_target, backward=True):
        B = U.shape[0]
        X = np.concatenate([np.broadcast_to(i_t, (B, i_t.size)), U.reshape(B, -1)], axis=1)
        s = self._grad.forward(X).reshape(B, self.horizon, self.n_state)
        losses, grad_s, grad_u = _batch_loss_and_grads(s, s_target, U, self.config.alpha)
        if not backward:
            return losses, None
        gx = self._grad.backward(grad_s.reshape(B, -1))
        grad_u = grad_u + gx[:, i_t.size:].reshape(U.shape)
        return losses, grad_u

    def loss_and_gradient(self, i_t, u_seq, s_target_seq) -> tuple[float, np.ndarray]:
        """Loss of one sequence and its gradient with respect to the inputs (deg)."""
        U = np.asarray(u_seq, dtype=np.float64).reshape(1, self.horizon, self.n_input)
        s_target = np.asarray(s_target_seq, dtype=np.float64).reshape(self.horizon, self.n_state)
        losses, grads = self._evaluate(np.asarray(i_t, dtype=np.float64), U, s_target)
        return float(losses[0]), grads[0]

    def optimize(self, i_t, s_target_seq) -> tuple[np.ndarray, Diagnostics]:
        cfg = self.config
        i_t = np.asarray(i_t, dtype=np.float64).ravel()
        if i_t.size != self.model.n_initial:
            raise ValueError(f"initial state has {i_t.size} entries, model expects {self.model.n_initial}")
        s_target = np.asarray(s_target_seq, dtype=np.float64)
        if s_target.size != self.horizon * self.n_state:
            raise ValueError(f"target sequence must have {self.horizon * self.n_state} entries")
        s_target = s_target.reshape(self.horizon, self.n_state)

        cold = self.prev_u_seq is None
        if cold:
            U = cold_start_batch(cfg, self.rng, self.horizon, self.n_input)
        else:
            base = np.clip(warm_start(self.prev_u_seq), cfg.u_min, cfg.u_max)
            if cfg.noise == "element":
                shape = (cfg.n_batch, self.horizon, self.n_input)
            else:
                shape = (cfg.n_batch, 1, self.n_input)
            noise = self.rng.uniform(-cfg.delta_u_batch, cfg.delta_u_batch, size=shape)
            U = np.concatenate([base[None], np.clip(base[None] + noise, cfg.u_min, cfg.u_max)])

        n_cand = U.shape[0]
        initial = U.copy()
        best_loss, best_u = np.inf, None

        def track(losses, seqs):
            nonlocal best_loss, best_u
            k = int(np.argmin(losses))
            if losses[k] < best_loss:
                best_loss, best_u = float(losses[k]), seqs[k].copy()

        stage1 = np.empty((cfg.n1, n_cand))
        for r in range(cfg.n1):
            losses, G = self._evaluate(i_t, U, s_target)
            stage1[r] = losses
            track(losses, U)
            U = _batched_step(U, G, cfg.beta1_step, cfg.u_min, cfg.u_max)
        final1, _ = self._evaluate(i_t, U, s_target, backward=False)
        track(final1, U)
        winner = int(np.argmin(final1))

        u = U[winner : winner + 1]
        stage2 = np.empty(cfg.n2)
        for r in range(cfg.n2):
            losses, G = self._evaluate(i_t, u, s_target)
            stage2[r] = losses[0]
            track(losses, u)
            u = _batched_step(u, G, cfg.beta2_step, cfg.u_min, cfg.u_max)
        last, _ = self._evaluate(i_t, u, s_target, backward=False)
        track(last, u)

        diag = Diagnostics(
            stage1_losses=stage1,
            stage1_final=final1,
            stage2_losses=stage2,
            winner=winner,
            best_loss=best_loss,
            start_loss=float("nan") if cold else float(stage1[0, 0]),
            n_candidates=n_cand,
            n_grad_evals=n_cand * cfg.n1 + cfg.n2,
            cold=cold,
            initial=initial,
        )
        return best_u, diag

    def control_step(self, observation, target_velocity) -> float | np.ndarray:
        """Optimize and return the next pedal command.

        ``observation`` needs ``v``, ``a``, ``theta`` and ``theta_rate``
        attributes; ``target_velocity`` is a scalar held over the horizon or a
        full target sequence.
        """
        i_t = initial_state(observation.v, observation.a, observation.theta, observation.theta_rate)
        target = np.asarray(target_velocity, dtype=np.float64)
        if target.ndim == 0:
            target = np.full((self.horizon, self.n_state), float(target))
        u_seq, diag = self.optimize(i_t, target)
        self.prev_u_seq = u_seq
        self.last_diagnostics = diag
        first = u_seq[0]
        return float(first[0]) if self.n_input == 1 else first.copy()
