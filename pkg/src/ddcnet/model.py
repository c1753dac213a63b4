"""Trajectory windowing, normalization, training and persistence of the forward model.

The forward model maps ``[i_t, u_{t+1}, ..., u_{t+N}]`` to
``[s_{t+1}, ..., s_{t+N}]``. For the pedal task ``i_t`` holds velocity,
acceleration, pedal angle and pedal angular velocity, the inputs are pedal
angles in degrees and the states are velocities in km/h.
"""
from __future__ import annotations

import csv
import io
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .netcore import INFER, TRAIN, AdamState, BatchNorm, Dense, Network, Sigmoid, adam_step

TRAJECTORY_HEADER = ("time_s", "u_deg", "v_kmh")
MODEL_MAGIC = "DDCN-MODEL"
MODEL_VERSION = 1


class TrajectoryError(ValueError):
    pass


class ModelFileError(ValueError):
    """Raised for any unreadable model file."""


class ModelVersionError(ModelFileError):
    pass


class ModelConsistencyError(ModelFileError):
    pass


# --------------------------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    """Fixed-period log of pedal command ``u`` (deg) and velocity ``v`` (km/h).

    Row ``k`` pairs the velocity sampled at ``time[k]`` with the command that
    was held during the period ending there.
    """

    time: np.ndarray
    u: np.ndarray
    v: np.ndarray
    period: float = 0.2

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if not (self.time.shape == self.u.shape == self.v.shape) or self.time.ndim != 1:
            raise TrajectoryError("time, u and v must be 1-D and equally long")
        if len(self.time) > 1:
            steps = np.diff(self.time)
            if np.any(steps <= 0):
                raise TrajectoryError("rows must be strictly time-ordered")
            if not np.allclose(steps, self.period, rtol=0, atol=1e-6):
                raise TrajectoryError(f"rows must be spaced by the period {self.period} s")

    def __len__(self) -> int:
        return len(self.time)

    @staticmethod
    def _backward_diff(x: np.ndarray, period: float) -> np.ndarray:
        d = np.zeros_like(x)
        d[1:] = np.diff(x) / period
        return d

    @property
    def a(self) -> np.ndarray:
        return self._backward_diff(self.v, self.period)

    @property
    def u_rate(self) -> np.ndarray:
        return self._backward_diff(self.u, self.period)

    def check_bounds(self, u_min: float = 0.0, u_max: float = 50.0) -> None:
        if np.any(self.u < u_min) or np.any(self.u > u_max):
            raise TrajectoryError(f"control input outside [{u_min}, {u_max}] deg")

    def to_csv(self, path) -> None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRAJECTORY_HEADER)
        for t, u, v in zip(self.time, self.u, self.v):
            writer.writerow((f"{t:.3f}", f"{u:.12g}", f"{v:.12g}"))
        Path(path).write_text(buf.getvalue())

    @classmethod
    def from_csv(cls, path, period: float = 0.2) -> "Trajectory":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != TRAJECTORY_HEADER:
                raise TrajectoryError(f"{path}: expected header {','.join(TRAJECTORY_HEADER)}")
            rows = [[float(x) for x in row] for row in reader if row]
        if not rows:
            raise TrajectoryError(f"{path}: no data rows")
        data = np.array(rows)
        if data.shape[1] != 3:
            raise TrajectoryError(f"{path}: expected 3 columns")
        return cls(data[:, 0], data[:, 1], data[:, 2], period=period)


@dataclass(frozen=True)
class TrainingSample:
    i_t: np.ndarray  # (N_i,)
    u_seq: np.ndarray  # (N, N_u)
    s_seq: np.ndarray  # (N, N_s)


def initial_state(v: float, a: float, u: float, u_rate: float) -> np.ndarray:
    return np.array([v, a, u, u_rate], dtype=np.float64)


def window_trajectory(traj: Trajectory, horizon: int = 30) -> list[TrainingSample]:
    """Cut a trajectory into ``len(traj) - horizon`` overlapping supervised windows."""
    T = len(traj)
    if T <= horizon:
        raise TrajectoryError("trajectory shorter than horizon")
    a, u_rate = traj.a, traj.u_rate
    samples = []
    for t in range(T - horizon):
        i_t = initial_state(traj.v[t], a[t], traj.u[t], u_rate[t])
        sl = slice(t + 1, t + 1 + horizon)
        samples.append(TrainingSample(i_t, traj.u[sl][:, None].copy(), traj.v[sl][:, None].copy()))
    return samples


def samples_to_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into ``X`` of width ``N_i + N N_u`` and ``y`` of width ``N N_s``."""
    if len(samples) == 0:
        raise ValueError("no samples")
    X = np.array([np.concatenate([s.i_t, s.u_seq.ravel()]) for s in samples])
    y = np.array([s.s_seq.ravel() for s in samples])
    return X, y


# --------------------------------------------------------------------------- normalizer


class Normalizer(TransformerMixin, BaseEstimator):
    """Per-feature z-score. Constant features keep scale 1."""

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        self.mean_ = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        self.scale_ = scale
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        return (np.asarray(X, dtype=np.float64) - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self)
        return np.asarray(X, dtype=np.float64) * self.scale_ + self.mean_

    @classmethod
    def from_arrays(cls, mean, scale) -> "Normalizer":
        norm = cls()
        norm.mean_ = np.asarray(mean, dtype=np.float64)
        norm.scale_ = np.asarray(scale, dtype=np.float64)
        norm.n_features_in_ = len(norm.mean_)
        return norm


# --------------------------------------------------------------------------- regressor


class DDCNetRegressor(RegressorMixin, BaseEstimator):
    """Forward model from an initial state plus an input sequence to a state sequence.

    Training holds out ``test_fraction`` of the rows (picked by a seeded
    shuffle), runs minibatch Adam on the MSE in normalized space, and keeps the
    parameter snapshot with the lowest held-out loss.

    Parameters
    ----------
    horizon, n_state, n_initial, n_input : int
        Sequence length ``N`` and the widths ``N_s``, ``N_i``, ``N_u``.
    hidden_sizes : tuple of int
        Widths of the hidden dense layers.
    epochs, batch_size, learning_rate, test_fraction :
        Training schedule.
    period, u_min, u_max : float
        Carried along so controllers and files stay self-describing.
    random_state : int
        Seeds the split, the batching order and weight initialization.
    """

    def __init__(
        self,
        horizon=30,
        n_state=1,
        n_initial=4,
        n_input=1,
        hidden_sizes=(80, 50, 20),
        epochs=100,
        batch_size=32,
        learning_rate=1e-3,
        test_fraction=0.2,
        period=0.2,
        u_min=0.0,
        u_max=50.0,
        random_state=0,
    ):
        self.horizon = horizon
        self.n_state = n_state
        self.n_initial = n_initial
        self.n_input = n_input
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.test_fraction = test_fraction
        self.period = period
        self.u_min = u_min
        self.u_max = u_max
        self.random_state = random_state

    @property
    def in_dim(self) -> int:
        return self.n_initial + self.horizon * self.n_input

    @property
    def out_dim(self) -> int:
        return self.horizon * self.n_state

    def split_indices(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(train_idx, test_idx)`` for ``n`` rows; identical for a fixed seed."""
        perm = np.random.default_rng(self.random_state).permutation(n)
        n_test = int(np.floor(n * self.test_fraction + 1e-9))
        return np.sort(perm[n_test:]), np.sort(perm[:n_test])

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y have different row counts")
        if X.shape[1] != self.in_dim or y.shape[1] != self.out_dim:
            raise ValueError(
                f"expected widths ({self.in_dim}, {self.out_dim}), got ({X.shape[1]}, {y.shape[1]})"
            )
        if X.shape[0] < 10:
            raise ValueError(f"need at least 10 samples to train, got {X.shape[0]}")

        train_idx, test_idx = self.split_indices(X.shape[0])
        self.x_scaler_ = Normalizer().fit(X[train_idx])
        self.y_scaler_ = Normalizer().fit(y[train_idx])
        Xn, yn = self.x_scaler_.transform(X), self.y_scaler_.transform(y)
        X_tr, y_tr, X_te, y_te = Xn[train_idx], yn[train_idx], Xn[test_idx], yn[test_idx]

        rng = np.random.default_rng(self.random_state)
        net = Network.build(self.in_dim, self.hidden_sizes, self.out_dim, seed=rng)
        opt = AdamState(lr=self.learning_rate)

        def test_loss():
            return float(np.mean((net.forward(X_te, INFER) - y_te) ** 2))

        self.test_loss_history_ = [test_loss()]
        self.train_loss_history_ = []
        best, best_net, best_epoch = self.test_loss_history_[0], net.copy(), 0
        n_tr = len(X_tr)
        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(n_tr)
            batches = [order[i : i + self.batch_size] for i in range(0, n_tr, self.batch_size)]
            if len(batches) > 1 and len(batches[-1]) < 2:
                batches[-2] = np.concatenate(batches[-2:])
                batches.pop()
            running = 0.0
            for idx in batches:
                pred = net.forward(X_tr[idx], TRAIN)
                diff = pred - y_tr[idx]
                running += float(np.sum(diff**2))
                grads = net.backward_params(2.0 * diff / diff.size)
                adam_step(net.parameters(), grads, opt)
            self.train_loss_history_.append(running / (n_tr * self.out_dim))
            loss = test_loss()
            self.test_loss_history_.append(loss)
            if loss < best:
                best, best_net, best_epoch = loss, net.copy(), epoch

        self.network_ = best_net
        self.best_test_loss_ = best
        self.best_epoch_ = best_epoch
        self.epochs_run_ = self.epochs
        self.n_features_in_ = self.in_dim
        self._lock = threading.Lock()
        return self

    def _check_input(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input features, got {X.shape[1]}")
        return X

    def predict(self, X) -> np.ndarray:
        """Predicted state sequences in physical units, one row per input row."""
        X = self._check_input(X)
        with self._lock:
            out = self.network_.forward(self.x_scaler_.transform(X), INFER)
        return self.y_scaler_.inverse_transform(out)

    def predict_sequence(self, i_t, u_seq) -> np.ndarray:
        """Predict ``(N, N_s)`` states for one initial state and one ``(N, N_u)`` input sequence."""
        i_t = np.asarray(i_t, dtype=np.float64).ravel()
        u_seq = np.asarray(u_seq, dtype=np.float64)
        if i_t.size != self.n_initial or u_seq.size != self.horizon * self.n_input:
            raise ValueError(
                f"expected i_t of size {self.n_initial} and u_seq of size {self.horizon * self.n_input}"
            )
        x = np.concatenate([i_t, u_seq.ravel()])[None, :]
        return self.predict(x)[0].reshape(self.horizon, self.n_state)

    def score(self, X, y, sample_weight=None):
        """Negative RMSE in physical units (higher is better)."""
        return -float(np.sqrt(np.mean((self.predict(X) - np.asarray(y)) ** 2)))

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_lock", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()


class InputGradient:
    """Physical-unit forward pass and input gradient through a private copy of the network.

    Owned by one controller; the shared model is never touched.
    """

    def __init__(self, model: DDCNetRegressor):
        check_is_fitted(model, "network_")
        self.model = model
        self.net = model.network_.copy()
        self.x_mean, self.x_scale = model.x_scaler_.mean_, model.x_scaler_.scale_
        self.y_mean, self.y_scale = model.y_scaler_.mean_, model.y_scaler_.scale_

    def forward(self, X: np.ndarray) -> np.ndarray:
        out = self.net.forward((X - self.x_mean) / self.x_scale, INFER)
        return out * self.y_scale + self.y_mean

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the physical input given ``dL/dy`` in physical units."""
        return self.net.backward_input(grad_y * self.y_scale) / self.x_scale


def train_model(samples, epochs: int = 100, seed: int = 0, **params) -> DDCNetRegressor:
    X, y = samples_to_arrays(samples)
    first = samples[0]
    model = DDCNetRegressor(
        horizon=first.u_seq.shape[0],
        n_state=first.s_seq.shape[1],
        n_initial=first.i_t.size,
        n_input=first.u_seq.shape[1],
        epochs=epochs,
        random_state=seed,
        **params,
    )
    return model.fit(X, y)


# --------------------------------------------------------------------------- persistence


def _fmt(values) -> str:
    return " ".join("%.17g" % x for x in np.asarray(values, dtype=np.float64).ravel())


_HEADER_KEYS = (
    ("horizon", int), ("n_state", int), ("n_initial", int), ("n_input", int),
    ("period", float), ("u_min", float), ("u_max", float), ("seed", int),
    ("epochs_run", int), ("best_epoch", int), ("best_test_loss", float),
    ("batch_size", int), ("learning_rate", float), ("test_fraction", float),
)


def save_model(model: DDCNetRegressor, path) -> None:
    check_is_fitted(model, "network_")
    meta = {
        "horizon": model.horizon, "n_state": model.n_state, "n_initial": model.n_initial,
        "n_input": model.n_input, "period": model.period, "u_min": model.u_min,
        "u_max": model.u_max, "seed": model.random_state, "epochs_run": model.epochs_run_,
        "best_epoch": model.best_epoch_, "best_test_loss": model.best_test_loss_,
        "batch_size": model.batch_size, "learning_rate": model.learning_rate,
        "test_fraction": model.test_fraction,
    }
    lines = [f"{MODEL_MAGIC} {MODEL_VERSION}"]
    for key, kind in _HEADER_KEYS:
        lines.append(f"{key} {meta[key]!r}" if kind is int else f"{key} {'%.17g' % meta[key]}")
    lines.append("hidden " + " ".join(str(h) for h in model.network_.hidden_sizes))
    lines.append(f"test_loss_history {len(model.test_loss_history_)} {_fmt(model.test_loss_history_)}")
    for name, arr in (("x_mean", model.x_scaler_.mean_), ("x_scale", model.x_scaler_.scale_),
                      ("y_mean", model.y_scaler_.mean_), ("y_scale", model.y_scaler_.scale_)):
        lines.append(f"{name} {arr.size} {_fmt(arr)}")
    net = model.network_
    lines.append(f"layers {len(net.layers)}")
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Dense):
            lines.append(f"layer {i} dense {layer.out_dim} {layer.in_dim}")
            lines.append("weights " + _fmt(layer.weights))
            lines.append("bias " + _fmt(layer.bias))
        elif isinstance(layer, BatchNorm):
            lines.append(f"layer {i} batchnorm {layer.in_dim} {'%.17g' % layer.epsilon} "
                         f"{'%.17g' % layer.momentum}")
            for name in ("gamma", "beta", "running_mean", "running_var"):
                lines.append(f"{name} " + _fmt(getattr(layer, name)))
        else:
            lines.append(f"layer {i} sigmoid {layer.in_dim}")
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


class _Reader:
    def __init__(self, text: str):
        self.lines = text.split("\n")
        self.pos = 0

    def next(self, key: str) -> list[str]:
        while self.pos < len(self.lines) and not self.lines[self.pos].strip():
            self.pos += 1
        if self.pos >= len(self.lines):
            raise ModelFileError(f"truncated model file: expected '{key}'")
        parts = self.lines[self.pos].split()
        self.pos += 1
        if parts[0] != key:
            raise ModelFileError(f"line {self.pos}: expected '{key}', found '{parts[0]}'")
        return parts[1:]

    def _parse(self, key: str, parts: list[str], count: int | None) -> np.ndarray:
        try:
            vals = np.array([float(p) for p in parts], dtype=np.float64)
        except ValueError as exc:
            raise ModelFileError(f"line {self.pos}: {exc}") from None
        if count is not None and vals.size != count:
            raise ModelFileError(f"line {self.pos}: '{key}' has {vals.size} values, expected {count}")
        if not np.all(np.isfinite(vals)):
            raise ModelFileError(f"line {self.pos}: '{key}' contains non-finite values")
        return vals

    def floats(self, key: str, count: int | None = None) -> np.ndarray:
        return self._parse(key, self.next(key), count)

    def sized(self, key: str) -> np.ndarray:
        """A line of the form ``key <count> v1 v2 ...``."""
        parts = self.next(key)
        if not parts:
            raise ModelFileError(f"line {self.pos}: '{key}' missing count")
        return self._parse(key, parts[1:], int(parts[0]))


def load_model(path) -> DDCNetRegressor:
    text = Path(path).read_text()
    r = _Reader(text)
    first = text.split("\n", 1)[0].split()
    if len(first) != 2 or first[0] != MODEL_MAGIC:
        raise ModelVersionError(f"{path}: not a model file (bad header)")
    if first[1] != str(MODEL_VERSION):
        raise ModelVersionError(f"{path}: unsupported model format version {first[1]!r}")
    r.pos = 1
    try:
        meta = {}
        for key, kind in _HEADER_KEYS:
            (value,) = r.next(key)
            meta[key] = kind(value)
        hidden = tuple(int(h) for h in r.next("hidden"))
        history = r.sized("test_loss_history")
        x_mean, x_scale = r.sized("x_mean"), r.sized("x_scale")
        y_mean, y_scale = r.sized("y_mean"), r.sized("y_scale")
        (n_layers,) = (int(x) for x in r.next("layers"))
        layers = []
        for i in range(n_layers):
            head = r.next("layer")
            if int(head[0]) != i:
                raise ModelFileError(f"layer index {head[0]} out of order")
            kind = head[1]
            if kind == "dense":
                out_dim, in_dim = int(head[2]), int(head[3])
                w = r.floats("weights", out_dim * in_dim).reshape(out_dim, in_dim)
                layers.append(Dense(w, r.floats("bias", out_dim)))
            elif kind == "batchnorm":
                dim = int(head[2])
                bn = BatchNorm(dim, float(head[3]), float(head[4]))
                for name in ("gamma", "beta", "running_mean", "running_var"):
                    setattr(bn, name, r.floats(name, dim))
                if np.any(bn.running_var < 0):
                    raise ModelFileError("negative running variance")
                layers.append(bn)
            elif kind == "sigmoid":
                layers.append(Sigmoid(int(head[2])))
            else:
                raise ModelFileError(f"unknown layer kind {kind!r}")
        r.next("end")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, ModelFileError):
            raise
        raise ModelFileError(f"{path}: malformed model file ({exc})") from None

    try:
        net = Network(layers)
    except ValueError as exc:
        raise ModelConsistencyError(f"{path}: {exc}") from None
    if net.hidden_sizes != hidden:
        raise ModelConsistencyError(
            f"{path}: declared hidden sizes {hidden} disagree with stored layers {net.hidden_sizes}"
        )
    model = DDCNetRegressor(
        horizon=meta["horizon"], n_state=meta["n_state"], n_initial=meta["n_initial"],
        n_input=meta["n_input"], hidden_sizes=hidden, epochs=meta["epochs_run"],
        batch_size=meta["batch_size"], learning_rate=meta["learning_rate"],
        test_fraction=meta["test_fraction"], period=meta["period"], u_min=meta["u_min"],
        u_max=meta["u_max"], random_state=meta["seed"],
    )
    if net.in_dim != model.in_dim or net.out_dim != model.out_dim:
        raise ModelConsistencyError(
            f"{path}: network maps {net.in_dim}->{net.out_dim}, configuration needs "
            f"{model.in_dim}->{model.out_dim}"
        )
    if x_mean.size != net.in_dim or x_scale.size != net.in_dim or y_mean.size != net.out_dim \
            or y_scale.size != net.out_dim:
        raise ModelConsistencyError(f"{path}: normalizer widths disagree with the network")
    if np.any(x_scale <= 0) or np.any(y_scale <= 0):
        raise ModelConsistencyError(f"{path}: normalizer scales must be positive")
    model.network_ = net
    model.x_scaler_ = Normalizer.from_arrays(x_mean, x_scale)
    model.y_scaler_ = Normalizer.from_arrays(y_mean, y_scale)
    model.test_loss_history_ = list(history)
    model.train_loss_history_ = []
    model.best_test_loss_ = meta["best_test_loss"]
    model.best_epoch_ = meta["best_epoch"]
    model.epochs_run_ = meta["epochs_run"]
    model.n_features_in_ = model.in_dim
    model._lock = threading.Lock()
    return model
