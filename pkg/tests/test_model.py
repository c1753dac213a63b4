import pickle

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from ddcnet.model import (
    DDCNetRegressor,
    ModelConsistencyError,
    ModelFileError,
    ModelVersionError,
    Normalizer,
    Trajectory,
    TrajectoryError,
    load_model,
    samples_to_arrays,
    save_model,
    train_model,
    window_trajectory,
)


def make_traj(n, u=None, v=None, period=0.2):
    rng = np.random.default_rng(n)
    u = rng.uniform(0, 50, n) if u is None else np.broadcast_to(u, n)
    v = rng.uniform(0, 12, n) if v is None else np.broadcast_to(v, n)
    return Trajectory(np.arange(n) * period, u, v, period=period)


@pytest.fixture(scope="module")
def constant_model():
    """Trained on a system whose output is always 5 km/h."""
    traj = make_traj(300, v=5.0)
    return train_model(window_trajectory(traj), epochs=100, seed=0)


# --------------------------------------------------------------------------- trajectories


def test_window_count_300_rows():
    assert len(window_trajectory(make_traj(300), 30)) == 270


def test_window_minimal():
    assert len(window_trajectory(make_traj(31), 30)) == 1


@pytest.mark.parametrize("n", [2, 29, 30])
def test_window_too_short(n):
    with pytest.raises(TrajectoryError, match="trajectory shorter than horizon"):
        window_trajectory(make_traj(n), 30)


@given(st.integers(2, 80), st.integers(1, 20))
def test_window_count_formula(T, N):
    if T <= N:
        return
    assert len(window_trajectory(make_traj(T), N)) == T - N


def test_window_contents():
    traj = make_traj(40)
    s = window_trajectory(traj, 5)[7]
    assert np.array_equal(s.i_t, [traj.v[7], (traj.v[7] - traj.v[6]) / 0.2, traj.u[7],
                                  (traj.u[7] - traj.u[6]) / 0.2])
    assert np.array_equal(s.u_seq[:, 0], traj.u[8:13])
    assert np.array_equal(s.s_seq[:, 0], traj.v[8:13])


def test_constant_trajectory_windows_identical():
    samples = window_trajectory(make_traj(50, u=10.0, v=5.0), 30)
    X, y = samples_to_arrays(samples)
    assert np.all(X == X[0]) and np.all(y == 5.0)
    assert X[0, 1] == 0.0 and X[0, 3] == 0.0
    assert X[0, 0] == 5.0 and X[0, 2] == 10.0


def test_trajectory_rejects_bad_spacing():
    with pytest.raises(TrajectoryError):
        Trajectory([0.0, 0.2, 0.5], [0, 0, 0], [0, 0, 0])
    with pytest.raises(TrajectoryError):
        Trajectory([0.0, 0.2, 0.2], [0, 0, 0], [0, 0, 0])


def test_trajectory_bounds_check():
    with pytest.raises(TrajectoryError):
        make_traj(3, u=51.0).check_bounds()
    make_traj(3, u=50.0).check_bounds()


def test_trajectory_csv_round_trip(tmp_path):
    traj = make_traj(20)
    path = tmp_path / "t.csv"
    traj.to_csv(path)
    assert path.read_text().splitlines()[0] == "time_s,u_deg,v_kmh"
    back = Trajectory.from_csv(path)
    assert np.allclose(back.u, traj.u, rtol=1e-11) and np.allclose(back.v, traj.v, rtol=1e-11)
    assert np.allclose(back.time, traj.time)


def test_trajectory_csv_bad_header(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("t,u,v\n0,0,0\n")
    with pytest.raises(TrajectoryError):
        Trajectory.from_csv(path)


# --------------------------------------------------------------------------- normalizer


def test_normalizer_two_points():
    norm = Normalizer().fit([[0.0], [10.0]])
    assert norm.mean_[0] == 5.0 and norm.scale_[0] == 5.0
    assert norm.transform([[10.0]])[0, 0] == 1.0


def test_normalizer_zero_variance():
    norm = Normalizer().fit([[3.0, 1.0], [3.0, 2.0]])
    assert norm.scale_[0] == 1.0
    assert norm.transform([[7.0, 1.5]])[0, 0] == 4.0


@pytest.mark.parametrize("X", [np.empty((0, 2)), np.ones((1, 2))])
def test_normalizer_needs_two_samples(X):
    with pytest.raises(ValueError):
        Normalizer().fit(X)


@given(arrays(np.float64, (6, 3), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3)))
def test_normalizer_round_trip(fit_data, x):
    norm = Normalizer().fit(fit_data)
    assert np.all(np.abs(norm.inverse_transform(norm.transform(x)) - x) < 1e-12 * max(1.0, np.abs(x).max()))


def test_normalized_training_features_standardized():
    X = np.random.default_rng(0).normal(3.0, 7.0, (100, 4))
    Z = Normalizer().fit_transform(X)
    assert np.allclose(Z.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(Z.std(axis=0), 1.0)


# --------------------------------------------------------------------------- training


def test_split_sizes_and_determinism():
    model = DDCNetRegressor(random_state=4)
    train, test = model.split_indices(270)
    assert (len(test), len(train)) == (54, 216)
    assert np.array_equal(np.sort(np.concatenate([train, test])), np.arange(270))
    train2, test2 = DDCNetRegressor(random_state=4).split_indices(270)
    assert np.array_equal(train, train2) and np.array_equal(test, test2)


@given(st.integers(10, 500), st.integers(0, 1000))
def test_split_disjoint_exhaustive(n, seed):
    train, test = DDCNetRegressor(random_state=seed).split_indices(n)
    assert len(test) == n // 5
    assert not set(train) & set(test)
    assert len(train) + len(test) == n


def test_training_needs_ten_samples():
    samples = window_trajectory(make_traj(39), 30)
    with pytest.raises(ValueError, match="at least 10"):
        train_model(samples, epochs=1)


def test_constant_system_is_learned(constant_model):
    assert constant_model.best_test_loss_ < 1e-3
    # the system only ever sits at v = 5, a = 0; the pedal inputs are arbitrary
    rng = np.random.default_rng(9)
    n = 200
    X = np.column_stack([np.full(n, 5.0), np.zeros(n), rng.uniform(0, 50, n),
                         rng.normal(0, 100, n), rng.uniform(0, 50, (n, 30))])
    pred = constant_model.predict(X)
    assert pred.shape == (n, 30)
    assert np.all(np.abs(pred - 5.0) < 0.1)


def test_random_data_training_improves(trained_model):
    hist = trained_model.test_loss_history_
    assert len(hist) == 101
    assert trained_model.best_test_loss_ < hist[0]
    assert trained_model.best_test_loss_ == min(hist)
    assert hist[trained_model.best_epoch_] == trained_model.best_test_loss_


def test_training_is_deterministic(default_pipeline):
    cfg, _, model = default_pipeline
    traj = Trajectory.from_csv(cfg.path("trajectory"))
    again = train_model(window_trajectory(traj), epochs=100, seed=0)
    assert again.test_loss_history_ == model.test_loss_history_


def test_predict_sequence_shape(trained_model):
    out = trained_model.predict_sequence([3.0, 0.0, 20.0, 0.0], np.full((30, 1), 20.0))
    assert out.shape == (30, 1)
    with pytest.raises(ValueError):
        trained_model.predict_sequence([3.0, 0.0, 20.0], np.full((30, 1), 20.0))
    with pytest.raises(ValueError):
        trained_model.predict(np.zeros((1, 33)))


def test_predict_is_pure(trained_model):
    X = np.random.default_rng(0).uniform(0, 20, (8, 34))
    a = trained_model.predict(X)
    trained_model.network_.forward(trained_model.x_scaler_.transform(X), "infer")
    b = trained_model.predict(X)
    assert np.array_equal(a, b)


def test_sklearn_params_and_clone(trained_model):
    params = trained_model.get_params()
    assert params["hidden_sizes"] == (80, 50, 20) and params["epochs"] == 100
    fresh = clone(trained_model)
    assert not hasattr(fresh, "network_")
    fresh.set_params(epochs=2)
    assert fresh.epochs == 2


def test_score_is_negative_rmse(default_pipeline):
    _, traj, model = default_pipeline
    X, y = samples_to_arrays(window_trajectory(traj))
    assert model.score(X, y) == pytest.approx(-np.sqrt(np.mean((model.predict(X) - y) ** 2)))


def test_pickle_round_trip(trained_model):
    X = np.random.default_rng(1).uniform(0, 20, (3, 34))
    back = pickle.loads(pickle.dumps(trained_model))
    assert np.array_equal(back.predict(X), trained_model.predict(X))


# --------------------------------------------------------------------------- persistence


def test_save_load_bit_exact(trained_model, tmp_path):
    path = tmp_path / "m.ddcn"
    save_model(trained_model, path)
    loaded = load_model(path)
    X = np.random.default_rng(2).uniform(0, 50, (16, 34))
    assert np.array_equal(loaded.predict(X), trained_model.predict(X))
    assert loaded.best_test_loss_ == trained_model.best_test_loss_
    assert loaded.test_loss_history_ == trained_model.test_loss_history_
    save_model(loaded, tmp_path / "again.ddcn")
    assert (tmp_path / "again.ddcn").read_bytes() == path.read_bytes()


def _saved_text(model, tmp_path):
    path = tmp_path / "m.ddcn"
    save_model(model, path)
    return path, path.read_text()


@pytest.mark.parametrize("header", ["DDCN-MODEL 2", "XXXX-MODEL 1", ""])
def test_load_bad_header(trained_model, tmp_path, header):
    path, text = _saved_text(trained_model, tmp_path)
    path.write_text(header + "\n" + text.split("\n", 1)[1])
    with pytest.raises(ModelVersionError):
        load_model(path)


def test_load_hidden_mismatch(trained_model, tmp_path):
    path, text = _saved_text(trained_model, tmp_path)
    path.write_text(text.replace("hidden 80 50 20", "hidden 80 40 20"))
    with pytest.raises(ModelConsistencyError):
        load_model(path)


def test_load_truncated(trained_model, tmp_path):
    path, text = _saved_text(trained_model, tmp_path)
    path.write_text(text[: len(text) // 2])
    with pytest.raises(ModelFileError):
        load_model(path)


def test_load_non_finite(trained_model, tmp_path):
    path, text = _saved_text(trained_model, tmp_path)
    lines = text.split("\n")
    i = next(k for k, line in enumerate(lines) if line.startswith("bias "))
    lines[i] = "bias nan" + lines[i][len("bias ") + len(lines[i].split()[1]):]
    path.write_text("\n".join(lines))
    with pytest.raises(ModelFileError, match="non-finite"):
        load_model(path)


def test_model_file_header_fields(trained_model, tmp_path):
    _, text = _saved_text(trained_model, tmp_path)
    keys = [line.split()[0] for line in text.splitlines()[:16]]
    assert keys[0] == "DDCN-MODEL"
    for key in ("horizon", "n_state", "n_initial", "n_input", "period", "u_min", "u_max",
                "seed", "best_test_loss"):
        assert key in keys
