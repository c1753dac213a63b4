import numpy as np
import pytest
from hypothesis import settings

from ddcnet.harness import collect_data, load_config, train_from_file
from ddcnet.model import DDCNetRegressor

# property tests draw the same examples on every run
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


@pytest.fixture(scope="session")
def default_pipeline(tmp_path_factory):
    """Default config: collected random trajectory plus the model trained on it."""
    cfg = load_config()
    cfg.output_dir = tmp_path_factory.mktemp("pipeline")
    traj = collect_data(cfg)
    model = train_from_file(cfg)
    return cfg, traj, model


@pytest.fixture(scope="session")
def trained_model(default_pipeline):
    return default_pipeline[2]


def tiny_model(seed: int, horizon: int = 4, n_samples: int = 40, hidden=(5, 4)) -> DDCNetRegressor:
    """Quickly fitted small forward model on random data, for gradient and controller checks."""
    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.uniform(0, 10, (n_samples, 4)), rng.uniform(0, 50, (n_samples, horizon))])
    y = np.cumsum(X[:, 4:] * 0.05, axis=1) + X[:, :1] + rng.normal(0, 0.1, (n_samples, horizon))
    model = DDCNetRegressor(horizon=horizon, hidden_sizes=hidden, epochs=3, random_state=seed)
    return model.fit(X, y)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def record(request):
    """Store one acceptance verdict: ``record(number, passed, detail)``."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def _record(number: int, passed: bool, detail: str) -> bool:
        results[number] = (bool(passed), detail)
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 10):
        passed, detail = results.get(number, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")
