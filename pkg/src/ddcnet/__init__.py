"""Learned forward dynamics and gradient-based receding-horizon control for pedal tracking."""
from .baselines import PID1, PID2, RandomPolicy
from .controller import ControllerConfig, GradientMPC, control_loss, gradient_step, warm_start
from .model import DDCNetRegressor, Normalizer, Trajectory, load_model, save_model, window_trajectory
from .netcore import AdamState, Network, adam_step
from .plant import PedalPlant, PlantParams

__all__ = [
    "PID1", "PID2", "RandomPolicy", "ControllerConfig", "GradientMPC", "control_loss",
    "gradient_step", "warm_start", "DDCNetRegressor", "Normalizer", "Trajectory", "load_model",
    "save_model", "window_trajectory", "AdamState", "Network", "adam_step", "PedalPlant",
    "PlantParams",
]
__version__ = "0.1.0"
