"""Hard-margin class-center losses with recognizability-aware magnitude planning."""

__version__ = "0.1.0"

from .errors import *  # noqa: E402,F401,F403
from .margins import MarginSpec, arcface, cosface, forward, guidance_values, sphereface  # noqa: E402,F401
from .regularizer import RegParams, expected_magnitude, reg_loss, solve_k  # noqa: E402,F401
