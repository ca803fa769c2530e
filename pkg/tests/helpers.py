import math
from typing import Any, Dict, Optional, Tuple

import numpy as np

from nlclab.physics.lagrangian import LagrangianContext
from nlclab.physics.spin_algebra import FieldSchedule, build_spin_operators


OMEGA = 1e6


def random_schedule(
    rng: np.random.Generator, t0: float, t1: float, pieces: int = 4, scale: float = 3.0
) -> FieldSchedule:
    """Continuous piecewise-linear field with random knots and values."""

    knots = np.sort(rng.uniform(t0, t1, pieces - 1))
    edges = [t0, *knots, t1]
    values = rng.normal(size=(pieces + 1, 3)) * scale
    return FieldSchedule.from_pieces(
        (edges[k], edges[k + 1], values[k], values[k + 1]) for k in range(pieces)
    )


def make_context(
    n: int = 2,
    schedule: Optional[FieldSchedule] = None,
    omega: float = OMEGA,
    gyro: float = 1.0,
    span: Tuple[float, float] = (0.0, 1.0),
) -> LagrangianContext:
    schedule = schedule or FieldSchedule.zero(*span)
    return LagrangianContext(build_spin_operators(n), schedule, omega, gyro)


def random_state(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=n) + 1j * rng.normal(size=n)
    return v / np.linalg.norm(v)


def tilted_config(
    alpha: float = math.pi / 3, gamma_s: float = 1e-4, **overrides: Any
) -> Dict[str, Any]:
    """Field-free spin-1/2 config whose prepared state sits at tilt alpha from +z."""

    data: Dict[str, Any] = {
        "spin_n": 2,
        "omega": OMEGA,
        "gyro": 1.0,
        "preparation": {
            "time": 0.0,
            "axis": [math.sin(2 * alpha), 0.0, math.cos(2 * alpha)],
            "outcome": 0,
        },
        "measurement": {"time": 1.0, "axis": [0.0, 0.0, 1.0], "delta_t": 1e-3},
        "anomaly": {"gamma_s": gamma_s},
    }
    data.update(overrides)
    return data
