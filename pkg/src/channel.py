import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from src.models.scenario import FiberScenario
from src.polarization import (
    H, S3_AXIS, PoincareRotation, StokesVector, compose, random_rotation,
    random_unit_vector, rotate
)

logger = logging.getLogger(__name__)

# arccos(0.96): half-angle of the cap the 50 km thresholds accept
T1_CAP_ANGLE = math.acos(0.96)


def transmittance(sc: FiberScenario) -> float:
    """Fraction of photons surviving fiber and on-line elements"""
    total_db = sc.length_km * sc.loss_db_per_km + sc.element_loss_db
    return 10.0 ** (-total_db / 10.0)


@dataclass(frozen=True)
class ChannelState:
    """Accumulated fiber birefringence and the drift process driving it"""

    birefringence: PoincareRotation = PoincareRotation.identity()
    elapsed_s: float = 0.0
    drift_angle_std: float = 0.0

    @classmethod
    def initial(cls, sc: FiberScenario, rng: Optional[np.random.Generator] = None,
                actuator: Optional[PoincareRotation] = None) -> 'ChannelState':
        """Starting birefringence; 'aligned' cancels the given actuator rotation exactly"""
        if sc.initial_birefringence == 'random':
            if rng is None:
                raise ValueError("a random initial birefringence needs an rng")
            birefringence = random_rotation(rng)
        elif actuator is not None:
            birefringence = actuator.inverse()
        else:
            birefringence = PoincareRotation.identity()
        return cls(birefringence=birefringence, drift_angle_std=sc.drift_angle_std)


def evolve_drift(st: ChannelState, dt: float, rng: np.random.Generator) -> ChannelState:
    """Advance the isotropic random-walk drift by dt seconds"""
    if dt < 0:
        raise ValueError(f"dt must be nonnegative, got {dt}")
    if dt == 0:
        return st
    if st.drift_angle_std == 0:
        return replace(st, elapsed_s=st.elapsed_s + dt)
    axis = random_unit_vector(rng)
    angle = float(rng.normal(0.0, st.drift_angle_std * math.sqrt(dt)))
    increment = PoincareRotation(axis, angle)
    return ChannelState(
        birefringence=compose(st.birefringence, increment),
        elapsed_s=st.elapsed_s + dt,
        drift_angle_std=st.drift_angle_std,
    )


def channel_rotation(st: ChannelState, actuator: PoincareRotation) -> PoincareRotation:
    """Fiber scrambling followed by Bob's compensating controller"""
    return compose(st.birefringence, actuator)


def apply_channel(s: StokesVector, st: ChannelState, actuator: PoincareRotation) -> StokesVector:
    return rotate(s, channel_rotation(st, actuator))


def laser_offset_rotation(sc: FiberScenario) -> PoincareRotation:
    """Extra rotation seen by pulses from the second laser (wavelength offset)"""
    return PoincareRotation(S3_AXIS, sc.laser_offset_angle)


def launch_state(state_name: str, s: StokesVector, sc: FiberScenario) -> StokesVector:
    """State as it enters the fiber, including the per-laser offset"""
    if sc.laser_offset_angle and state_name in sc.laser_offset_states:
        return rotate(s, laser_offset_rotation(sc))
    return s


def drift_escape_times(drift_angle_std: float, trajectories: int, rng: np.random.Generator,
                       cap_angle: float = T1_CAP_ANGLE, max_s: int = 3600, dt: float = 1.0) -> np.ndarray:
    """First time (s) the drifted image of H leaves a cap of cap_angle around its start.

    Trajectories that never escape within max_s report max_s.
    """
    points = np.tile(H.as_array(), (trajectories, 1))
    escape = np.full(trajectories, float(max_s))
    alive = np.ones(trajectories, dtype=bool)
    step_std = drift_angle_std * math.sqrt(dt)
    steps = int(max_s / dt)
    for step in range(1, steps + 1):
        axes = rng.standard_normal((trajectories, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        angles = rng.normal(0.0, step_std, size=trajectories)
        cos_a = np.cos(angles)[:, None]
        sin_a = np.sin(angles)[:, None]
        dots = np.sum(axes * points, axis=1, keepdims=True)
        points = points * cos_a + np.cross(axes, points) * sin_a + axes * dots * (1.0 - cos_a)
        deviation = np.arccos(np.clip(points[:, 0], -1.0, 1.0))
        escaped = alive & (deviation > cap_angle)
        escape[escaped] = step * dt
        alive &= ~escaped
        if not alive.any():
            break
    return escape
