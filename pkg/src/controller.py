import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Type

from src.models.scenario import ActuatorConfig, ControlSettings, Thresholds
from src.polarization import HV_AXIS, QR_AXIS, EstimatedSOP, PoincareRotation, compose

logger = logging.getLogger(__name__)


class Actuator(Enum):
    """Piezo squeezers of Bob's polarization controller"""

    X1 = 'X1'  # stresses at 45°, rotates about the QR axis
    X2 = 'X2'  # stresses at 0°, rotates about the HV axis


class ControlPhase(Enum):
    IDLE = 'idle'
    ADJUSTING_X2 = 'adjusting_x2'
    ADJUSTING_X1 = 'adjusting_x1'
    CONVERGED = 'converged'


class Unwrappable(RuntimeError):
    """Raised when no multiple of the 2π voltage brings a drive voltage into range"""


@dataclass(frozen=True)
class ControllerState:
    """Drive voltages, X1 search direction and per-cycle bookkeeping"""

    v_x1: float
    v_x2: float
    thresholds: Thresholds
    dir_x1: int = 1
    phase: ControlPhase = ControlPhase.IDLE
    sign_x2: Optional[int] = None
    trial_s2: Optional[float] = None
    last_x1_s1: Optional[float] = None

    @classmethod
    def initial(cls, cfg: ActuatorConfig, thresholds: Thresholds) -> 'ControllerState':
        return cls(v_x1=cfg.v_init_x1, v_x2=cfg.v_init_x2, thresholds=thresholds)

    def actuator_rotation(self, cfg: ActuatorConfig) -> PoincareRotation:
        """Combined controller rotation: X2 acts first, X1 second"""
        return compose(voltage_to_rotation(self.v_x2, Actuator.X2, cfg),
                       voltage_to_rotation(self.v_x1, Actuator.X1, cfg))


@dataclass(frozen=True)
class ControlStep:
    """One sample of a control cycle and what the controller did with it"""

    iteration: int
    s1_hat: float
    s2_hat: float
    v_x1: float
    v_x2: float
    dir_x1: int
    action: str


@dataclass
class FeedbackResult:
    state: ControllerState
    iterations: int
    converged: bool
    trace: List[ControlStep] = field(default_factory=list)
    samples: List[EstimatedSOP] = field(default_factory=list)
    confirmed_samples: List[EstimatedSOP] = field(default_factory=list)


class NotConverged(RuntimeError):
    """Raised when a control cycle runs out of samples before reaching H"""

    def __init__(self, result: FeedbackResult):
        super().__init__(f"Feedback cycle did not converge within {result.iterations} samples")
        self.result = result


# Takes the controller state (drive voltages) and returns one measured window
Plant = Callable[[ControllerState], EstimatedSOP]


def _v_2pi(which: Actuator, cfg: ActuatorConfig) -> float:
    return cfg.v_2pi_x1 if which is Actuator.X1 else cfg.v_2pi_x2


def voltage_to_rotation(v: float, which: Actuator, cfg: ActuatorConfig) -> PoincareRotation:
    """Retardance induced by a drive voltage, as a sphere rotation"""
    axis = QR_AXIS if which is Actuator.X1 else HV_AXIS
    return PoincareRotation(axis, 2.0 * math.pi * v / _v_2pi(which, cfg))


def wrap_voltage(v: float, which: Actuator, cfg: ActuatorConfig) -> float:
    """Shift v by whole 2π voltages until it sits inside the driver range"""
    v_2pi = _v_2pi(which, cfg)
    if cfg.v_max - cfg.v_min < v_2pi:
        raise Unwrappable(f"Driver range [{cfg.v_min}, {cfg.v_max}] is narrower than the 2π voltage {v_2pi}")
    if v > cfg.v_max:
        v -= math.ceil((v - cfg.v_max) / v_2pi) * v_2pi
    elif v < cfg.v_min:
        v += math.ceil((cfg.v_min - v) / v_2pi) * v_2pi
    if not cfg.v_min <= v <= cfg.v_max:
        raise Unwrappable(f"Voltage {v} cannot be wrapped into [{cfg.v_min}, {cfg.v_max}]")
    return v


def within_thresholds(sample: EstimatedSOP, thresholds: Thresholds) -> bool:
    return sample.s1_hat > thresholds.t1 and abs(sample.s2_hat) < thresholds.t2


def step_x2(st: ControllerState, s2_hat: float, cfg: ActuatorConfig) -> ControllerState:
    """Drive X2 proportionally to the S2 error; the slope sign is measured once per cycle"""
    if abs(s2_hat) < st.thresholds.t2:
        return replace(st, trial_s2=None)
    if st.sign_x2 is None:
        if st.trial_s2 is None:
            stepped = wrap_voltage(st.v_x2 + cfg.sign_test_voltage, Actuator.X2, cfg)
            return replace(st, v_x2=stepped, trial_s2=s2_hat)
        sign = 1 if s2_hat - st.trial_s2 >= 0 else -1
        logger.debug(f"X2 slope sign measured: {sign:+d} (dS2={s2_hat - st.trial_s2:+.4f})")
        st = replace(st, sign_x2=sign, trial_s2=None)
    v_x2 = wrap_voltage(st.v_x2 + cfg.gain_x2 * (0.0 - s2_hat) * st.sign_x2, Actuator.X2, cfg)
    return replace(st, v_x2=v_x2)


def step_x1(st: ControllerState, s1_hat: float, cfg: ActuatorConfig) -> ControllerState:
    """Drive X1 towards S1=1, reversing direction when S1 falls below t3"""
    direction = st.dir_x1
    if st.last_x1_s1 is not None and s1_hat < st.thresholds.t3 and s1_hat < st.last_x1_s1:
        direction = -direction
    if s1_hat > st.thresholds.t1:
        return replace(st, dir_x1=direction, last_x1_s1=s1_hat)
    v_x1 = wrap_voltage(st.v_x1 + direction * cfg.gain_x1 * (1.0 - s1_hat), Actuator.X1, cfg)
    return replace(st, v_x1=v_x1, dir_x1=direction, last_x1_s1=s1_hat)


def run_feedback_cycle(plant: Plant, st: ControllerState, cfg: ActuatorConfig,
                       max_iters: int = 120, confirm_samples: int = 2) -> FeedbackResult:
    """Alternate X2 and X1 steps, one fresh sample each, until the SOP is near H.

    Converged means the last confirm_samples samples all satisfied
    s1_hat > t1 and |s2_hat| < t2. Raises NotConverged after max_iters samples.
    """
    state = replace(st, phase=ControlPhase.ADJUSTING_X2, sign_x2=None, trial_s2=None, last_x1_s1=None)
    result = FeedbackResult(state=state, iterations=0, converged=False)
    confirmed: List[EstimatedSOP] = []

    for iteration in range(1, max_iters + 1):
        sample = plant(state)
        result.samples.append(sample)
        sampled_at = state

        if within_thresholds(sample, state.thresholds):
            confirmed.append(sample)
            if len(confirmed) >= confirm_samples:
                state = replace(state, phase=ControlPhase.CONVERGED)
                action = 'converged'
            else:
                action = 'hold'
        else:
            confirmed = []
            if state.phase is ControlPhase.ADJUSTING_X2:
                state = step_x2(state, sample.s2_hat, cfg)
                action = 'x2'
            else:
                state = step_x1(state, sample.s1_hat, cfg)
                action = 'x1'

        result.trace.append(ControlStep(iteration, sample.s1_hat, sample.s2_hat,
                                        sampled_at.v_x1, sampled_at.v_x2, state.dir_x1, action))
        logger.debug(f"control sample {iteration}: S1={sample.s1_hat:.4f} S2={sample.s2_hat:+.4f} "
                     f"V(X1)={sampled_at.v_x1:.2f} V(X2)={sampled_at.v_x2:.2f} -> {action}")

        if state.phase is ControlPhase.CONVERGED:
            result.state = state
            result.iterations = iteration
            result.converged = True
            result.confirmed_samples = confirmed
            return result

        next_phase = (ControlPhase.ADJUSTING_X1 if state.phase is ControlPhase.ADJUSTING_X2
                      else ControlPhase.ADJUSTING_X2)
        state = replace(state, phase=next_phase)

    result.state = replace(state, phase=ControlPhase.IDLE)
    result.iterations = max_iters
    raise NotConverged(result)


class PolarizationController(ABC):
    """Abstract base class for SOP stabilization programs"""

    @abstractmethod
    def initial_state(self) -> ControllerState:
        """Controller state before the first cycle"""
        pass

    @abstractmethod
    def run_cycle(self, plant: Plant, state: ControllerState) -> FeedbackResult:
        """Run one control cycle against the plant"""
        pass

    @abstractmethod
    def actuator_rotation(self, state: ControllerState) -> PoincareRotation:
        """Rotation currently applied by the actuators"""
        pass


class ThresholdController(PolarizationController):
    """Two-actuator threshold program with X1 direction reversal"""

    def __init__(self, actuator: ActuatorConfig, thresholds: Thresholds,
                 settings: Optional[ControlSettings] = None):
        self.actuator = actuator
        self.thresholds = thresholds
        self.settings = settings or ControlSettings()

    def initial_state(self) -> ControllerState:
        return ControllerState.initial(self.actuator, self.thresholds)

    def run_cycle(self, plant: Plant, state: ControllerState) -> FeedbackResult:
        return run_feedback_cycle(plant, state, self.actuator,
                                  max_iters=self.settings.max_iters,
                                  confirm_samples=self.settings.confirm_samples)

    def actuator_rotation(self, state: ControllerState) -> PoincareRotation:
        return state.actuator_rotation(self.actuator)


class MonitorOnlyController(PolarizationController):
    """Samples the reference once per cycle and leaves the drive voltages alone (uncontrolled baseline)"""

    def __init__(self, actuator: ActuatorConfig, thresholds: Thresholds,
                 settings: Optional[ControlSettings] = None):
        self.actuator = actuator
        self.thresholds = thresholds

    def initial_state(self) -> ControllerState:
        return ControllerState.initial(self.actuator, self.thresholds)

    def run_cycle(self, plant: Plant, state: ControllerState) -> FeedbackResult:
        sample = plant(state)
        step = ControlStep(1, sample.s1_hat, sample.s2_hat, state.v_x1, state.v_x2, state.dir_x1, 'monitor')
        return FeedbackResult(state=state, iterations=1, converged=False, trace=[step], samples=[sample])

    def actuator_rotation(self, state: ControllerState) -> PoincareRotation:
        return state.actuator_rotation(self.actuator)


CONTROLLERS: Dict[str, Type[PolarizationController]] = {
    'threshold': ThresholdController,
    'none': MonitorOnlyController,
}


def get_controller(name: str, actuator: ActuatorConfig, thresholds: Thresholds,
                   settings: Optional[ControlSettings] = None) -> PolarizationController:
    """Get a controller implementation by name"""
    if name not in CONTROLLERS:
        available = list(CONTROLLERS.keys())
        raise ValueError(f"Controller '{name}' not available. Available controllers: {available}")
    return CONTROLLERS[name](actuator, thresholds, settings)
