import math
from typing import Dict, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Drift calibration: median escape from the T1=0.96 cap is about 2.5 minutes at 50 km
DRIFT_STD_50KM = 0.0254
DRIFT_REFERENCE_KM = 50.0

STATE_NAMES = ('H', 'V', 'Q', 'R')
BASIS_NAMES = ('HV', 'QR')
CONTROLLER_NAMES = ('threshold', 'none')


def default_drift_std(length_km: float) -> float:
    """Drift angle std (rad per sqrt second) scaled with sqrt(length)"""
    return DRIFT_STD_50KM * math.sqrt(max(length_km, 0.0) / DRIFT_REFERENCE_KM)


class FrozenModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')


class FiberScenario(FrozenModel):
    """Quantum channel: loss budget, drift process and per-phase source strengths"""

    length_km: float = Field(50.0, ge=0)
    loss_db_per_km: float = Field(0.2, ge=0)
    element_loss_db: float = Field(2.0, ge=0)
    drift_angle_std: Optional[float] = Field(None, ge=0)
    control_interval_s: float = Field(282.0, gt=0)
    source_mean_photons_qkd: float = Field(0.1, ge=0)
    source_mean_photons_ref: float = Field(0.5, ge=0)
    laser_offset_angle: float = 0.0
    laser_offset_states: Tuple[str, ...] = ('V',)
    initial_birefringence: Literal['random', 'aligned'] = 'random'

    @model_validator(mode='before')
    @classmethod
    def _fill_drift(cls, data):
        if isinstance(data, dict) and data.get('drift_angle_std') is None:
            data = dict(data)
            data['drift_angle_std'] = default_drift_std(float(data.get('length_km', 50.0)))
        return data

    @field_validator('laser_offset_states')
    @classmethod
    def _known_states(cls, states):
        unknown = [state for state in states if state not in STATE_NAMES]
        if unknown:
            raise ValueError(f"unknown states {unknown}, expected a subset of {STATE_NAMES}")
        return tuple(states)


class SourceConfig(FrozenModel):
    """Weak-coherent pulse source"""

    mean_photons_per_pulse: float = Field(0.1, ge=0)
    rep_rate_hz: float = Field(1e6, gt=0)


class DetectorConfig(FrozenModel):
    """Four gated detectors behind the 50/50 splitter and two polarizing beam splitters"""

    efficiency: float = Field(0.20, ge=0, le=1)
    # D0 (V), D1 (H), D2 (Q), D3 (R)
    dark_prob_per_gate: Tuple[float, float, float, float] = (4e-7, 8e-7, 4e-7, 8e-7)
    pbs_extinction: float = Field(0.005, ge=0, le=1)
    monitor_split: float = Field(0.5, ge=0, le=1)

    @field_validator('dark_prob_per_gate')
    @classmethod
    def _probabilities(cls, values):
        if any(value < 0 or value > 1 for value in values):
            raise ValueError(f"dark probabilities must lie in [0, 1], got {values}")
        return tuple(values)


class ActuatorConfig(FrozenModel):
    """Piezo squeezer drivers X1 (QR axis) and X2 (HV axis)"""

    v_2pi_x1: float = Field(52.2, gt=0)
    v_2pi_x2: float = Field(49.0, gt=0)
    v_min: float = 0.0
    v_max: float = 150.0
    gain_x1: float = Field(4.0, gt=0)
    gain_x2: float = Field(4.0, gt=0)
    v_init_x1: float = 75.0
    v_init_x2: float = 75.0
    sign_test_voltage: float = Field(1.0, gt=0)

    @model_validator(mode='after')
    def _ranges(self):
        if self.v_min >= self.v_max:
            raise ValueError(f"v_min ({self.v_min}) must be below v_max ({self.v_max})")
        if self.v_max - self.v_min < max(self.v_2pi_x1, self.v_2pi_x2):
            raise ValueError("driver range must span at least one 2π voltage")
        for name in ('v_init_x1', 'v_init_x2'):
            value = getattr(self, name)
            if not self.v_min <= value <= self.v_max:
                raise ValueError(f"{name}={value} outside [{self.v_min}, {self.v_max}]")
        return self


class Thresholds(FrozenModel):
    """S1/S2 thresholds: S1 > t1 and |S2| < t2 mean 'approximately H'; t3 triggers reversal"""

    t1: float = Field(0.96, ge=-1, le=1)
    t2: float = Field(0.05, ge=0, le=1)
    t3: float = Field(0.94, ge=-1, le=1)

    @model_validator(mode='after')
    def _ordering(self):
        if not self.t1 > self.t3:
            raise ValueError(f"t1 ({self.t1}) must exceed t3 ({self.t3})")
        return self


class ControlSettings(FrozenModel):
    max_iters: int = Field(120, gt=0)
    confirm_samples: int = Field(2, ge=1)
    controller: str = 'threshold'

    @field_validator('controller')
    @classmethod
    def _known_controller(cls, name):
        if name not in CONTROLLER_NAMES:
            raise ValueError(f"unknown controller '{name}', expected one of {CONTROLLER_NAMES}")
        return name


class ProtocolSettings(FrozenModel):
    key_bases: Tuple[str, ...] = ('HV',)
    qber_threshold: float = Field(0.11, ge=0, le=0.5)

    @field_validator('key_bases')
    @classmethod
    def _known_bases(cls, bases):
        if not bases or any(basis not in BASIS_NAMES for basis in bases):
            raise ValueError(f"key_bases must be a non-empty subset of {BASIS_NAMES}, got {bases}")
        return tuple(bases)


class ScenarioBundle(FrozenModel):
    """Fully resolved scenario"""

    name: str = 'custom'
    fiber: FiberScenario = FiberScenario()
    source: SourceConfig = SourceConfig()
    detector: DetectorConfig = DetectorConfig()
    actuator: ActuatorConfig = ActuatorConfig()
    thresholds: Thresholds = Thresholds()
    control: ControlSettings = ControlSettings()
    protocol: ProtocolSettings = ProtocolSettings()

    def qkd_source(self) -> SourceConfig:
        return SourceConfig(mean_photons_per_pulse=self.fiber.source_mean_photons_qkd,
                            rep_rate_hz=self.source.rep_rate_hz)

    def reference_source(self) -> SourceConfig:
        return SourceConfig(mean_photons_per_pulse=self.fiber.source_mean_photons_ref,
                            rep_rate_hz=self.source.rep_rate_hz)

    def resolved(self) -> Dict:
        """JSON-ready dump of every section"""
        return self.model_dump(mode='json')


class RunConfig(FrozenModel):
    """One invocation of the simulator"""

    scenario: str = 'fiber50'
    seed: int = Field(1, ge=0, lt=2 ** 64)
    duration_s: float = Field(3600.0, gt=0)
    mode: Literal['single', 'alice', 'bob'] = 'single'
    peer_address: Optional[str] = None
    output_dir: str = 'runs'
    overrides: Tuple[str, ...] = ()

    @model_validator(mode='after')
    def _peer_required(self):
        if self.mode in ('alice', 'bob') and not self.peer_address:
            raise ValueError(f"mode '{self.mode}' requires a peer address (host:port)")
        return self
