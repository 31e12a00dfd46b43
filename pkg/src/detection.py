import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from src.models.scenario import DetectorConfig, SourceConfig
from src.polarization import ClickCounts, StokesVector

logger = logging.getLogger(__name__)

# Detector index -> polarization role (D0 sees V, D1 H, D2 Q, D3 R)
DETECTOR_ROLES = ('V', 'H', 'Q', 'R')
D_V, D_H, D_Q, D_R = 0, 1, 2, 3

# Chunk size for the per-pulse Bernoulli path
PULSE_CHUNK = 250_000


@dataclass(frozen=True)
class PulseOutcome:
    """Which of D0..D3 clicked in one gate"""

    clicked: Tuple[bool, bool, bool, bool]

    @property
    def pattern(self) -> int:
        """Bitmask with bit d set when detector d clicked"""
        return sum(1 << index for index, hit in enumerate(self.clicked) if hit)

    @classmethod
    def from_pattern(cls, pattern: int) -> 'PulseOutcome':
        return cls(tuple(bool(pattern >> index & 1) for index in range(4)))

    def any(self) -> bool:
        return any(self.clicked)


def projection_probabilities(stokes: np.ndarray, pbs_extinction: float) -> np.ndarray:
    """Probability that a photon in each state exits towards each detector's PBS port.

    stokes is (n, 3); the result is (n, 4) in detector order D0..D3.
    """
    stokes = np.atleast_2d(np.asarray(stokes, dtype=float))
    x = pbs_extinction
    s1 = stokes[:, 0]
    s2 = stokes[:, 1]
    p_h = (1 - x) * (1 + s1) / 2 + x * (1 - s1) / 2
    p_v = (1 - x) * (1 - s1) / 2 + x * (1 + s1) / 2
    p_q = (1 - x) * (1 + s2) / 2 + x * (1 - s2) / 2
    p_r = (1 - x) * (1 - s2) / 2 + x * (1 + s2) / 2
    return np.clip(np.stack([p_v, p_h, p_q, p_r], axis=1), 0.0, 1.0)


def arm_fractions(det: DetectorConfig) -> np.ndarray:
    """Share of photons reaching the HV (D0, D1) and QR (D2, D3) arms"""
    decode = 1.0 - det.monitor_split
    return np.array([decode, decode, det.monitor_split, det.monitor_split])


def click_probability_table(stokes: np.ndarray, src: SourceConfig, t: float,
                            det: DetectorConfig) -> np.ndarray:
    """Per-gate click probability of every detector for each of n arriving states"""
    projections = projection_probabilities(stokes, det.pbs_extinction)
    mean_detected = src.mean_photons_per_pulse * t * det.efficiency * arm_fractions(det) * projections
    dark = np.asarray(det.dark_prob_per_gate, dtype=float)
    return 1.0 - (1.0 - dark) * np.exp(-mean_detected)


def click_probabilities(s: StokesVector, src: SourceConfig, t: float, det: DetectorConfig) -> np.ndarray:
    """Click probabilities of D0..D3 for one arriving state"""
    return click_probability_table(s.as_array()[None, :], src, t, det)[0]


def sample_pulse(probabilities: Sequence[float], rng: np.random.Generator) -> PulseOutcome:
    """Independent Bernoulli draw per detector"""
    draws = rng.random(4) < np.asarray(probabilities, dtype=float)
    return PulseOutcome(tuple(bool(hit) for hit in draws))


def counts_from_totals(totals: np.ndarray, n_pulses: int) -> ClickCounts:
    return ClickCounts(i_h=int(totals[D_H]), i_v=int(totals[D_V]),
                       i_q=int(totals[D_Q]), i_r=int(totals[D_R]), window_pulses=int(n_pulses))


def accumulate_window(s: StokesVector, n_pulses: int, src: SourceConfig, t: float,
                      det: DetectorConfig, rng: np.random.Generator,
                      method: str = 'binomial') -> ClickCounts:
    """Clicks of each detector summed over n_pulses gates.

    method='binomial' draws one binomial per detector; method='pulses' draws
    every gate individually. Both have the same distribution.
    """
    if n_pulses <= 0:
        raise ValueError(f"n_pulses must be positive, got {n_pulses}")
    probabilities = click_probabilities(s, src, t, det)
    if method == 'binomial':
        totals = rng.binomial(n_pulses, probabilities)
    elif method == 'pulses':
        totals = np.zeros(4, dtype=np.int64)
        remaining = n_pulses
        while remaining > 0:
            chunk = min(remaining, PULSE_CHUNK)
            totals += np.count_nonzero(rng.random((chunk, 4)) < probabilities, axis=0)
            remaining -= chunk
    else:
        raise ValueError(f"Unknown accumulation method: {method}")
    return counts_from_totals(totals, n_pulses)


def expected_window(s: StokesVector, n_pulses: int, src: SourceConfig, t: float,
                    det: DetectorConfig) -> np.ndarray:
    """Expected clicks per detector over a window, D0..D3"""
    return n_pulses * click_probabilities(s, src, t, det)


def pattern_probabilities(probabilities: np.ndarray) -> np.ndarray:
    """Probability of each of the 16 click patterns (bitmask index) for independent detectors.

    Accepts (4,) or (n, 4); returns (16,) or (n, 16).
    """
    probabilities = np.asarray(probabilities, dtype=float)
    single = probabilities.ndim == 1
    probabilities = np.atleast_2d(probabilities)
    patterns = np.arange(16)
    bits = (patterns[:, None] >> np.arange(4)[None, :]) & 1
    per_detector = np.where(bits[None, :, :] == 1, probabilities[:, None, :], 1.0 - probabilities[:, None, :])
    result = per_detector.prod(axis=2)
    return result[0] if single else result
