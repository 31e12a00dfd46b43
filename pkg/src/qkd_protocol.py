import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.detection import D_H, D_Q, D_R, D_V, PulseOutcome
from src.polarization import H, Q, R, V, EstimatedSOP, StokesVector

logger = logging.getLogger(__name__)


class Basis(IntEnum):
    HV = 0
    QR = 1


# State index = 2 * basis + bit, in the order H, V, Q, R
STATE_SOPS: Tuple[StokesVector, ...] = (H, V, Q, R)
STATE_LABELS = ('H', 'V', 'Q', 'R')

# Detector -> (basis, bit) it decodes
DETECTOR_DECODING: Dict[int, Tuple[Basis, int]] = {
    D_V: (Basis.HV, 1),
    D_H: (Basis.HV, 0),
    D_Q: (Basis.QR, 0),
    D_R: (Basis.QR, 1),
}

NO_BASIS = -1

_SPLITMIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SPLITMIX_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SPLITMIX_M2 = np.uint64(0x94D049BB133111EB)


class EmptySift(RuntimeError):
    """Raised when no pulse survives sifting; the interval's QBER is undefined"""

    def __init__(self, outcome: 'SiftOutcome'):
        super().__init__("No sifted pairs in this interval")
        self.outcome = outcome


@dataclass(frozen=True)
class QubitRecord:
    """What Alice sent in one pulse"""

    pulse_index: int
    basis: Basis
    bit: int

    @property
    def state_index(self) -> int:
        return 2 * int(self.basis) + self.bit

    @property
    def label(self) -> str:
        return STATE_LABELS[self.state_index]

    def sop(self) -> StokesVector:
        return STATE_SOPS[self.state_index]


@dataclass(frozen=True)
class DetectionRecord:
    """What Bob decoded from one clicked gate; basis and bit are None for ambiguous multi-basis clicks"""

    pulse_index: int
    decoded_basis: Optional[Basis]
    bit: Optional[int]
    double_click: bool = False


@dataclass
class QubitBatch:
    """Columnar form of many QubitRecords"""

    pulse_index: np.ndarray
    basis: np.ndarray
    bit: np.ndarray

    @classmethod
    def from_records(cls, records: Iterable[QubitRecord]) -> 'QubitBatch':
        records = list(records)
        return cls(
            pulse_index=np.array([r.pulse_index for r in records], dtype=np.int64),
            basis=np.array([int(r.basis) for r in records], dtype=np.int8),
            bit=np.array([r.bit for r in records], dtype=np.int8),
        )

    @classmethod
    def from_states(cls, pulse_index: np.ndarray, states: np.ndarray) -> 'QubitBatch':
        states = np.asarray(states)
        return cls(np.asarray(pulse_index, dtype=np.int64),
                   (states >> 1).astype(np.int8), (states & 1).astype(np.int8))

    def __len__(self) -> int:
        return len(self.pulse_index)


@dataclass
class DetectionBatch:
    """Columnar form of many DetectionRecords (basis/bit are -1 where undefined)"""

    pulse_index: np.ndarray
    basis: np.ndarray
    bit: np.ndarray
    double_click: np.ndarray

    @classmethod
    def empty(cls) -> 'DetectionBatch':
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int8),
                   np.zeros(0, dtype=np.int8), np.zeros(0, dtype=bool))

    @classmethod
    def from_records(cls, records: Iterable[DetectionRecord]) -> 'DetectionBatch':
        records = list(records)
        return cls(
            pulse_index=np.array([r.pulse_index for r in records], dtype=np.int64),
            basis=np.array([NO_BASIS if r.decoded_basis is None else int(r.decoded_basis)
                            for r in records], dtype=np.int8),
            bit=np.array([NO_BASIS if r.bit is None else r.bit for r in records], dtype=np.int8),
            double_click=np.array([r.double_click for r in records], dtype=bool),
        )

    @classmethod
    def concatenate(cls, batches: Sequence['DetectionBatch']) -> 'DetectionBatch':
        if not batches:
            return cls.empty()
        return cls(
            pulse_index=np.concatenate([b.pulse_index for b in batches]),
            basis=np.concatenate([b.basis for b in batches]),
            bit=np.concatenate([b.bit for b in batches]),
            double_click=np.concatenate([b.double_click for b in batches]),
        )

    def singles(self) -> 'DetectionBatch':
        keep = ~self.double_click
        return DetectionBatch(self.pulse_index[keep], self.basis[keep], self.bit[keep], self.double_click[keep])

    def __len__(self) -> int:
        return len(self.pulse_index)


@dataclass
class SiftOutcome:
    """Key pairs kept by sifting plus per-basis tallies"""

    pulse_index: np.ndarray
    alice_bits: np.ndarray
    bob_bits: np.ndarray
    per_basis: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    discarded_double: int = 0

    @property
    def sifted_bits(self) -> int:
        return len(self.pulse_index)

    @property
    def errors(self) -> int:
        return int(np.count_nonzero(self.alice_bits != self.bob_bits))

    @property
    def qber(self) -> Optional[float]:
        if self.sifted_bits == 0:
            return None
        return self.errors / self.sifted_bits

    def pairs(self) -> List[Tuple[int, int, int]]:
        """(pulse_index, alice_bit, bob_bit) for every kept pair"""
        return list(zip(self.pulse_index.tolist(), self.alice_bits.tolist(), self.bob_bits.tolist()))


@dataclass
class SessionRecord:
    """Results of one interval: the control cycle that preceded it and its QKD cycle"""

    interval_index: int
    start_s: int
    control_seconds: int
    qkd_seconds: int
    detected: int
    sifted_bits: int
    errors: int
    qber: Optional[float]
    qr_sifted: int = 0
    qr_errors: int = 0
    double_clicks: int = 0
    converged: bool = True
    control_samples: int = 0
    flagged: bool = False
    s1_s2_trace: List[EstimatedSOP] = field(default_factory=list)


def encode_state(basis: Basis, bit: int) -> StokesVector:
    if bit not in (0, 1):
        raise ValueError(f"bit must be 0 or 1, got {bit}")
    return STATE_SOPS[2 * int(basis) + bit]


def alice_encode(rng: np.random.Generator, pulse_index: int = 0) -> Tuple[QubitRecord, StokesVector]:
    """Uniform basis and bit, and the SOP they select"""
    basis = Basis(int(rng.integers(2)))
    bit = int(rng.integers(2))
    record = QubitRecord(pulse_index, basis, bit)
    return record, record.sop()


def splitmix64(values: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 finalizer over uint64 values (wrapping arithmetic)"""
    values = np.asarray(values, dtype=np.uint64)
    with np.errstate(over='ignore'):
        z = values + _SPLITMIX_GAMMA
        z = (z ^ (z >> np.uint64(30))) * _SPLITMIX_M1
        z = (z ^ (z >> np.uint64(27))) * _SPLITMIX_M2
        return z ^ (z >> np.uint64(31))


class PulseTrain:
    """Alice's random state sequence as a pure function of (key, pulse index).

    Both stations rebuild the same train from the session key, so pulses never
    travel over the classical channel.
    """

    def __init__(self, key: int):
        if not 0 <= key < 2 ** 64:
            raise ValueError(f"pulse train key must be a 64-bit unsigned value, got {key}")
        self.key = int(key)
        self._mixed_key = splitmix64(np.array([self.key], dtype=np.uint64))[0]

    def states(self, pulse_index) -> np.ndarray:
        """State index (0..3 for H, V, Q, R) of each pulse"""
        indices = np.asarray(pulse_index, dtype=np.uint64)
        hashed = splitmix64(indices ^ self._mixed_key)
        return (hashed >> np.uint64(62)).astype(np.int8)

    def batch(self, pulse_index) -> QubitBatch:
        indices = np.asarray(pulse_index, dtype=np.int64)
        return QubitBatch.from_states(indices, self.states(indices))

    def record(self, pulse_index: int) -> QubitRecord:
        state = int(self.states([pulse_index])[0])
        return QubitRecord(int(pulse_index), Basis(state >> 1), state & 1)


def bob_decode(outcome: PulseOutcome, pulse_index: int = 0) -> Optional[DetectionRecord]:
    """Decode one gate; more than one click is flagged double_click"""
    fired = [index for index, hit in enumerate(outcome.clicked) if hit]
    if not fired:
        return None
    if len(fired) == 1:
        basis, bit = DETECTOR_DECODING[fired[0]]
        return DetectionRecord(pulse_index, basis, bit, double_click=False)
    bases = {DETECTOR_DECODING[index][0] for index in fired}
    basis = bases.pop() if len(bases) == 1 else None
    return DetectionRecord(pulse_index, basis, None, double_click=True)


def _pattern_tables() -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    basis = np.full(16, NO_BASIS, dtype=np.int8)
    bit = np.full(16, NO_BASIS, dtype=np.int8)
    double = np.zeros(16, dtype=bool)
    for pattern in range(1, 16):
        record = bob_decode(PulseOutcome.from_pattern(pattern))
        if record.decoded_basis is not None:
            basis[pattern] = int(record.decoded_basis)
        if record.bit is not None:
            bit[pattern] = record.bit
        double[pattern] = record.double_click
    return basis, bit, double


PATTERN_BASIS, PATTERN_BIT, PATTERN_DOUBLE = _pattern_tables()


def decode_patterns(pulse_index: np.ndarray, patterns: np.ndarray) -> DetectionBatch:
    """Vectorized bob_decode over click-pattern bitmasks (all nonzero)"""
    patterns = np.asarray(patterns, dtype=np.int64)
    return DetectionBatch(np.asarray(pulse_index, dtype=np.int64), PATTERN_BASIS[patterns],
                          PATTERN_BIT[patterns], PATTERN_DOUBLE[patterns])


def sift_batch(alice: QubitBatch, bob: DetectionBatch,
               key_bases: Optional[Sequence[Basis]] = None) -> SiftOutcome:
    """Keep single-click detections whose basis matches Alice's.

    Only matches in key_bases (all bases when None) form the key; matches in
    the other bases are tallied in per_basis. Raises EmptySift when the key is empty.
    """
    if key_bases is None:
        key_bases = tuple(Basis)
    order = np.argsort(alice.pulse_index, kind='stable')
    sorted_index = alice.pulse_index[order]
    position = np.searchsorted(sorted_index, bob.pulse_index)
    position = np.minimum(position, max(len(sorted_index) - 1, 0))
    if len(bob) and (len(sorted_index) == 0 or np.any(sorted_index[position] != bob.pulse_index)):
        raise ValueError("detection records reference pulses Alice did not send")
    alice_rows = order[position] if len(bob) else np.zeros(0, dtype=np.int64)

    single = ~bob.double_click
    matched = single & (alice.basis[alice_rows] == bob.basis)
    per_basis: Dict[str, Tuple[int, int]] = {}
    in_key = np.zeros(len(bob), dtype=bool)
    for basis in Basis:
        selected = matched & (bob.basis == int(basis))
        mismatches = int(np.count_nonzero(alice.bit[alice_rows][selected] != bob.bit[selected]))
        per_basis[basis.name] = (int(np.count_nonzero(selected)), mismatches)
        if basis in key_bases:
            in_key |= selected

    outcome = SiftOutcome(
        pulse_index=bob.pulse_index[in_key],
        alice_bits=alice.bit[alice_rows][in_key],
        bob_bits=bob.bit[in_key],
        per_basis=per_basis,
        discarded_double=int(np.count_nonzero(bob.double_click)),
    )
    if outcome.sifted_bits == 0:
        raise EmptySift(outcome)
    return outcome


def sift(alice: Sequence[QubitRecord], bob: Sequence[DetectionRecord],
         key_bases: Optional[Sequence[Basis]] = None) -> Tuple[List[Tuple[int, int, int]], float]:
    """Sift record lists; returns (pulse_index, alice_bit, bob_bit) pairs and the QBER"""
    outcome = sift_batch(QubitBatch.from_records(alice), DetectionBatch.from_records(bob), key_bases)
    return outcome.pairs(), outcome.qber


def parse_key_bases(names: Sequence[str]) -> Tuple[Basis, ...]:
    return tuple(Basis[name] for name in names)
