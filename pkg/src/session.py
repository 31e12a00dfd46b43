import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np

from src.config import Config
from src.channel import ChannelState, channel_rotation, evolve_drift, launch_state, transmittance
from src.controller import ControllerState, FeedbackResult, NotConverged, get_controller
from src.detection import accumulate_window, click_probability_table, pattern_probabilities
from src.models.scenario import ScenarioBundle
from src.polarization import EstimatedSOP, ZeroWindow, estimate_stokes, rotate, rotate_many
from src.qkd_protocol import (
    STATE_LABELS, STATE_SOPS, DetectionBatch, EmptySift, PulseTrain, QubitBatch,
    SessionRecord, SiftOutcome, decode_patterns, parse_key_bases, sift_batch
)
from src.transport import (
    ClassicalMessage, ConnectionLost, Endpoint, FrameError, MessageKind,
    basis_reveal, control_ask, control_done, loopback_pair, parse_basis_reveal,
    parse_session_start, parse_sift_result, ref_start, session_end, session_start,
    sift_result, socket_pair
)

logger = logging.getLogger(__name__)

# Consecutive empty reference windows tolerated before the session gives up
MAX_ZERO_WINDOWS = 5
# Pulse indices per BasisReveal frame (8 bytes each, well under the frame limit)
REVEAL_CHUNK = 500_000


class ProtocolViolation(RuntimeError):
    """A station received a message it cannot accept in its current phase"""


class CommitmentMismatch(RuntimeError):
    """Alice's session key differs from the one Bob derived from the seed"""


@dataclass(frozen=True)
class TraceRow:
    time_s: int
    phase: str
    s1_hat: Optional[float]
    s2_hat: Optional[float]
    v_x1: float
    v_x2: float


@dataclass
class SessionOutcome:
    """Everything Bob recorded; partial when the session was aborted"""

    train_key: int
    records: List[SessionRecord] = field(default_factory=list)
    trace: List[TraceRow] = field(default_factory=list)
    cycles: List[FeedbackResult] = field(default_factory=list)
    failures: int = 0


class SessionAborted(RuntimeError):
    def __init__(self, message: str, outcome: SessionOutcome):
        super().__init__(message)
        self.outcome = outcome


def derive_session_streams(seed: int) -> Tuple[np.random.Generator, int]:
    """Bob's simulation stream and the pulse-train key, both from one seed"""
    bob_sequence, train_sequence = np.random.SeedSequence(seed).spawn(2)
    train_key = int(train_sequence.generate_state(1, dtype=np.uint64)[0])
    return np.random.default_rng(bob_sequence), train_key


def derive_train_key(seed: int) -> int:
    return derive_session_streams(seed)[1]


class AliceStation:
    """Sender: switches between random BB84 states and the H reference, answers sifting"""

    def __init__(self, endpoint: Endpoint, train: PulseTrain):
        self.endpoint = endpoint
        self.train = train
        self.sending = 'qkd'
        self.finished = False
        self.reference_requests = 0
        self.reveals_answered = 0

    def start(self):
        self.endpoint.send(session_start(self.train.key))

    def handle(self, m: ClassicalMessage):
        if m.kind is MessageKind.CONTROL_ASK:
            if self.sending != 'qkd':
                raise ProtocolViolation("ControlAsk received while already sending the reference")
            self.sending = 'reference'
            self.reference_requests += 1
            self.endpoint.send(ref_start())
        elif m.kind is MessageKind.CONTROL_DONE:
            if self.sending != 'reference':
                raise ProtocolViolation("ControlDone received outside a control cycle")
            self.sending = 'qkd'
        elif m.kind is MessageKind.BASIS_REVEAL:
            interval, pulse_index, bob_bases = parse_basis_reveal(m)
            states = self.train.states(pulse_index)
            match = (states >> 1) == bob_bases
            self.endpoint.send(sift_result(interval, match, (states & 1)[match]))
            self.reveals_answered += 1
        elif m.kind is MessageKind.SESSION_END:
            self.finished = True
        else:
            raise ProtocolViolation(f"Alice cannot handle {m.kind.name}")

    def pump(self):
        """Handle every message already waiting"""
        while True:
            m = self.endpoint.poll()
            if m is None:
                return
            self.handle(m)

    def serve(self, timeout: Optional[float] = None):
        """Announce the session and answer Bob until SessionEnd"""
        self.start()
        while not self.finished:
            self.handle(self.endpoint.receive(timeout))
        logger.info(f"Alice finished: {self.reference_requests} control cycles, "
                    f"{self.reveals_answered} basis reveals answered")


class BobStation:
    """Receiver: owns the channel, detectors and controller, and drives the session timeline"""

    def __init__(self, bundle: ScenarioBundle, rng: np.random.Generator, train_key: int,
                 endpoint: Endpoint, pump: Optional[Callable[[], None]] = None,
                 timeout: Optional[float] = None):
        self.bundle = bundle
        self.rng = rng
        self.train = PulseTrain(train_key)
        self.endpoint = endpoint
        self.pump = pump
        self.timeout = timeout

        self.controller = get_controller(bundle.control.controller, bundle.actuator,
                                         bundle.thresholds, bundle.control)
        self.controller_state: ControllerState = self.controller.initial_state()
        self.channel = ChannelState.initial(bundle.fiber, rng,
                                            self.controller.actuator_rotation(self.controller_state))
        self.transmittance = transmittance(bundle.fiber)
        self.qkd_source = bundle.qkd_source()
        self.reference_source = bundle.reference_source()
        self.pulses_per_second = int(round(bundle.source.rep_rate_hz))
        self.key_bases = parse_key_bases(bundle.protocol.key_bases)
        self.launched = np.array([launch_state(label, sop, bundle.fiber).as_array()
                                  for label, sop in zip(STATE_LABELS, STATE_SOPS)])
        self.reference = launch_state('H', STATE_SOPS[0], bundle.fiber)

        self.clock_s = 0
        self.qkd_pulses_sent = 0
        self.outcome = SessionOutcome(train_key=train_key)

    # classical channel

    def _notify(self, m: ClassicalMessage):
        self.endpoint.send(m)
        if self.pump is not None:
            self.pump()

    def _exchange(self, m: ClassicalMessage, expected: MessageKind) -> ClassicalMessage:
        self._notify(m)
        reply = self.endpoint.receive(self.timeout)
        if reply.kind is not expected:
            raise ProtocolViolation(f"Expected {expected.name} after {m.kind.name}, got {reply.kind.name}")
        return reply

    def _handshake(self):
        m = self.endpoint.receive(self.timeout)
        if m.kind is not MessageKind.SESSION_START:
            raise ProtocolViolation(f"Expected SESSION_START, got {m.kind.name}")
        announced = parse_session_start(m)
        if announced != self.train.key:
            raise CommitmentMismatch(f"Alice announced pulse-train key {announced:#x}, "
                                     f"expected {self.train.key:#x}; are both sides using the same seed?")

    # time

    def _advance(self):
        self.channel = evolve_drift(self.channel, 1.0, self.rng)
        self.clock_s += 1

    def _trace(self, phase: str, state: ControllerState, sample: Optional[EstimatedSOP] = None):
        self.outcome.trace.append(TraceRow(
            time_s=self.clock_s,
            phase=phase,
            s1_hat=None if sample is None else sample.s1_hat,
            s2_hat=None if sample is None else sample.s2_hat,
            v_x1=state.v_x1,
            v_x2=state.v_x2,
        ))

    # control phase

    def sample_reference(self, state: ControllerState) -> EstimatedSOP:
        """One 1 s window of H reference pulses through the fiber and the actuators at state"""
        det = self.bundle.detector
        for _ in range(MAX_ZERO_WINDOWS):
            rotation = channel_rotation(self.channel, self.controller.actuator_rotation(state))
            arriving = rotate(self.reference, rotation)
            counts = accumulate_window(arriving, self.pulses_per_second, self.reference_source,
                                       self.transmittance, det, self.rng)
            try:
                sample = estimate_stokes(counts)
            except ZeroWindow as e:
                logger.warning(f"t={self.clock_s}s: {e}; sampling again")
                self._trace('control', state)
                self._advance()
                last_error = e
                continue
            self._trace('control', state, sample)
            self._advance()
            return sample
        raise last_error

    def _control_cycle(self, interval_index: int) -> Tuple[FeedbackResult, int]:
        self._exchange(control_ask(), MessageKind.REF_START)
        started = self.clock_s
        try:
            result = self.controller.run_cycle(self.sample_reference, self.controller_state)
        except NotConverged as e:
            result = e.result
            self.outcome.failures += 1
            logger.warning(f"Interval {interval_index}: {e} (failure {self.outcome.failures})")
        self.controller_state = result.state
        self.outcome.cycles.append(result)
        self._notify(control_done(result.converged, result.iterations))
        return result, self.clock_s - started

    # key distribution phase

    def _qkd_second(self, arriving: np.ndarray) -> DetectionBatch:
        """Clicked gates of one second, drawn by thinning instead of pulse by pulse"""
        probabilities = click_probability_table(arriving, self.qkd_source, self.transmittance,
                                                self.bundle.detector)
        patterns = pattern_probabilities(probabilities)
        p_any = 1.0 - patterns[:, 0]
        p_max = float(p_any.max())
        n = self.pulses_per_second
        base = self.qkd_pulses_sent
        self.qkd_pulses_sent += n
        if p_max <= 0.0:
            return DetectionBatch.empty()

        candidates = int(self.rng.binomial(n, p_max))
        offsets = np.sort(self.rng.choice(n, size=candidates, replace=False))
        pulse_index = base + offsets.astype(np.int64)
        states = self.train.states(pulse_index).astype(np.intp)
        keep = self.rng.random(candidates) < p_any[states] / p_max
        pulse_index, states = pulse_index[keep], states[keep]

        conditional = np.divide(patterns[:, 1:], p_any[:, None],
                                out=np.zeros_like(patterns[:, 1:]), where=p_any[:, None] > 0)
        cdf = np.cumsum(conditional, axis=1)
        draws = self.rng.random(len(states))
        picks = np.minimum((draws[:, None] > cdf[states]).sum(axis=1), 14)
        return decode_patterns(pulse_index, picks + 1)

    def _qkd_cycle(self, seconds: int) -> DetectionBatch:
        actuator = self.controller.actuator_rotation(self.controller_state)
        batches = []
        for _ in range(seconds):
            arriving = rotate_many(self.launched, channel_rotation(self.channel, actuator))
            batches.append(self._qkd_second(arriving))
            self._trace('qkd', self.controller_state)
            self._advance()
        return DetectionBatch.concatenate(batches)

    def _sift_interval(self, interval_index: int, detections: DetectionBatch) -> SiftOutcome:
        singles = detections.singles()
        matches, alice_bits = [], []
        for start in range(0, max(len(singles), 1), REVEAL_CHUNK):
            chunk = slice(start, start + REVEAL_CHUNK)
            reply = self._exchange(basis_reveal(interval_index, singles.pulse_index[chunk], singles.basis[chunk]),
                                   MessageKind.SIFT_RESULT)
            _, match, bits = parse_sift_result(reply)
            matches.append(match)
            alice_bits.append(bits)
        match = np.concatenate(matches)
        alice_basis = np.where(match, singles.basis, 1 - singles.basis).astype(np.int8)
        alice_bit = np.zeros(len(singles), dtype=np.int8)
        alice_bit[match] = np.concatenate(alice_bits)
        alice = QubitBatch(singles.pulse_index, alice_basis, alice_bit)
        try:
            outcome = sift_batch(alice, singles, self.key_bases)
        except EmptySift as e:
            logger.warning(f"Interval {interval_index}: no sifted bits, QBER undefined")
            outcome = e.outcome
        outcome.discarded_double = int(np.count_nonzero(detections.double_click))
        return outcome

    # timeline

    def intervals(self, duration_s: float) -> Iterator[SessionRecord]:
        """Handshake, then [control cycle, QKD cycle] until duration_s seconds of key distribution"""
        total_qkd = int(math.ceil(duration_s))
        interval_s = max(1, int(round(self.bundle.fiber.control_interval_s)))
        count = int(math.ceil(total_qkd / interval_s))
        threshold = self.bundle.protocol.qber_threshold
        qr_name = 'QR' if 'QR' not in self.bundle.protocol.key_bases else None

        self._handshake()
        logger.info(f"Session started: {count} intervals of up to {interval_s} s")
        for index in range(count):
            start = self.clock_s
            cycle, control_seconds = self._control_cycle(index)
            qkd_seconds = min(interval_s, total_qkd - index * interval_s)
            detections = self._qkd_cycle(qkd_seconds)
            sifted = self._sift_interval(index, detections)
            qr_sifted, qr_errors = sifted.per_basis.get(qr_name, (0, 0)) if qr_name else (0, 0)
            record = SessionRecord(
                interval_index=index,
                start_s=start,
                control_seconds=control_seconds,
                qkd_seconds=qkd_seconds,
                detected=len(detections),
                sifted_bits=sifted.sifted_bits,
                errors=sifted.errors,
                qber=sifted.qber,
                qr_sifted=qr_sifted,
                qr_errors=qr_errors,
                double_clicks=sifted.discarded_double,
                converged=cycle.converged,
                control_samples=cycle.iterations,
                flagged=sifted.qber is not None and sifted.qber > threshold,
                s1_s2_trace=list(cycle.samples),
            )
            if record.flagged:
                logger.warning(f"Interval {index}: QBER {record.qber:.4f} above threshold {threshold}")
            qber_text = 'n/a' if record.qber is None else f"{record.qber:.4f}"
            logger.info(f"Interval {index}: control {control_seconds} s (converged={cycle.converged}), "
                        f"qkd {qkd_seconds} s, detected {record.detected}, "
                        f"sifted {record.sifted_bits}, QBER {qber_text}")
            self.outcome.records.append(record)
            yield record
        self._notify(session_end(count))

    def run(self, duration_s: float) -> SessionOutcome:
        try:
            for _ in self.intervals(duration_s):
                pass
        except (ConnectionLost, FrameError, ProtocolViolation, CommitmentMismatch, ZeroWindow) as e:
            logger.error(f"Session aborted after {len(self.outcome.records)} intervals: {e}")
            raise SessionAborted(str(e), self.outcome) from e
        return self.outcome


def _serve_alice(alice: AliceStation, timeout: Optional[float]):
    try:
        alice.serve(timeout)
    except (ConnectionLost, FrameError, ProtocolViolation) as e:
        logger.error(f"Alice stopped: {e}")


def run_session(bundle: ScenarioBundle, seed: int, duration_s: float,
                transport: str = 'loopback', timeout: Optional[float] = None) -> SessionOutcome:
    """Run Alice and Bob in this process over a loopback or local socket connection

    Socket sessions fall back to Config.SOCKET_TIMEOUT when no timeout is given.
    """
    rng, train_key = derive_session_streams(seed)
    if transport == 'loopback':
        alice_end, bob_end = loopback_pair()
        alice = AliceStation(alice_end, PulseTrain(train_key))
        bob = BobStation(bundle, rng, train_key, bob_end, pump=alice.pump, timeout=timeout)
        alice.start()
        try:
            return bob.run(duration_s)
        finally:
            bob_end.close()
            alice_end.close()
    if transport == 'socket':
        if timeout is None:
            timeout = Config.SOCKET_TIMEOUT
        alice_end, bob_end = socket_pair()
        alice = AliceStation(alice_end, PulseTrain(train_key))
        worker = threading.Thread(target=_serve_alice, args=(alice, timeout), daemon=True)
        worker.start()
        bob = BobStation(bundle, rng, train_key, bob_end, timeout=timeout)
        try:
            return bob.run(duration_s)
        finally:
            bob_end.close()
            worker.join(timeout=5)
            alice_end.close()
    raise ValueError(f"Unknown transport '{transport}', expected 'loopback' or 'socket'")
