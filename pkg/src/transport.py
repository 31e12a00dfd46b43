import logging
import queue
import select
import socket
import struct
import threading
import time
import zlib
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from typing import Deque, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b'PQKD'
VERSION = 1
MAX_PAYLOAD = 1 << 24
DEFAULT_PORT = 7117

# magic[4] | version[1] | kind[1] | length[4], big-endian
HEADER = struct.Struct('>4sBBI')
CRC = struct.Struct('>I')
FRAME_OVERHEAD = HEADER.size + CRC.size

CONTROL_DONE = struct.Struct('>BI')
INTERVAL_COUNT = struct.Struct('>II')
SESSION_START = struct.Struct('>Q')
SESSION_END = struct.Struct('>I')

RECV_SIZE = 65536


class MessageKind(IntEnum):
    CONTROL_ASK = 1
    REF_START = 2
    CONTROL_DONE = 3
    BASIS_REVEAL = 4
    SIFT_RESULT = 5
    SESSION_END = 6
    SESSION_START = 7


class FrameError(ValueError):
    """Base class for wire format violations"""


class BadMagic(FrameError):
    pass


class UnsupportedVersion(FrameError):
    pass


class UnknownKind(FrameError):
    pass


class CrcMismatch(FrameError):
    pass


class Truncated(FrameError):
    """Not a complete frame yet; wait for more bytes"""


class PayloadTooLarge(FrameError):
    pass


class ConnectionLost(RuntimeError):
    """The peer closed the connection or the link failed"""


@dataclass(frozen=True)
class ClassicalMessage:
    kind: MessageKind
    payload: bytes = b''


def encode(m: ClassicalMessage) -> bytes:
    """Serialize one message as a frame"""
    if len(m.payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"{m.kind.name} payload of {len(m.payload)} bytes exceeds {MAX_PAYLOAD}")
    header = HEADER.pack(MAGIC, VERSION, int(m.kind), len(m.payload))
    crc = zlib.crc32(header[4 + 1:] + m.payload)
    return header + m.payload + CRC.pack(crc)


def decode_frame(data: bytes) -> Tuple[ClassicalMessage, int]:
    """Decode the frame at the start of data; returns the message and bytes consumed"""
    data = bytes(data)
    prefix = data[:len(MAGIC)]
    if prefix != MAGIC[:len(prefix)]:
        raise BadMagic(f"Expected magic {MAGIC!r}, got {prefix!r}")
    if len(data) < HEADER.size:
        raise Truncated(f"Have {len(data)} bytes, header needs {HEADER.size}")
    _, version, kind, length = HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersion(f"Frame version {version}, expected {VERSION}")
    if length > MAX_PAYLOAD:
        raise PayloadTooLarge(f"Frame announces {length} payload bytes, limit is {MAX_PAYLOAD}")
    total = FRAME_OVERHEAD + length
    if len(data) < total:
        raise Truncated(f"Have {len(data)} bytes, frame needs {total}")
    payload = data[HEADER.size:HEADER.size + length]
    (crc,) = CRC.unpack_from(data, HEADER.size + length)
    if zlib.crc32(data[4 + 1:HEADER.size] + payload) != crc:
        raise CrcMismatch(f"CRC mismatch on frame of kind {kind}")
    try:
        message_kind = MessageKind(kind)
    except ValueError:
        raise UnknownKind(f"Unknown message kind {kind}")
    return ClassicalMessage(message_kind, payload), total


def decode(data: bytes) -> ClassicalMessage:
    message, _ = decode_frame(data)
    return message


class FrameDecoder:
    """Reassembles frames from a byte stream that may split them arbitrarily"""

    def __init__(self):
        self._buffer = bytearray()

    def feed(self, chunk: bytes) -> List[ClassicalMessage]:
        self._buffer.extend(chunk)
        messages = []
        while self._buffer:
            try:
                message, consumed = decode_frame(self._buffer)
            except Truncated:
                break
            del self._buffer[:consumed]
            messages.append(message)
        return messages

    @property
    def pending(self) -> int:
        return len(self._buffer)


# Typed payloads

def session_start(train_key: int) -> ClassicalMessage:
    return ClassicalMessage(MessageKind.SESSION_START, SESSION_START.pack(train_key))


def parse_session_start(m: ClassicalMessage) -> int:
    return SESSION_START.unpack(m.payload)[0]


def control_ask() -> ClassicalMessage:
    return ClassicalMessage(MessageKind.CONTROL_ASK)


def ref_start() -> ClassicalMessage:
    return ClassicalMessage(MessageKind.REF_START)


def control_done(converged: bool, samples: int) -> ClassicalMessage:
    return ClassicalMessage(MessageKind.CONTROL_DONE, CONTROL_DONE.pack(int(converged), samples))


def parse_control_done(m: ClassicalMessage) -> Tuple[bool, int]:
    converged, samples = CONTROL_DONE.unpack(m.payload)
    return bool(converged), samples


def basis_reveal(interval: int, pulse_index: np.ndarray, bases: np.ndarray) -> ClassicalMessage:
    """Bob's single-click pulse indices and the basis each was measured in"""
    pulse_index = np.asarray(pulse_index, dtype='>u8')
    payload = (INTERVAL_COUNT.pack(interval, len(pulse_index)) + pulse_index.tobytes()
               + np.packbits(np.asarray(bases, dtype=np.uint8)).tobytes())
    return ClassicalMessage(MessageKind.BASIS_REVEAL, payload)


def parse_basis_reveal(m: ClassicalMessage) -> Tuple[int, np.ndarray, np.ndarray]:
    interval, count = INTERVAL_COUNT.unpack_from(m.payload)
    offset = INTERVAL_COUNT.size
    pulse_index = np.frombuffer(m.payload, dtype='>u8', count=count, offset=offset).astype(np.int64)
    offset += 8 * count
    packed = np.frombuffer(m.payload, dtype=np.uint8, offset=offset)
    bases = np.unpackbits(packed, count=count).astype(np.int8)
    return interval, pulse_index, bases


def sift_result(interval: int, match: np.ndarray, alice_bits: np.ndarray) -> ClassicalMessage:
    """Alice's basis-match mask and her bits for every matched pulse"""
    match = np.asarray(match, dtype=np.uint8)
    packed_match = np.packbits(match).tobytes()
    packed_bits = np.packbits(np.asarray(alice_bits, dtype=np.uint8)).tobytes()
    payload = INTERVAL_COUNT.pack(interval, len(match)) + packed_match + packed_bits
    return ClassicalMessage(MessageKind.SIFT_RESULT, payload)


def parse_sift_result(m: ClassicalMessage) -> Tuple[int, np.ndarray, np.ndarray]:
    interval, count = INTERVAL_COUNT.unpack_from(m.payload)
    offset = INTERVAL_COUNT.size
    match_bytes = (count + 7) // 8
    match = np.unpackbits(np.frombuffer(m.payload, dtype=np.uint8, count=match_bytes, offset=offset),
                          count=count).astype(bool)
    matched = int(np.count_nonzero(match))
    bits = np.unpackbits(np.frombuffer(m.payload, dtype=np.uint8, offset=offset + match_bytes),
                         count=matched).astype(np.int8)
    return interval, match, bits


def session_end(intervals: int) -> ClassicalMessage:
    return ClassicalMessage(MessageKind.SESSION_END, SESSION_END.pack(intervals))


def parse_session_end(m: ClassicalMessage) -> int:
    return SESSION_END.unpack(m.payload)[0]


# Endpoints

class Endpoint(ABC):
    """One side of an ordered, reliable message connection"""

    @abstractmethod
    def send(self, m: ClassicalMessage) -> None:
        pass

    @abstractmethod
    def receive(self, timeout: Optional[float] = None) -> ClassicalMessage:
        """Block for the next message; raises ConnectionLost if the peer is gone"""
        pass

    @abstractmethod
    def poll(self) -> Optional[ClassicalMessage]:
        """Next message if one is already available"""
        pass

    @abstractmethod
    def close(self) -> None:
        pass


_CLOSED = object()


class LoopbackEndpoint(Endpoint):
    """In-process endpoint; frames go through the same codec as the socket transport"""

    def __init__(self, name: str = 'loopback'):
        self.name = name
        self.peer: Optional['LoopbackEndpoint'] = None
        self._inbox: 'queue.Queue' = queue.Queue()
        self._closed = False
        self._lock = threading.Lock()

    def send(self, m: ClassicalMessage) -> None:
        frame = encode(m)
        with self._lock:
            if self._closed or self.peer is None or self.peer._closed:
                raise ConnectionLost(f"{self.name}: peer is not connected")
            self.peer._inbox.put(frame)

    def _unpack(self, item) -> ClassicalMessage:
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise ConnectionLost(f"{self.name}: peer closed the connection")
        return decode(item)

    def receive(self, timeout: Optional[float] = None) -> ClassicalMessage:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ConnectionLost(f"{self.name}: no message within {timeout} s")
        return self._unpack(item)

    def poll(self) -> Optional[ClassicalMessage]:
        try:
            item = self._inbox.get_nowait()
        except queue.Empty:
            return None
        return self._unpack(item)

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
        if self.peer is not None:
            self.peer._inbox.put(_CLOSED)


def loopback_pair() -> Tuple[LoopbackEndpoint, LoopbackEndpoint]:
    """Two connected in-process endpoints"""
    first, second = LoopbackEndpoint('loopback-a'), LoopbackEndpoint('loopback-b')
    first.peer, second.peer = second, first
    return first, second


class SocketEndpoint(Endpoint):
    """Framed messages over a connected TCP socket; sends are serialized"""

    def __init__(self, sock: socket.socket, name: str = 'socket'):
        self.sock = sock
        self.name = name
        self._decoder = FrameDecoder()
        self._ready: Deque[ClassicalMessage] = deque()
        self._send_lock = threading.Lock()
        self._closed = False

    def send(self, m: ClassicalMessage) -> None:
        frame = encode(m)
        with self._send_lock:
            try:
                self.sock.sendall(frame)
            except OSError as e:
                raise ConnectionLost(f"{self.name}: send failed: {e}")

    def _read_once(self, timeout: Optional[float]) -> None:
        try:
            self.sock.settimeout(timeout)
            chunk = self.sock.recv(RECV_SIZE)
        except socket.timeout:
            raise ConnectionLost(f"{self.name}: no message within {timeout} s")
        except OSError as e:
            raise ConnectionLost(f"{self.name}: receive failed: {e}")
        if not chunk:
            raise ConnectionLost(f"{self.name}: peer closed the connection")
        try:
            self._ready.extend(self._decoder.feed(chunk))
        except FrameError as e:
            raise ConnectionLost(f"{self.name}: corrupt stream: {e}")

    def receive(self, timeout: Optional[float] = None) -> ClassicalMessage:
        while not self._ready:
            self._read_once(timeout)
        return self._ready.popleft()

    def poll(self) -> Optional[ClassicalMessage]:
        if not self._ready:
            readable, _, _ = select.select([self.sock], [], [], 0.0)
            if readable:
                self._read_once(None)
        return self._ready.popleft() if self._ready else None

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_address(address: str, default_port: int = DEFAULT_PORT) -> Tuple[str, int]:
    """'host:port' (or bare host) to a (host, port) pair"""
    host, _, port = address.rpartition(':')
    if not host:
        return address, default_port
    try:
        return host, int(port)
    except ValueError:
        raise ValueError(f"Invalid port in address '{address}'")


def listen(host: str, port: int, timeout: Optional[float] = None) -> SocketEndpoint:
    """Accept exactly one connection on host:port"""
    with socket.create_server((host, port)) as server:
        server.settimeout(timeout)
        logger.info(f"Waiting for peer on {host}:{server.getsockname()[1]}")
        try:
            conn, peer = server.accept()
        except socket.timeout:
            raise ConnectionLost(f"No peer connected to {host}:{port} within {timeout} s")
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    logger.info(f"Peer connected from {peer[0]}:{peer[1]}")
    return SocketEndpoint(conn, name=f'listen:{port}')


def connect(host: str, port: int, timeout: Optional[float] = None,
            attempts: int = 1, retry_delay: float = 0.5) -> SocketEndpoint:
    """Connect to a listening peer, retrying while it is not up yet"""
    for attempt in range(1, attempts + 1):
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            break
        except OSError as e:
            if attempt == attempts:
                raise ConnectionLost(f"Could not connect to {host}:{port}: {e}")
            logger.info(f"Peer {host}:{port} not reachable ({e}), retrying")
            time.sleep(retry_delay)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    logger.info(f"Connected to {host}:{port}")
    return SocketEndpoint(sock, name=f'connect:{port}')


def socket_pair(host: str = '127.0.0.1', port: int = 0) -> Tuple[SocketEndpoint, SocketEndpoint]:
    """Listening and connecting endpoints joined over a real TCP connection"""
    server = socket.create_server((host, port))
    try:
        bound_port = server.getsockname()[1]
        client = socket.create_connection((host, bound_port))
        conn, _ = server.accept()
    finally:
        server.close()
    for sock in (client, conn):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketEndpoint(conn, name='socket-a'), SocketEndpoint(client, name='socket-b')
