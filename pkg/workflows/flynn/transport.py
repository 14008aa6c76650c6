"""Byte-metered point-to-point channels between federation parties.

Every message is framed as a 4-byte big-endian length, a 1-byte kind tag and
the body; the length counts the kind byte and the body. Meters record the full
frame, so each message costs its body plus FRAME_OVERHEAD bytes. Two
implementations share the framing and the meters: in-process queues for
thread-backed federations and localhost TCP sockets for process-backed ones.
"""

import queue
import socket
import struct
import threading
import time
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field

from .errors import FederationAbort, StragglerTimeout, TransportError
from .utils import get_logger

logger = get_logger(__name__)

KIND_HELLO = 0
KIND_SEED = 1
KIND_COUNTS = 2
KIND_PRIVATIZED = 3
KIND_LABEL_TABLE = 4
KIND_ABORT = 5

KIND_NAMES = {
    KIND_SEED: "seed",
    KIND_COUNTS: "counts",
    KIND_PRIVATIZED: "privatized-counts",
    KIND_LABEL_TABLE: "label-table",
    KIND_ABORT: "abort",
}
AGGREGATION_KINDS = (KIND_COUNTS, KIND_PRIVATIZED)

_FRAME = struct.Struct(">IB")
FRAME_OVERHEAD = _FRAME.size
_RANK = struct.Struct(">I")

POLL_INTERVAL = 0.05


def frame(kind: int, body: bytes) -> bytes:
    return _FRAME.pack(len(body) + 1, kind) + body


@dataclass
class ByteMeter:
    """Cumulative traffic of one party, by direction and message kind."""

    bytes_sent: int = 0
    bytes_received: int = 0
    messages_sent: int = 0
    messages_received: int = 0
    sent_by_kind: Counter = field(default_factory=Counter)
    sent_messages_by_kind: Counter = field(default_factory=Counter)
    received_by_kind: Counter = field(default_factory=Counter)

    def record_send(self, kind: int, body_size: int):
        size = body_size + FRAME_OVERHEAD
        self.bytes_sent += size
        self.messages_sent += 1
        self.sent_by_kind[KIND_NAMES[kind]] += size
        self.sent_messages_by_kind[KIND_NAMES[kind]] += 1

    def record_receive(self, kind: int, body_size: int):
        size = body_size + FRAME_OVERHEAD
        self.bytes_received += size
        self.messages_received += 1
        self.received_by_kind[KIND_NAMES[kind]] += size

    def aggregation_bytes_sent(self) -> int:
        return sum(self.sent_by_kind[KIND_NAMES[k]] for k in AGGREGATION_KINDS)

    def snapshot(self) -> dict:
        return {
            "bytes_sent": self.bytes_sent,
            "bytes_received": self.bytes_received,
            "messages_sent": self.messages_sent,
            "messages_received": self.messages_received,
            "aggregation_bytes_sent": self.aggregation_bytes_sent(),
            "sent_by_kind": dict(self.sent_by_kind),
            "sent_messages_by_kind": dict(self.sent_messages_by_kind),
            "received_by_kind": dict(self.received_by_kind),
        }


class Transport(ABC):
    """One party's endpoint: FIFO, exactly-once delivery per (source, destination) pair."""

    def __init__(self, rank: int, size: int, timeout: float):
        if not 0 <= rank < size:
            raise TransportError(f"Rank {rank} outside a federation of {size} parties")
        self.rank = rank
        self.size = size
        self.timeout = timeout
        self.meter = ByteMeter()
        self._abort_reason = None

    @abstractmethod
    def _deliver(self, dst: int, kind: int, body: bytes):
        ...

    @abstractmethod
    def _poll(self, src: int, wait: float):
        """Return the next (kind, body) from src, or None if nothing arrived within `wait`."""

    @abstractmethod
    def _aborted(self):
        """Reason string if any party aborted the federation, else None."""

    def send(self, dst: int, kind: int, body: bytes):
        if not 0 <= dst < self.size or dst == self.rank:
            raise TransportError(f"Party {self.rank} cannot send to party {dst}")
        self._deliver(dst, kind, body)
        self.meter.record_send(kind, len(body))

    def recv(self, src: int, expect: int = None) -> tuple:
        """Block for the next message from src.

        Raises:
        FederationAbort
            If any party aborted the federation.
        StragglerTimeout
            If nothing arrives from src within the timeout.
        """
        deadline = time.monotonic() + self.timeout
        while True:
            reason = self._aborted()
            if reason is not None:
                raise FederationAbort(reason)
            item = self._poll(src, POLL_INTERVAL)
            if item is not None:
                break
            if time.monotonic() > deadline:
                raise StragglerTimeout(
                    f"Party {self.rank} waited {self.timeout:g}s for party {src}; aborting without partial aggregation"
                )
        kind, body = item
        self.meter.record_receive(kind, len(body))
        if kind == KIND_ABORT:
            raise FederationAbort(body.decode("utf-8", "replace"))
        if expect is not None and kind != expect:
            raise TransportError(
                f"Party {self.rank} expected a {KIND_NAMES.get(expect)} message from {src}, got {KIND_NAMES.get(kind, kind)}"
            )
        return kind, body

    def abort(self, reason: str):
        """Tell every other party to stop; best effort."""
        message = f"party {self.rank} aborted: {reason}"
        body = message.encode("utf-8")
        for dst in range(self.size):
            if dst == self.rank:
                continue
            try:
                self.send(dst, KIND_ABORT, body)
            except (OSError, TransportError):
                pass
        self._signal_abort(message)

    def _signal_abort(self, message: str):
        pass

    def close(self):
        pass


class InProcessHub:
    """Shared queues for a thread-backed federation of `size` parties."""

    def __init__(self, size: int):
        self.size = size
        self.queues = {(src, dst): queue.Queue() for src in range(size) for dst in range(size) if src != dst}
        self._abort_lock = threading.Lock()
        self.abort_reason = None

    def transport(self, rank: int, timeout: float = 60.0) -> "InProcessTransport":
        return InProcessTransport(self, rank, timeout)

    def transports(self, timeout: float = 60.0) -> list:
        return [self.transport(rank, timeout) for rank in range(self.size)]

    def signal_abort(self, reason: str):
        with self._abort_lock:
            if self.abort_reason is None:
                self.abort_reason = reason


class InProcessTransport(Transport):
    def __init__(self, hub: InProcessHub, rank: int, timeout: float):
        super().__init__(rank, hub.size, timeout)
        self.hub = hub

    def _deliver(self, dst: int, kind: int, body: bytes):
        self.hub.queues[(self.rank, dst)].put((kind, bytes(body)))

    def _poll(self, src: int, wait: float):
        try:
            return self.hub.queues[(src, self.rank)].get(timeout=wait)
        except queue.Empty:
            return None

    def _aborted(self):
        return self.hub.abort_reason

    def _signal_abort(self, message: str):
        self.hub.signal_abort(message)


def allocate_local_addresses(size: int, host: str = "127.0.0.1") -> list:
    """Find `size` free localhost ports by binding to port 0."""
    holders = []
    try:
        for _ in range(size):
            holder = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            holder.bind((host, 0))
            holders.append(holder)
        return [(host, holder.getsockname()[1]) for holder in holders]
    finally:
        for holder in holders:
            holder.close()


def _read_exact(sock: socket.socket, size: int):
    chunks = bytearray()
    while len(chunks) < size:
        chunk = sock.recv(size - len(chunks))
        if not chunk:
            return None
        chunks += chunk
    return bytes(chunks)


class TcpTransport(Transport):
    """Localhost TCP endpoint: one listening socket, one outgoing connection per peer.

    Each outgoing connection opens with an unmetered hello frame carrying the
    sender's rank; a reader thread per accepted connection files incoming
    frames into per-source queues.
    """

    def __init__(self, rank: int, addresses: list, timeout: float = 60.0, connect_retries: int = 50):
        super().__init__(rank, len(addresses), timeout)
        self.addresses = [tuple(address) for address in addresses]
        self.connect_retries = connect_retries
        self._inbox = {src: queue.Queue() for src in range(self.size) if src != rank}
        self._outgoing = {}
        self._readers = []
        self._stop = threading.Event()
        self._abort_message = None
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(self.addresses[rank])
        self._listener.listen(self.size)
        self._listener.settimeout(POLL_INTERVAL)
        self._acceptor = threading.Thread(target=self._accept_loop, name=f"flynn-accept-{rank}", daemon=True)
        self._acceptor.start()

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                connection, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            reader = threading.Thread(target=self._read_loop, args=(connection,), daemon=True)
            reader.start()
            self._readers.append(reader)

    def _read_loop(self, connection: socket.socket):
        connection.settimeout(None)
        with connection:
            header = _read_exact(connection, _FRAME.size)
            if header is None:
                return
            length, kind = _FRAME.unpack(header)
            hello = _read_exact(connection, length - 1)
            if kind != KIND_HELLO or hello is None or len(hello) != _RANK.size:
                logger.warning(f"[TRANSPORT] party {self.rank} dropped a connection without a hello frame")
                return
            (src,) = _RANK.unpack(hello)
            while True:
                header = _read_exact(connection, _FRAME.size)
                if header is None:
                    return
                length, kind = _FRAME.unpack(header)
                body = _read_exact(connection, length - 1)
                if body is None:
                    return
                if kind == KIND_ABORT and self._abort_message is None:
                    self._abort_message = body.decode("utf-8", "replace")
                self._inbox[src].put((kind, body))

    def _connect(self, dst: int) -> socket.socket:
        delay = 0.01
        last_error = None
        for _ in range(self.connect_retries):
            try:
                connection = socket.create_connection(self.addresses[dst], timeout=self.timeout)
                connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                connection.sendall(frame(KIND_HELLO, _RANK.pack(self.rank)))
                return connection
            except OSError as e:
                last_error = e
                time.sleep(delay)
                delay = min(delay * 2, 0.5)
        raise TransportError(f"Party {self.rank} could not connect to party {dst} at {self.addresses[dst]}: {last_error}")

    def _deliver(self, dst: int, kind: int, body: bytes):
        if dst not in self._outgoing:
            self._outgoing[dst] = self._connect(dst)
        try:
            self._outgoing[dst].sendall(frame(kind, body))
        except OSError as e:
            raise TransportError(f"Party {self.rank} failed to send to party {dst}: {e}") from e

    def _poll(self, src: int, wait: float):
        try:
            return self._inbox[src].get(timeout=wait)
        except queue.Empty:
            return None

    def _aborted(self):
        return self._abort_message

    def abort(self, reason: str):
        # peers that already finished have closed their listeners
        self.connect_retries = min(self.connect_retries, 3)
        super().abort(reason)

    def close(self):
        self._stop.set()
        for connection in self._outgoing.values():
            try:
                connection.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            connection.close()
        self._outgoing.clear()
        self._listener.close()
        self._acceptor.join(timeout=1.0)
