"""Message transports: in-process loopback and TCP with length framing.

Both implement the same tiny contract: reliable, ordered, exactly-once
delivery of opaque byte strings between numbered endpoints (server is 0,
hospitals are 1..K). The loopback transport is fully deterministic and is
what tests and single-process runs use; the TCP transport exists to run the
same protocol across processes and must produce identical aggregates.

TCP framing: each message is preceded by its length as a 64-bit little-endian
integer. A connection starts with a 2-byte little-endian hello naming the
sender; after that only frames flow.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

from .errors import ProtocolError

_HELLO = struct.Struct("<H")
_FRAME = struct.Struct("<Q")

MAX_MESSAGE_BYTES = 1 << 30


class Endpoint:
    """One participant's mailbox: send to a peer, receive from a peer."""

    def __init__(self, node_id: int):
        self.node_id = node_id

    def send(self, dst: int, data: bytes) -> None:
        raise NotImplementedError

    def recv(self, src: int, timeout: float | None = None) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class LoopbackEndpoint(Endpoint):
    def __init__(self, node_id: int, mesh: dict[tuple[int, int], "queue.Queue[bytes]"]):
        super().__init__(node_id)
        self._mesh = mesh

    def send(self, dst: int, data: bytes) -> None:
        key = (self.node_id, dst)
        if key not in self._mesh:
            raise ProtocolError(f"no route from {self.node_id} to {dst}")
        self._mesh[key].put(bytes(data))

    def recv(self, src: int, timeout: float | None = None) -> bytes:
        key = (src, self.node_id)
        if key not in self._mesh:
            raise ProtocolError(f"no route from {src} to {self.node_id}")
        try:
            return self._mesh[key].get(timeout=timeout)
        except queue.Empty:
            raise ProtocolError(
                f"timed out waiting for a message from {src} at {self.node_id}"
            ) from None


def loopback_network(num_hospitals: int) -> dict[int, Endpoint]:
    """Endpoints {0: server, 1..K: hospitals} over in-process queues."""
    if num_hospitals < 1:
        raise ValueError("need at least one hospital")
    ids = list(range(num_hospitals + 1))
    mesh: dict[tuple[int, int], queue.Queue] = {
        (a, b): queue.Queue() for a in ids for b in ids if a != b
    }
    return {i: LoopbackEndpoint(i, mesh) for i in ids}


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("peer closed the connection mid-message")
        buf.extend(chunk)
    return bytes(buf)


@dataclass
class TcpEndpoint(Endpoint):
    node_id: int
    addresses: dict[int, tuple[str, int]]
    listener: socket.socket = field(repr=False)
    _inboxes: dict[int, "queue.Queue[bytes]"] = field(default_factory=dict, repr=False)
    _out: dict[int, socket.socket] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _closed: bool = False

    def __post_init__(self):
        Endpoint.__init__(self, self.node_id)
        for peer in self.addresses:
            if peer != self.node_id:
                self._inboxes[peer] = queue.Queue()
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self):
        while not self._closed:
            try:
                conn, _ = self.listener.accept()
            except OSError:
                return
            threading.Thread(target=self._reader, args=(conn,), daemon=True).start()

    def _reader(self, conn: socket.socket):
        try:
            (sender,) = _HELLO.unpack(_recv_exact(conn, _HELLO.size))
            inbox = self._inboxes.get(sender)
            if inbox is None:
                conn.close()
                return
            while True:
                (length,) = _FRAME.unpack(_recv_exact(conn, _FRAME.size))
                if length > MAX_MESSAGE_BYTES:
                    raise ProtocolError(f"frame of {length} bytes exceeds the limit")
                inbox.put(_recv_exact(conn, length))
        except (ProtocolError, OSError):
            conn.close()

    def _connection(self, dst: int) -> socket.socket:
        with self._lock:
            sock = self._out.get(dst)
            if sock is None:
                if dst not in self.addresses:
                    raise ProtocolError(f"no address for endpoint {dst}")
                sock = socket.create_connection(self.addresses[dst], timeout=10.0)
                sock.sendall(_HELLO.pack(self.node_id))
                self._out[dst] = sock
            return sock

    def send(self, dst: int, data: bytes) -> None:
        data = bytes(data)
        if len(data) > MAX_MESSAGE_BYTES:
            raise ProtocolError(f"message of {len(data)} bytes exceeds the limit")
        sock = self._connection(dst)
        with self._lock:
            sock.sendall(_FRAME.pack(len(data)) + data)

    def recv(self, src: int, timeout: float | None = None) -> bytes:
        inbox = self._inboxes.get(src)
        if inbox is None:
            raise ProtocolError(f"no route from {src} to {self.node_id}")
        try:
            return inbox.get(timeout=timeout)
        except queue.Empty:
            raise ProtocolError(
                f"timed out waiting for a message from {src} at {self.node_id}"
            ) from None

    def close(self) -> None:
        self._closed = True
        try:
            self.listener.close()
        except OSError:
            pass
        with self._lock:
            for sock in self._out.values():
                try:
                    sock.close()
                except OSError:
                    pass
            self._out.clear()


def tcp_network(num_hospitals: int, host: str = "127.0.0.1") -> dict[int, Endpoint]:
    """Endpoints {0..K} over localhost TCP sockets bound to ephemeral ports."""
    if num_hospitals < 1:
        raise ValueError("need at least one hospital")
    ids = list(range(num_hospitals + 1))
    listeners: dict[int, socket.socket] = {}
    addresses: dict[int, tuple[str, int]] = {}
    for i in ids:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, 0))
        sock.listen(num_hospitals + 1)
        listeners[i] = sock
        addresses[i] = (host, sock.getsockname()[1])
    return {
        i: TcpEndpoint(node_id=i, addresses=dict(addresses), listener=listeners[i])
        for i in ids
    }


def close_network(endpoints: dict[int, Endpoint]) -> None:
    for ep in endpoints.values():
        ep.close()
