"""Blocking TCP transport: one thread per accepted connection."""

from __future__ import annotations

import logging
import socket
import threading
from typing import Optional

from repcat.errors import ConnectionRefused, HandshakeTimeout, ProtocolError, Unreachable
from repcat.federation import Federation, split_endpoint
from repcat.store import Store
from repcat.transport.session import ClientSession, ServerSession, serve_channel
from repcat.transport.wire import PROTOCOL_VERSION, Frame, encode_frame, read_frame

log = logging.getLogger(__name__)

HANDSHAKE_TIMEOUT = 10.0
# generous per-frame deadline once a session is up; snapshots can be large
IO_TIMEOUT = 300.0


class SocketChannel:
    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self._closed = False

    def settimeout(self, seconds: Optional[float]) -> None:
        self.sock.settimeout(seconds)

    def _read_exactly(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self.sock.recv(min(n - len(buf), 1 << 20))
            if not chunk:
                raise EOFError("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def send(self, frame: Frame) -> None:
        self.sock.sendall(encode_frame(frame))

    def recv(self) -> Frame:
        return read_frame(self._read_exactly)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class _ClientChannel(SocketChannel):
    """Maps socket failures to transport errors for the client side."""

    def send(self, frame: Frame) -> None:
        try:
            super().send(frame)
        except OSError as exc:
            self.close()
            raise Unreachable(f"send failed: {exc}") from None

    def recv(self) -> Frame:
        try:
            return super().recv()
        except socket.timeout:
            self.close()
            raise Unreachable("peer timed out") from None
        except EOFError:
            self.close()
            raise ProtocolError("peer closed the session") from None
        except OSError as exc:
            self.close()
            raise Unreachable(f"receive failed: {exc}") from None


def connect(address: str, site: str, federation: Federation, *,
            timeout: float = HANDSHAKE_TIMEOUT, version: int = PROTOCOL_VERSION) -> ClientSession:
    """Open a session to ``address`` (``host:port``) and complete the handshake."""
    host, port = split_endpoint(address)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except ConnectionRefusedError:
        raise ConnectionRefused(f"{address} refused the connection") from None
    except socket.timeout:
        raise Unreachable(f"{address} did not answer within {timeout:g}s") from None
    except OSError as exc:
        raise Unreachable(f"{address}: {exc}") from None
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    channel = _ClientChannel(sock)
    session = ClientSession(channel, site, federation, version=version)
    try:
        session.handshake()
    except Unreachable as exc:
        raise HandshakeTimeout(f"handshake with {address} failed: {exc}") from None
    channel.settimeout(IO_TIMEOUT)
    return session


class SyncServer:
    """Serves sync sessions for one store until :meth:`stop`."""

    def __init__(self, store: Store, address: str = "127.0.0.1:0", *,
                 handshake_timeout: float = HANDSHAKE_TIMEOUT,
                 version: int = PROTOCOL_VERSION) -> None:
        self.store = store
        self.handshake_timeout = handshake_timeout
        self.version = version
        host, port = split_endpoint(address)
        self._sock = socket.create_server((host, port))
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._conns: set[socket.socket] = set()
        self._lock = threading.Lock()

    @property
    def address(self) -> str:
        host, port = self._sock.getsockname()[:2]
        return f"{host}:{port}"

    def start(self) -> "SyncServer":
        self._thread = threading.Thread(target=self._accept_loop, name="sync-accept", daemon=True)
        self._thread.start()
        return self

    def __enter__(self) -> "SyncServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, peer = self._sock.accept()
            except OSError:
                break
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._conns.add(conn)
            threading.Thread(target=self._serve, args=(conn, peer), name=f"sync-{peer[0]}:{peer[1]}",
                             daemon=True).start()

    def _serve(self, conn: socket.socket, peer) -> None:
        channel = SocketChannel(conn)
        session = ServerSession(self.store, version=self.version)
        try:
            channel.settimeout(self.handshake_timeout)
            first = channel.recv()
            for reply in session.handle(first):
                channel.send(reply)
            if session.peer is None:
                return
            channel.settimeout(None)
            serve_channel(channel, session)
        except (OSError, EOFError) as exc:
            log.debug("connection from %s ended: %s", peer, exc)
        except Exception:
            log.exception("sync session from %s crashed", peer)
        finally:
            channel.close()
            with self._lock:
                self._conns.discard(conn)

    def stop(self) -> None:
        self._stop.set()
        try:
            # shutdown wakes a thread blocked in accept(); close alone does not
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if self._thread is not None:
            self._thread.join(timeout=5)


def listen(store: Store, address: str) -> SyncServer:
    """Start serving ``store`` on ``address``; returns the running server."""
    return SyncServer(store, address).start()
