"""TCP transport: length-prefixed frames carrying ``FDM1`` payloads.

Every message is ``u32 LE length | payload``. A collaborator connects and
sends a hello frame (``FDMH`` | version u16 | u16-length id); the aggregator
answers with its own hello. Each round the aggregator sends a control frame
(``FDMC`` | op u8 | round u32) followed by the global model as an update
payload, and reads one update payload back. Op 2 ends the session.

No TLS: this carries plaintext over loopback or a trusted network only.
"""

from __future__ import annotations

import socket
import struct
import threading
from typing import Sequence

from ..models.params import ParamStore
from .wire import VERSION, ModelUpdate, TruncatedPayload, UnsupportedVersion, WireError, decode_update, encode_update, frame

HELLO = b"FDMH"
CONTROL = b"FDMC"
OP_RUN = 1
OP_END = 2
AGGREGATOR_ID = "aggregator"
MAX_FRAME = 1 << 30


def send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(frame(payload))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TruncatedPayload(f"connection closed after {len(buf)} of {n} bytes")
        buf.extend(chunk)
    return bytes(buf)


def recv_frame(sock: socket.socket) -> bytes:
    (n,) = struct.unpack("<I", _recv_exact(sock, 4))
    if n > MAX_FRAME:
        raise WireError(f"frame of {n} bytes exceeds limit")
    return _recv_exact(sock, n)


def _hello(name: str) -> bytes:
    raw = name.encode("utf-8")
    return HELLO + struct.pack("<HH", VERSION, len(raw)) + raw


def _parse_hello(payload: bytes) -> str:
    if payload[:4] != HELLO:
        raise WireError("expected hello frame")
    version, n = struct.unpack("<HH", payload[4:8])
    if version != VERSION:
        raise UnsupportedVersion(f"peer speaks protocol {version}, this build speaks {VERSION}")
    return payload[8:8 + n].decode("utf-8")


def _control(op: int, round_index: int) -> bytes:
    return CONTROL + struct.pack("<BI", op, round_index)


def _broadcast(den: ParamStore, reg: ParamStore) -> bytes:
    return encode_update(ModelUpdate(AGGREGATOR_ID, den, reg, 1, {}))


class RemoteCollaborator:
    """Aggregator-side handle for one connected collaborator."""

    def __init__(self, sock: socket.socket, collaborator_id: str):
        self._sock = sock
        self.collaborator_id = collaborator_id
        self._lock = threading.Lock()

    def run_tasks(self, denoiser: ParamStore, regressor: ParamStore, round_index: int) -> ModelUpdate:
        with self._lock:
            send_frame(self._sock, _control(OP_RUN, round_index))
            send_frame(self._sock, _broadcast(denoiser, regressor))
            update = decode_update(recv_frame(self._sock))
        if update.collaborator_id != self.collaborator_id:
            raise WireError(f"update from {update.collaborator_id!r} on {self.collaborator_id!r}'s connection")
        return update

    def close(self) -> None:
        try:
            send_frame(self._sock, _control(OP_END, 0))
        except OSError:
            pass
        self._sock.close()


class AggregatorListener:
    """Listening socket that accepts collaborator connections."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._server = socket.create_server((host, port))
        self.address = self._server.getsockname()

    def accept(self, count: int, timeout: float = 60.0) -> list[RemoteCollaborator]:
        self._server.settimeout(timeout)
        out = []
        for _ in range(count):
            sock, _ = self._server.accept()
            sock.settimeout(None)
            name = _parse_hello(recv_frame(sock))
            send_frame(sock, _hello(AGGREGATOR_ID))
            out.append(RemoteCollaborator(sock, name))
        return out

    def close(self) -> None:
        self._server.close()


def serve_collaborator(collaborator, address: tuple[str, int], timeout: float = 60.0) -> int:
    """Collaborator-side loop; returns the number of rounds served."""
    served = 0
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.settimeout(None)
        send_frame(sock, _hello(collaborator.collaborator_id))
        _parse_hello(recv_frame(sock))
        while True:
            ctrl = recv_frame(sock)
            if ctrl[:4] != CONTROL:
                raise WireError("expected control frame")
            op, round_index = struct.unpack("<BI", ctrl[4:9])
            if op == OP_END:
                return served
            glob = decode_update(recv_frame(sock))
            update = collaborator.run_tasks(glob.denoiser_params, glob.regressor_params, round_index)
            send_frame(sock, encode_update(update))
            served += 1


def start_collaborator_threads(collaborators: Sequence, address) -> list[threading.Thread]:
    threads = []
    for c in collaborators:
        th = threading.Thread(target=serve_collaborator, args=(c, address), daemon=True,
                              name=f"collab-{c.collaborator_id}")
        th.start()
        threads.append(th)
    return threads
