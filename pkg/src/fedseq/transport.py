"""TCP transport between clients and the coordinator.

Frames are a 4-byte little-endian length, one kind byte, then the payload;
the length counts the kind byte.  Because every frame is length-prefixed, a
payload that fails to decode never desynchronizes the stream: the server
answers with an ERROR frame and keeps serving.  Connections close only when
a peer disconnects or a read comes up short.

Parameter blobs reuse the checkpoint encoding, so a fetched model is
bit-for-bit the coordinator's model.
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading
from typing import BinaryIO

from .federation import Coordinator, FederationError, NotReadyError, RoundMismatchError
from .model import ModelParams
from .serialize import SerializationError, params_from_bytes, params_to_bytes
from .tensor import ContractError
from .training import ClientUpdate

GET_GLOBAL = 1
GLOBAL_PARAMS = 2
PUSH_UPDATE = 3
ACK = 4
GET_STATUS = 5
STATUS = 6
NOT_READY = 7
ERROR = 8

KIND_NAMES = {
    GET_GLOBAL: "GET_GLOBAL",
    GLOBAL_PARAMS: "GLOBAL_PARAMS",
    PUSH_UPDATE: "PUSH_UPDATE",
    ACK: "ACK",
    GET_STATUS: "GET_STATUS",
    STATUS: "STATUS",
    NOT_READY: "NOT_READY",
    ERROR: "ERROR",
}

MAX_FRAME = 1 << 30
CURRENT_ROUND = 0xFFFFFFFF  # GET_GLOBAL sentinel: whatever round is open now
_UPDATE_HEADER = struct.Struct("<IIQdd")


class TransportError(Exception):
    """Request failed for good; do not retry."""

    retryable = False


class TransportTimeoutError(TransportError):
    """The peer did not answer in time; safe to retry."""

    retryable = True


class ConnectionFailedError(TransportError):
    """Could not reach the peer, or it went away mid-request; safe to retry."""

    retryable = True


class MalformedFrameError(TransportError):
    """A frame violated the wire format; retrying the same bytes cannot help."""


class RemoteError(TransportError):
    """The server answered with an ERROR frame; message comes from the server."""


def write_frame(stream: BinaryIO, kind: int, payload: bytes = b"") -> None:
    stream.write(struct.pack("<I", 1 + len(payload)))
    stream.write(struct.pack("<B", kind))
    stream.write(payload)
    stream.flush()


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if data is None or len(data) != n:
        raise EOFError(f"connection closed mid-frame: wanted {n} bytes, "
                       f"got {0 if data is None else len(data)}")
    return data


def read_frame(stream: BinaryIO) -> tuple[int, bytes]:
    header = stream.read(4)
    if not header:
        raise EOFError("connection closed")
    if len(header) != 4:
        raise EOFError(f"connection closed mid-frame: got {len(header)} header bytes")
    (length,) = struct.unpack("<I", header)
    if not 1 <= length <= MAX_FRAME:
        raise MalformedFrameError(f"frame length {length} outside 1..{MAX_FRAME}")
    body = _read_exact(stream, length)
    return body[0], body[1:]


def encode_update(round_index: int, update: ClientUpdate) -> bytes:
    header = _UPDATE_HEADER.pack(
        round_index,
        update.client_id,
        update.sample_count,
        update.mean_train_loss,
        update.mean_test_loss,
    )
    return header + params_to_bytes(update.params)


def decode_update(payload: bytes) -> tuple[int, ClientUpdate]:
    if len(payload) < _UPDATE_HEADER.size:
        raise MalformedFrameError(
            f"update payload holds {len(payload)} bytes, header needs {_UPDATE_HEADER.size}"
        )
    round_index, client_id, count, train_loss, test_loss = _UPDATE_HEADER.unpack_from(payload)
    params = params_from_bytes(payload[_UPDATE_HEADER.size :])
    return round_index, ClientUpdate(
        client_id=client_id,
        params=params,
        sample_count=count,
        mean_train_loss=train_loss,
        mean_test_loss=test_loss,
    )


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            try:
                kind, payload = read_frame(self.rfile)
            except EOFError:
                return
            except MalformedFrameError as exc:
                # Bad length prefix: answer, then drop the unsyncable stream.
                write_frame(self.wfile, ERROR, f"MALFORMED: {exc}".encode("utf-8"))
                return
            response_kind, response_payload = self.server.dispatch(kind, payload)
            write_frame(self.wfile, response_kind, response_payload)


class CoordinatorServer(socketserver.ThreadingTCPServer):
    """Serves one coordinator; safe for concurrent client connections."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, coordinator: Coordinator, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.coordinator = coordinator
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]

    def start(self) -> "CoordinatorServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=10)

    def __enter__(self) -> "CoordinatorServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def dispatch(self, kind: int, payload: bytes) -> tuple[int, bytes]:
        try:
            if kind == GET_GLOBAL:
                requested = self._requested_round(payload)
                round_index, params = self.coordinator.get_global(requested)
                return GLOBAL_PARAMS, struct.pack("<I", round_index) + params_to_bytes(params)
            if kind == PUSH_UPDATE:
                round_index, update = decode_update(payload)
                current = self.coordinator.status()["round_index"]
                if round_index > current:
                    return NOT_READY, (
                        f"round {round_index} not open yet, coordinator is at {current}"
                    ).encode("utf-8")
                acked = self.coordinator.push_update(round_index, update)
                return ACK, struct.pack("<I", acked)
            if kind == GET_STATUS:
                return STATUS, json.dumps(self.coordinator.status()).encode("utf-8")
            return ERROR, f"MALFORMED: unknown frame kind {kind}".encode("utf-8")
        except NotReadyError as exc:
            return NOT_READY, str(exc).encode("utf-8")
        except MalformedFrameError as exc:
            return ERROR, f"MALFORMED: {exc}".encode("utf-8")
        except (
            TransportError,
            SerializationError,
            FederationError,
            ContractError,
            ValueError,
        ) as exc:
            return ERROR, f"{type(exc).__name__}: {exc}".encode("utf-8")

    @staticmethod
    def _requested_round(payload: bytes) -> int | None:
        if not payload:
            return None
        if len(payload) != 4:
            raise MalformedFrameError(f"GET_GLOBAL payload holds {len(payload)} bytes, wanted 4")
        (requested,) = struct.unpack("<I", payload)
        return None if requested == CURRENT_ROUND else requested


class SocketChannel:
    """Client-side channel speaking the frame protocol over one connection."""

    def __init__(self, host: str, port: int, timeout: float | None = 300.0):
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except socket.timeout as exc:
            raise TransportTimeoutError(f"connect to {host}:{port} timed out") from exc
        except OSError as exc:
            raise ConnectionFailedError(f"connect to {host}:{port} failed: {exc}") from exc
        self._stream = self._sock.makefile("rwb")

    def _request(self, kind: int, payload: bytes = b"") -> tuple[int, bytes]:
        try:
            write_frame(self._stream, kind, payload)
            response_kind, response_payload = read_frame(self._stream)
        except socket.timeout as exc:
            raise TransportTimeoutError(f"no answer to {KIND_NAMES.get(kind, kind)}") from exc
        except (OSError, EOFError) as exc:
            raise ConnectionFailedError(f"connection failed: {exc}") from exc
        if response_kind == ERROR:
            message = response_payload.decode("utf-8", "replace")
            if message.startswith("MALFORMED"):
                raise MalformedFrameError(message)
            raise RemoteError(message)
        if response_kind == NOT_READY:
            raise NotReadyError(response_payload.decode("utf-8", "replace"))
        return response_kind, response_payload

    def fetch_global(self, round_index: int | None = None) -> tuple[int, ModelParams]:
        wanted = CURRENT_ROUND if round_index is None else round_index
        kind, payload = self._request(GET_GLOBAL, struct.pack("<I", wanted))
        if kind != GLOBAL_PARAMS or len(payload) < 4:
            raise TransportError(f"expected GLOBAL_PARAMS, got {KIND_NAMES.get(kind, kind)}")
        (served,) = struct.unpack_from("<I", payload)
        return served, params_from_bytes(payload[4:])

    def push_update(self, round_index: int, update: ClientUpdate) -> int:
        kind, payload = self._request(PUSH_UPDATE, encode_update(round_index, update))
        if kind != ACK:
            raise TransportError(f"expected ACK, got {KIND_NAMES.get(kind, kind)}")
        if len(payload) != 4:
            raise MalformedFrameError(f"ACK payload holds {len(payload)} bytes, wanted 4")
        (acked,) = struct.unpack("<I", payload)
        return acked

    def status(self) -> dict:
        kind, payload = self._request(GET_STATUS)
        if kind != STATUS:
            raise TransportError(f"expected STATUS, got {KIND_NAMES.get(kind, kind)}")
        return json.loads(payload.decode("utf-8"))

    def close(self) -> None:
        try:
            self._stream.close()
        finally:
            self._sock.close()


class SocketFederation:
    """Channel factory for socket-backed runs; owns the server lifecycle.

    Pass the instance as ``make_channels`` to the federation driver and call
    ``stop()`` when the run finishes.
    """

    def __init__(self, num_clients: int, host: str = "127.0.0.1", port: int = 0):
        self.num_clients = num_clients
        self.host = host
        self.port = port
        self.server: CoordinatorServer | None = None

    def __call__(self, coordinator: Coordinator) -> list[SocketChannel]:
        self.server = CoordinatorServer(coordinator, self.host, self.port).start()
        host, port = self.server.address
        return [SocketChannel(host, port) for _ in range(self.num_clients)]

    def stop(self) -> None:
        if self.server is not None:
            self.server.stop()
            self.server = None
