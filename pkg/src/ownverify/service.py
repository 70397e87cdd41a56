"""A gray-box classification service and its client.

Framing: every message is a 4-byte big-endian length followed by a UTF-8
JSON body.  A connection may carry any number of request/response pairs.

    request   {"shape": [c, h, w], "pixels": [...]}
    response  {"probs": [...]}            (plus "model_tag" when enabled)
    error     {"error": "<code>: <message>"}

Python's float repr is the shortest string that round-trips, so JSON
transport is lossless at float64 precision.
"""
from __future__ import annotations

import json
import logging
import os
import socket
import socketserver
import struct
import threading
import time

import numpy as np

from .errors import OracleError, OracleUnreachable
from .network import Network

log = logging.getLogger(__name__)

HEADER = struct.Struct("!I")
MAX_MESSAGE = 64 * 1024 * 1024
ENDPOINT_ENV = "OWNVERIFY_ENDPOINT"
DEFAULT_ENDPOINT = "127.0.0.1:7878"


def send_message(sock: socket.socket, obj) -> None:
    body = json.dumps(obj, separators=(",", ":"), allow_nan=False).encode("utf-8")
    sock.sendall(HEADER.pack(len(body)) + body)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks, remaining = [], n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            if remaining == n:
                return None
            raise ConnectionError("connection closed mid-message")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_message(sock: socket.socket):
    """Read one framed JSON message; None on clean EOF before a header."""
    header = _recv_exact(sock, HEADER.size)
    if header is None:
        return None
    (length,) = HEADER.unpack(header)
    if length > MAX_MESSAGE:
        raise ValueError(f"message of {length} bytes exceeds limit")
    body = _recv_exact(sock, length)
    if body is None:
        raise ConnectionError("connection closed mid-message")
    return json.loads(body.decode("utf-8"))


def parse_mode(mode: str) -> int | None:
    """'full' -> None, 'rounded(3)' or 'rounded:3' -> 3."""
    mode = mode.strip().lower()
    if mode == "full":
        return None
    for prefix, suffix in (("rounded(", ")"), ("rounded:", "")):
        if mode.startswith(prefix) and mode.endswith(suffix):
            digits = mode[len(prefix):len(mode) - len(suffix)]
            if digits.isdigit() and int(digits) >= 1:
                return int(digits)
    raise ValueError(f"unknown mode {mode!r}; expected 'full' or 'rounded(d)'")


def round_probs(p: np.ndarray, digits: int) -> np.ndarray:
    """Truncate to ``digits`` decimals; no renormalization."""
    scale = 10.0 ** digits
    return np.trunc(p * scale) / scale


def publish_probs(p: np.ndarray, digits: int | None) -> np.ndarray:
    """The vector a client sees: as computed, or truncated then renormalized."""
    if digits is None:
        return p
    q = round_probs(p, digits)
    total = q.sum()
    if total == 0:
        raise ValueError(f"precision: every probability is below 1e-{digits}")
    return q / total


def decode_request(msg, input_shape) -> np.ndarray:
    """Validate a classify request; raises ValueError with an error code prefix."""
    if not isinstance(msg, dict) or "shape" not in msg or "pixels" not in msg:
        raise ValueError("bad_request: expected object with 'shape' and 'pixels'")
    shape = msg["shape"]
    if (not isinstance(shape, list) or len(shape) != 3
            or not all(isinstance(d, int) and d > 0 for d in shape)):
        raise ValueError("bad_shape: shape must be three positive integers")
    pixels = msg["pixels"]
    if not isinstance(pixels, list) or len(pixels) != int(np.prod(shape)):
        raise ValueError(f"bad_pixels: expected {int(np.prod(shape))} pixel values")
    try:
        x = np.array(pixels, dtype=np.float64).reshape(shape)
    except (TypeError, ValueError):
        raise ValueError("bad_pixels: pixel values must be numbers") from None
    if not np.isfinite(x).all() or x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("bad_pixels: pixel values must lie in [0, 1]")
    if tuple(shape) != tuple(input_shape):
        raise ValueError(f"bad_shape: model expects {list(input_shape)}")
    return x


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server = self.server
        while True:
            try:
                msg = recv_message(self.request)
            except (ConnectionError, OSError):
                return
            except (ValueError, UnicodeDecodeError) as exc:
                # framing is unrecoverable after a bad body; answer and drop the connection
                self._reply({"error": f"bad_request: {exc}"})
                return
            if msg is None:
                return
            self._reply(server.answer(msg))

    def _reply(self, obj):
        try:
            send_message(self.request, obj)
        except OSError:
            pass


class OracleServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, model: Network, mode: str = "full", model_tag: str | None = None):
        self.model = model
        self.digits = parse_mode(mode)
        self.model_tag = model_tag
        super().__init__(address, _Handler)

    def answer(self, msg) -> dict:
        try:
            x = decode_request(msg, self.model.input_shape)
        except ValueError as exc:
            return {"error": str(exc)}
        try:
            probs = publish_probs(self.model.forward(x), self.digits)
        except ValueError as exc:
            return {"error": str(exc)}
        out = {"probs": [float(v) for v in probs]}
        if self.model_tag is not None:
            out["model_tag"] = self.model_tag
        return out


class ServiceHandle:
    """A server running on a background thread."""

    def __init__(self, server: OracleServer):
        self.server = server
        self.thread = threading.Thread(target=server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self.server.server_address[:2]

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def close(self):
        self.server.shutdown()
        self.server.server_close()
        self.thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


def serve(model: Network, bind_address: str = "127.0.0.1:0", mode: str = "full",
          model_tag: str | None = None) -> ServiceHandle:
    """Start serving ``model`` on a background thread; port 0 picks a free port."""
    server = OracleServer(parse_endpoint(bind_address), model, mode, model_tag)
    return ServiceHandle(server)


class RemoteOracle:
    """Client side of the service; implements ``classify``.

    Connection failures and timeouts are retried ``retries`` times with
    exponential backoff (``backoff * 2**attempt`` seconds) before raising
    OracleUnreachable.  Error responses raise OracleError and are not retried.
    One instance per thread.
    """

    def __init__(self, endpoint: str | None = None, timeout: float = 5.0, retries: int = 3,
                 backoff: float = 0.05):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV, DEFAULT_ENDPOINT)
        self.address = parse_endpoint(self.endpoint)
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.last_tag = None
        self._sock = None

    def _connect(self):
        if self._sock is None:
            self._sock = socket.create_connection(self.address, timeout=self.timeout)
        return self._sock

    def close(self):
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def request(self, msg) -> dict:
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                sock = self._connect()
                send_message(sock, msg)
                reply = recv_message(sock)
                if reply is None:
                    raise ConnectionError("server closed the connection")
                return reply
            except (OSError, ConnectionError, ValueError) as exc:
                last = exc
                self.close()
                log.debug("oracle %s attempt %d failed: %s", self.endpoint, attempt + 1, exc)
        raise OracleUnreachable(f"{self.endpoint} unreachable after {self.retries + 1} "
                                f"attempts: {last}")

    def classify(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        reply = self.request({"shape": list(x.shape), "pixels": x.ravel().tolist()})
        if "error" in reply:
            raise OracleError(reply["error"])
        self.last_tag = reply.get("model_tag")
        return np.array(reply["probs"], dtype=np.float64)
