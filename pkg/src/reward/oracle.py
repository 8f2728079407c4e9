"""
Reward oracles: the toy motif scorer and a client for external scoring processes
"""
import logging
import math
import socket
import struct
from abc import ABC, abstractmethod

import numpy as np

from src.data.sequences import CellType
from src.errors import ContractError, ProtocolError, TransportError
from src.reward.pwm import max_score

logger = logging.getLogger(__name__)


class RewardOracle(ABC):
    """
    Deterministic scorer of a composed 4×N matrix for one cell type.
    Implementations are stateless and safe to call from several threads.
    """

    descriptor = "oracle"

    @abstractmethod
    def __call__(self, composed: np.ndarray, cell: int) -> float:
        ...

    def score_many(self, items) -> list:
        """Score (composed, cell) pairs in order."""
        return [self(composed, cell) for composed, cell in items]

    def __repr__(self):
        return self.descriptor


def _cell_id(cell) -> int:
    return cell.id if isinstance(cell, CellType) else int(cell)


def toy_reward(composed: np.ndarray, cell, motifs: dict) -> float:
    """
    Best PWM log-odds score of the cell's motif over all offsets of the composed matrix.

    composed np.ndarray: 4×N base probabilities (filler columns allowed)
    cell CellType | int: cell whose motif is scored
    motifs dict[int, Pwm]: motif per cell id
    """
    cell_id = _cell_id(cell)
    if cell_id not in motifs:
        raise ContractError(f"no motif defined for cell {cell_id}")
    return max_score(composed, motifs[cell_id])


class ToyMotifOracle(RewardOracle):
    """Desk-scale stand-in for an expression predictor: max-offset motif log-odds."""

    def __init__(self, motifs: dict):
        self.motifs = {_cell_id(cell): pwm for cell, pwm in motifs.items()}
        self.descriptor = "toy-motif(" + ",".join(f"{c}:{p.motif_id}" for c, p in sorted(self.motifs.items())) + ")"

    def __call__(self, composed: np.ndarray, cell: int) -> float:
        return toy_reward(composed, cell, self.motifs)


# wire format: u32 length | u32 rows | u32 cols | f32 * rows*cols (row-major) | u32 cell ; reply u32 length | f64


def encode_request(matrix: np.ndarray, cell: int) -> bytes:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    rows, cols = matrix.shape
    body = struct.pack("<II", rows, cols) + matrix.tobytes() + struct.pack("<I", cell)
    return struct.pack("<I", len(body)) + body


def decode_request(body: bytes):
    """Parse a request body (without its length prefix) into (matrix, cell)."""
    if len(body) < 12:
        raise ProtocolError(f"request body of {len(body)} bytes is too short")
    rows, cols = struct.unpack_from("<II", body, 0)
    expected = 8 + 4 * rows * cols + 4
    if len(body) != expected:
        raise ProtocolError(f"request declares {rows}×{cols} but carries {len(body)} bytes, expected {expected}")
    matrix = np.frombuffer(body, dtype="<f4", count=rows * cols, offset=8).reshape(rows, cols).copy()
    (cell,) = struct.unpack_from("<I", body, expected - 4)
    return matrix, cell


def encode_reply(value: float) -> bytes:
    return struct.pack("<Id", 8, value)


def decode_reply(body: bytes) -> float:
    if len(body) != 8:
        raise ProtocolError(f"reply body must be 8 bytes, got {len(body)}")
    (value,) = struct.unpack("<d", body)
    if not math.isfinite(value):
        raise ProtocolError(f"oracle replied with a non-finite reward: {value}")
    return value


def recv_exact(sock, size: int) -> bytes:
    chunks, remaining = [], size
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ProtocolError(f"connection closed with {remaining} of {size} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock) -> bytes:
    (length,) = struct.unpack("<I", recv_exact(sock, 4))
    return recv_exact(sock, length)


def parse_endpoint(endpoint) -> tuple:
    if isinstance(endpoint, (tuple, list)):
        return str(endpoint[0]), int(endpoint[1])
    host, _, port = str(endpoint).rpartition(":")
    if not host or not port.isdigit():
        raise ContractError(f"endpoint must look like host:port, got: {endpoint!r}")
    return host, int(port)


class ExternalOracle(RewardOracle):
    """
    Client for a scoring process speaking the length-prefixed frame protocol.
    Each call opens its own connection, so concurrent callers never share a
    reply stream; `score_many` pipelines a batch over one connection and
    matches replies to requests by order.

    endpoint str | tuple: "host:port"
    timeout float: socket timeout in seconds
    retries int: extra connection attempts on transport failure
    """

    def __init__(self, endpoint, timeout: float = 30.0, retries: int = 2):
        self.host, self.port = parse_endpoint(endpoint)
        self.timeout = timeout
        self.retries = retries
        self.descriptor = f"external({self.host}:{self.port})"

    def _connect(self):
        last = None
        for attempt in range(self.retries + 1):
            try:
                return socket.create_connection((self.host, self.port), timeout=self.timeout)
            except OSError as e:
                last = e
                logger.warning("Oracle %s:%d unreachable (attempt %d/%d): %s",
                               self.host, self.port, attempt + 1, self.retries + 1, e)
        raise TransportError(f"cannot reach oracle at {self.host}:{self.port}: {last}")

    def ping(self):
        """Open and close one connection; raises TransportError when unreachable."""
        self._connect().close()

    def score_many(self, items) -> list:
        items = list(items)
        if not items:
            return []
        sock = self._connect()
        try:
            sock.sendall(b"".join(encode_request(m, c) for m, c in items))
            return [decode_reply(read_frame(sock)) for _ in items]
        except OSError as e:
            raise TransportError(f"oracle connection to {self.host}:{self.port} failed: {e}")
        finally:
            sock.close()

    def __call__(self, composed: np.ndarray, cell: int) -> float:
        return self.score_many([(composed, _cell_id(cell))])[0]


def external_reward_stub(composed: np.ndarray, cell, endpoint) -> float:
    """Forward one composed matrix to an external scorer and return its scalar."""
    return ExternalOracle(endpoint)(composed, cell)
