"""
Serve any RewardOracle over the length-prefixed frame protocol
"""
import logging
import socketserver
import threading

from src.errors import ProtocolError
from src.reward.oracle import RewardOracle, decode_request, encode_reply, read_frame

logger = logging.getLogger(__name__)


class _FrameHandler(socketserver.BaseRequestHandler):

    def handle(self):
        oracle = self.server.oracle
        while True:
            try:
                body = read_frame(self.request)
            except ProtocolError:
                # peer closed between frames
                return
            try:
                matrix, cell = decode_request(body)
            except ProtocolError as e:
                logger.warning("Dropping connection from %s: %s", self.client_address, e)
                return
            try:
                value = float(oracle(matrix, cell))
            except Exception:
                # the client sees the connection close without a reply
                logger.exception("%s failed on cell %d", oracle.descriptor, cell)
                return
            self.request.sendall(encode_reply(value))


class OracleServer(socketserver.ThreadingTCPServer):
    """
    Threaded TCP server; each connection is served in order, so pipelined
    requests get their replies in the order they were sent.

    oracle RewardOracle: scorer to expose
    address tuple: (host, port); port 0 picks a free port
    """
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, oracle: RewardOracle, address=("127.0.0.1", 0)):
        self.oracle = oracle
        super().__init__(address, _FrameHandler)
        self._thread = None

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "OracleServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        logger.info("Serving %s on %s", self.oracle.descriptor, self.endpoint)
        return self

    def stop(self):
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
