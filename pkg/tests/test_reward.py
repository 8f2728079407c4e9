import os
import socket
import struct
import tempfile
import unittest

import numpy as np

from src.data.sequences import CellRegistry, one_hot
from src.errors import ContractError, ParseError, ProtocolError, TransportError
from src.reward.context import Context, ContextMode, compose
from src.reward.oracle import (ExternalOracle, RewardOracle, ToyMotifOracle, decode_reply, decode_request,
                               encode_reply, encode_request, external_reward_stub, parse_endpoint, toy_reward)
from src.reward.pwm import Pwm, load_bundled_motifs, max_score, read_pwm_file, window_scores, write_pwm_file
from src.reward.server import OracleServer


class ConstantOracle(RewardOracle):
    descriptor = "constant"

    def __init__(self, value):
        self.value = value

    def __call__(self, composed, cell):
        return self.value


class SumOracle(RewardOracle):
    """Sum of the matrix plus 1000 * cell, so a reply identifies its request."""
    descriptor = "sum"

    def __call__(self, composed, cell):
        return float(np.asarray(composed, dtype=np.float64).sum()) + 1000.0 * cell


class RaisingOracle(RewardOracle):
    descriptor = "raising"

    def __call__(self, composed, cell):
        raise RuntimeError("scorer crashed")


class TestContext(unittest.TestCase):

    def setUp(self):
        self.insert = one_hot("ACGTTGCA", dtype=np.float64)

    def test_no_flank_is_identity(self):
        np.testing.assert_array_equal(compose(self.insert, Context.ex_situ(0, 8)), self.insert)

    def test_ex_situ_filler(self):
        ctx = Context.ex_situ(3, 8)
        composed = compose(self.insert, ctx)
        self.assertEqual(composed.shape, (4, 14))
        np.testing.assert_array_equal(composed[:, :3], np.full((4, 3), 0.25))
        np.testing.assert_array_equal(composed[:, -3:], np.full((4, 3), 0.25))
        np.testing.assert_array_equal(ctx.extract(composed), self.insert)
        self.assertEqual(ctx.mode, ContextMode.EX_SITU)

    def test_in_situ_round_trip(self):
        locus = "TTTTTGGGGGGGGCCCCC"
        ctx = Context.in_situ(locus, 5, 8)
        left = ctx.left.copy()
        composed = compose(self.insert, ctx)
        np.testing.assert_array_equal(ctx.extract(composed), self.insert)
        np.testing.assert_array_equal(composed[:, :5], one_hot("TTTTT", dtype=np.float64))
        np.testing.assert_array_equal(ctx.left, left)
        self.assertEqual(ctx.total_length, len(locus))
        with self.assertRaises(ContractError):
            Context.in_situ(locus, 12, 8)
        with self.assertRaises(ContractError):
            compose(one_hot("ACG", dtype=np.float64), ctx)


class TestPwm(unittest.TestCase):

    def setUp(self):
        self.motifs = load_bundled_motifs()
        self.gata = self.motifs["GATA1"]

    def test_bundled_set(self):
        self.assertGreaterEqual(len(self.motifs), 5)
        for pwm in self.motifs.values():
            np.testing.assert_allclose(pwm.matrix.sum(axis=0), 1.0, atol=1e-9)

    def test_consensus_is_maximum(self):
        composed = compose(one_hot("CC" + self.gata.consensus + "CC", dtype=np.float64), Context.ex_situ(4, 12))
        scores = window_scores(composed, self.gata)
        self.assertAlmostEqual(scores.max(), self.gata.max_score(), places=12)
        brute = max(sum(np.log(self.gata.matrix[b, j] / 0.25) * composed[b, o + j]
                        for j in range(self.gata.width) for b in range(4))
                    for o in range(composed.shape[1] - self.gata.width + 1))
        self.assertAlmostEqual(max_score(composed, self.gata), brute, places=10)

    def test_filler_closed_form(self):
        filler = np.full((4, 20), 0.25)
        expected = sum(0.25 * np.log(self.gata.matrix[b, j] / 0.25) for j in range(self.gata.width) for b in range(4))
        self.assertAlmostEqual(max_score(filler, self.gata), expected, places=12)

    def test_background_motif_scores_zero(self):
        flat = Pwm("flat", np.full((4, 1), 0.25))
        np.testing.assert_allclose(window_scores(one_hot("ACGTAC", dtype=np.float64), flat), 0.0, atol=1e-15)

    def test_pwm_invariants(self):
        with self.assertRaises(ContractError):
            Pwm("bad", np.full((4, 2), 0.3))
        with self.assertRaises(ContractError):
            Pwm("bad", np.full((3, 2), 1 / 3))

    def test_file_round_trip_and_errors(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "motifs.txt")
            write_pwm_file(path, [self.gata])
            loaded = read_pwm_file(path, pseudocount=0.0)
            self.assertEqual(loaded[0].motif_id, "GATA1")
            np.testing.assert_allclose(loaded[0].matrix, self.gata.matrix, atol=1e-6)
            with open(path, "w") as handle:
                handle.write(">X\n1 2\n1 2\n1 2\n")
            with self.assertRaises(ParseError):
                read_pwm_file(path)
            with open(path, "w") as handle:
                handle.write(">X\n10 0\n0 10\n0 0\n0 0\n")
            counts = read_pwm_file(path, pseudocount=1.0)[0]
            np.testing.assert_allclose(counts.matrix[:, 0], [11 / 14, 1 / 14, 1 / 14, 1 / 14])


class TestToyOracle(unittest.TestCase):

    def setUp(self):
        registry = CellRegistry()
        motifs = load_bundled_motifs()
        self.pwms = {registry.lookup("K562"): motifs["GATA1"], registry.lookup("HepG2"): motifs["HNF4A"]}
        self.oracle = ToyMotifOracle(self.pwms)
        self.ctx = Context.ex_situ(5, 20)

    def test_reward_prefers_consensus(self):
        gata = self.pwms[CellRegistry().lookup("K562")]
        with_motif = compose(one_hot(("A" * 6 + gata.consensus + "A" * 20)[:20], dtype=np.float64), self.ctx)
        without = compose(np.full((4, 20), 0.25), self.ctx)
        self.assertAlmostEqual(self.oracle(with_motif, 0), gata.max_score(), places=12)
        self.assertGreater(self.oracle(with_motif, 0), self.oracle(without, 0))

    def test_deeper_planting_never_lowers(self):
        gata = self.pwms[CellRegistry().lookup("K562")]
        insert = one_hot(("C" * 4 + gata.consensus + "C" * 20)[:20], dtype=np.float64)
        shallow = self.oracle(compose(insert, Context.ex_situ(0, 20)), 0)
        deep = self.oracle(compose(insert, Context.ex_situ(30, 20)), 0)
        self.assertGreaterEqual(deep, shallow)

    def test_missing_motif(self):
        with self.assertRaises(ContractError):
            toy_reward(np.full((4, 30), 0.25), 3, self.oracle.motifs)

    def test_score_many_preserves_order(self):
        items = [(np.full((4, 30), 0.25), 0), (np.full((4, 30), 0.25), 1)]
        self.assertEqual(self.oracle.score_many(items), [self.oracle(*items[0]), self.oracle(*items[1])])


class TestWireFormat(unittest.TestCase):

    def test_request_layout(self):
        frame = encode_request(np.arange(8, dtype=np.float32).reshape(4, 2), 3)
        length, rows, cols = struct.unpack_from("<III", frame)
        self.assertEqual((length, rows, cols), (len(frame) - 4, 4, 2))
        matrix, cell = decode_request(frame[4:])
        np.testing.assert_array_equal(matrix, np.arange(8).reshape(4, 2))
        self.assertEqual(cell, 3)
        with self.assertRaises(ProtocolError):
            decode_request(frame[4:-1])

    def test_reply(self):
        self.assertEqual(decode_reply(encode_reply(1.5)[4:]), 1.5)
        with self.assertRaises(ProtocolError):
            decode_reply(encode_reply(float("nan"))[4:])
        with self.assertRaises(ProtocolError):
            decode_reply(b"\x00" * 4)

    def test_parse_endpoint(self):
        self.assertEqual(parse_endpoint("localhost:7070"), ("localhost", 7070))
        self.assertEqual(parse_endpoint(("127.0.0.1", 80)), ("127.0.0.1", 80))
        with self.assertRaises(ContractError):
            parse_endpoint("localhost")


class TestExternalOracle(unittest.TestCase):

    def test_constant_stub(self):
        with OracleServer(ConstantOracle(1.0)) as server:
            self.assertEqual(external_reward_stub(np.full((4, 10), 0.25), 0, server.endpoint), 1.0)

    def test_nan_reply(self):
        with OracleServer(ConstantOracle(float("nan"))) as server:
            with self.assertRaises(ProtocolError):
                ExternalOracle(server.endpoint)(np.full((4, 10), 0.25), 0)

    def test_oracle_failure_is_logged(self):
        with OracleServer(RaisingOracle()) as server:
            with self.assertLogs("src.reward.server", level="ERROR") as logs:
                with self.assertRaises((ProtocolError, TransportError)):
                    ExternalOracle(server.endpoint, timeout=5.0)(np.full((4, 10), 0.25), 3)
        self.assertIn("raising failed on cell 3", logs.output[0])
        self.assertIsInstance(logs.records[0].exc_info[1], RuntimeError)

    def test_large_matrix_round_trip(self):
        matrix = np.random.default_rng(0).standard_normal((4, 600)).astype(np.float32)
        received = []

        class Recorder(RewardOracle):
            def __call__(self, composed, cell):
                received.append(composed)
                return 0.0

        with OracleServer(Recorder()) as server:
            ExternalOracle(server.endpoint)(matrix, 2)
        np.testing.assert_array_equal(received[0], matrix)
        self.assertEqual(received[0].dtype, np.float32)

    def test_pipelined_batch(self):
        rng = np.random.default_rng(1)
        items = [(np.round(rng.standard_normal((4, 50)), 1).astype(np.float32), i % 4) for i in range(25)]
        with OracleServer(SumOracle()) as server:
            replies = ExternalOracle(server.endpoint).score_many(items)
        expected = [float(m.astype(np.float64).sum()) + 1000.0 * c for m, c in items]
        self.assertEqual(replies, expected)

    def test_unreachable(self):
        spare = socket.socket()
        spare.bind(("127.0.0.1", 0))
        port = spare.getsockname()[1]
        spare.close()
        oracle = ExternalOracle(f"127.0.0.1:{port}", timeout=1.0, retries=1)
        with self.assertRaises(TransportError) as ctx:
            oracle.ping()
        self.assertTrue(ctx.exception.retryable)


if __name__ == "__main__":
    unittest.main()
