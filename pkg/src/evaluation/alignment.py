"""
Seed-and-extend alignment for the memorization and self-alignment metrics
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.data.sequences import BASE_INDEX, random_sequences, reverse_complement_str
from src.errors import ContractError
from src.parallel import map_ordered

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignmentParams:
    """
    k int: exact seed length
    min_len int: shortest reported hit
    min_identity float: lowest fraction of matching positions in a hit
    """
    k: int = 11
    min_len: int = 20
    min_identity: float = 0.9

    def validate(self):
        if self.k < 4:
            raise ContractError(f"k must be >= 4, got: {self.k}")
        if self.k > self.min_len:
            raise ContractError(f"k ({self.k}) must not exceed min_len ({self.min_len})")
        if not 0.0 < self.min_identity <= 1.0:
            raise ContractError(f"min_identity must be in (0, 1], got: {self.min_identity}")
        return self


@dataclass(frozen=True)
class AlignmentHit:
    """
    query_start and target_start are forward-strand offsets. For strand "-"
    the query window aligns to the reverse complement of the target window.
    """
    query_id: int
    target_id: int
    query_start: int
    target_start: int
    length: int
    identity: float
    strand: str = "+"


def encode(seq: str) -> np.ndarray:
    return np.fromiter((BASE_INDEX[b] for b in seq), dtype=np.int8, count=len(seq))


def kmer_codes(codes: np.ndarray, k: int) -> np.ndarray:
    """Base-4 integer of every k-mer, one per start offset."""
    if len(codes) < k:
        return np.zeros(0, dtype=np.int64)
    weights = 4 ** np.arange(k - 1, -1, -1, dtype=np.int64)
    return sliding_window_view(codes.astype(np.int64), k) @ weights


class KmerIndex:
    """
    Sorted k-mer table over both strands of every target.

    targets list[str]: indexed sequences
    k int: seed length
    """

    def __init__(self, targets, k: int):
        self.k = k
        self.targets = list(targets)
        self.strands = {"+": [encode(s) for s in self.targets],
                        "-": [encode(reverse_complement_str(s)) for s in self.targets]}
        codes, target_ids, strand_ids, positions = [], [], [], []
        for strand_id, strand in enumerate("+-"):
            for target_id, seq in enumerate(self.strands[strand]):
                kmers = kmer_codes(seq, k)
                codes.append(kmers)
                target_ids.append(np.full(len(kmers), target_id, dtype=np.int64))
                strand_ids.append(np.full(len(kmers), strand_id, dtype=np.int8))
                positions.append(np.arange(len(kmers), dtype=np.int64))
        codes = np.concatenate(codes) if codes else np.zeros(0, dtype=np.int64)
        order = np.argsort(codes, kind="stable")
        self.codes = codes[order]
        self.target_ids = np.concatenate(target_ids)[order] if target_ids else codes
        self.strand_ids = np.concatenate(strand_ids)[order] if strand_ids else codes
        self.positions = np.concatenate(positions)[order] if positions else codes
        logger.debug("Indexed %d %d-mers over %d targets", len(self.codes), k, len(self.targets))

    def __len__(self):
        return len(self.targets)

    def seeded_diagonals(self, query_codes: np.ndarray) -> np.ndarray:
        """
        Unique (target_id, strand_id, diagonal) triples sharing at least one
        exact k-mer with the query; diagonal = target offset - query offset.
        """
        kmers = kmer_codes(query_codes, self.k)
        lo = np.searchsorted(self.codes, kmers, side="left")
        hi = np.searchsorted(self.codes, kmers, side="right")
        counts = hi - lo
        if not counts.sum():
            return np.zeros((0, 3), dtype=np.int64)
        query_pos = np.repeat(np.arange(len(kmers)), counts)
        rows = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi) if b > a])
        triples = np.stack([self.target_ids[rows], self.strand_ids[rows].astype(np.int64),
                            self.positions[rows] - query_pos], axis=1)
        return np.unique(triples, axis=0)


def best_window(matches: np.ndarray, params: AlignmentParams):
    """
    Longest window [i, j) of a diagonal's match vector that holds an exact
    k-run, spans at least min_len and reaches min_identity; ties go to the
    leftmost window.

    Returns:
        (start, length, matches) or None
    """
    n, k = len(matches), params.k
    if n < params.min_len:
        return None
    runs = sliding_window_view(matches, k).all(axis=1)
    if not runs.any():
        return None
    next_seed = np.full(n + 1, n + 1, dtype=np.int64)
    next_seed[:len(runs)] = _next_true(runs, n + 1)
    prefix = np.concatenate([[0], np.cumsum(matches)])
    i = np.arange(n + 1)[:, None]
    j = np.arange(n + 1)[None, :]
    length = j - i
    hits = prefix[None, :] - prefix[:, None]
    needed = np.ceil(params.min_identity * length - 1e-9)
    valid = (length >= params.min_len) & (hits >= needed) & (next_seed[:, None] + k <= j)
    if not valid.any():
        return None
    lengths = np.where(valid, length, -1)
    best = lengths.max()
    start = int(np.flatnonzero((lengths == best).any(axis=1))[0])
    return start, int(best), int(hits[start, start + best])


def _next_true(flags: np.ndarray, fill: int) -> np.ndarray:
    """For every offset, the first index >= offset where flags is True, else fill."""
    candidates = np.where(flags, np.arange(len(flags)), fill)
    return np.minimum.accumulate(candidates[::-1])[::-1]


def _scan_query(query_id: int, query: str, index: KmerIndex, params: AlignmentParams,
                exclude_self: bool = False, first_only: bool = False) -> list:
    codes = encode(query)
    hits = []
    for target_id, strand_id, diagonal in index.seeded_diagonals(codes):
        target_id, diagonal = int(target_id), int(diagonal)
        if exclude_self and target_id == query_id:
            continue
        strand = "+-"[int(strand_id)]
        target = index.strands[strand][target_id]
        q_lo = max(0, -diagonal)
        q_hi = min(len(codes), len(target) - diagonal)
        if q_hi - q_lo < params.min_len:
            continue
        matches = codes[q_lo:q_hi] == target[q_lo + diagonal:q_hi + diagonal]
        found = best_window(matches, params)
        if found is None:
            continue
        start, length, n_match = found
        query_start = q_lo + start
        target_start = query_start + diagonal
        if strand == "-":
            target_start = len(target) - (target_start + length)
        hits.append(AlignmentHit(query_id, target_id, query_start, target_start, length, n_match / length, strand))
        if first_only:
            break
    return hits


def scan(queries, index: KmerIndex, params: AlignmentParams, exclude_self: bool = False,
         first_only: bool = False) -> list:
    """Hits of every query against the index, one list per query, in query order."""
    params.validate()
    queries = list(queries)
    return map_ordered(lambda item: _scan_query(item[0], item[1], index, params, exclude_self, first_only),
                       list(enumerate(queries)))


def find_matches(queries, targets, k: int = 11, min_len: int = 20, min_identity: float = 0.9) -> list:
    """
    Ungapped high-identity hits of every query against both strands of every target.
    At most one hit per (query, target, strand, diagonal).

    Parameters:
        queries list[str]: sequences searched for
        targets list[str]: indexed sequences
        k int: seed length, at least 4
        min_len int: minimal hit length
        min_identity float: minimal identity in (0, 1]

    Returns:
        list[AlignmentHit]
    """
    params = AlignmentParams(k, min_len, min_identity).validate()
    index = KmerIndex(targets, k)
    return [hit for hits in scan(queries, index, params) for hit in hits]


def memorization_rate(generated, training, params: AlignmentParams = AlignmentParams()) -> float:
    """Fraction of generated sequences with at least one hit against the training set."""
    generated, training = list(generated), list(training)
    if not generated or not training:
        raise ContractError("memorization_rate needs nonempty generated and training sets")
    index = KmerIndex(training, params.k)
    hits = scan(generated, index, params, first_only=True)
    return sum(1 for h in hits if h) / len(generated)


def self_alignment_rate(generated, params: AlignmentParams = AlignmentParams()) -> float:
    """Fraction of generated sequences hitting a different member of the same set."""
    generated = list(generated)
    if len(generated) < 2:
        raise ContractError(f"self_alignment_rate needs at least 2 sequences, got: {len(generated)}")
    index = KmerIndex(generated, params.k)
    hits = scan(generated, index, params, exclude_self=True, first_only=True)
    return sum(1 for h in hits if h) / len(generated)


def hit_counts(queries, training, params: AlignmentParams = AlignmentParams(), exclude_self: bool = False) -> np.ndarray:
    """Number of distinct hits of each query against the training set (histogram data)."""
    index = KmerIndex(training, params.k)
    return np.array([len(h) for h in scan(queries, index, params, exclude_self=exclude_self)], dtype=np.int64)


@dataclass
class NullRate:
    mean: float
    low: float
    high: float
    replicates: int

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high


def _interval(values) -> NullRate:
    values = np.asarray(values, dtype=np.float64)
    half = 1.96 * values.std(ddof=1) / math.sqrt(len(values)) if len(values) > 1 else 0.0
    return NullRate(float(values.mean()), float(values.mean() - half), float(values.mean() + half), len(values))


def calibrate_null(n_generated: int, n_training: int, length: int, replicates: int, seed: int,
                   params: AlignmentParams = AlignmentParams()) -> dict:
    """
    Monte Carlo rates of both metrics for uniform random sets, with a 95%
    normal-approximation interval over replicates.

    Returns:
        {"memorization": NullRate, "self_alignment": NullRate}
    """
    if replicates < 1:
        raise ContractError(f"replicates must be >= 1, got: {replicates}")
    memorization, self_alignment = [], []
    for replicate in range(replicates):
        rng = np.random.default_rng([seed, replicate])
        generated = random_sequences(n_generated, length, rng)
        training = random_sequences(n_training, length, rng)
        memorization.append(memorization_rate(generated, training, params))
        self_alignment.append(self_alignment_rate(generated, params))
    out = {"memorization": _interval(memorization), "self_alignment": _interval(self_alignment)}
    logger.info("Null memorization rate: %.4f [%.4f, %.4f]", out["memorization"].mean,
                out["memorization"].low, out["memorization"].high)
    return out
