"""
Motif usage profiles and their Jensen-Shannon distance
"""
import logging
import threading
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import jensenshannon

from src.data.sequences import one_hot_batch, reverse_complement
from src.errors import ContractError
from src.reward.pwm import Pwm, window_scores

logger = logging.getLogger(__name__)

NULL_DRAWS = 200_000
# a window must beat the threshold by more than this
SCORE_TOL = 1e-9

_thresholds = {}
_lock = threading.Lock()


@dataclass
class MotifProfile:
    """
    counts dict[str, int]: sequences with at least one hit, per motif id
    total int: sum of counts
    """
    counts: dict = field(default_factory=dict)
    total: int = 0

    def __post_init__(self):
        if any(c < 0 for c in self.counts.values()):
            raise ContractError("motif counts must be nonnegative")
        self.total = int(sum(self.counts.values()))


def null_threshold(pwm: Pwm, quantile: float = 0.999, draws: int = NULL_DRAWS) -> float:
    """
    The given quantile of the motif's log-odds over uniform random windows.
    Seeded from the motif id and cached per (motif, quantile, draws).
    """
    if not 0.0 < quantile < 1.0:
        raise ContractError(f"quantile must be in (0, 1), got: {quantile}")
    key = (pwm.motif_id, pwm.matrix.tobytes(), pwm.background.tobytes(), quantile, draws)
    with _lock:
        if key in _thresholds:
            return _thresholds[key]
    rng = np.random.default_rng(zlib.crc32(pwm.motif_id.encode("utf-8")))
    bases = rng.integers(0, 4, size=(draws, pwm.width))
    scores = pwm.log_odds[bases, np.arange(pwm.width)].sum(axis=1)
    threshold = float(np.quantile(scores, quantile))
    with _lock:
        _thresholds[key] = threshold
    logger.debug("Threshold of %s at quantile %g: %.4f", pwm.motif_id, quantile, threshold)
    return threshold


def _present(batch: np.ndarray, pwm: Pwm, threshold: float) -> np.ndarray:
    """Per sequence: does any window on either strand score above threshold."""
    if batch.shape[-1] < pwm.width:
        return np.zeros(len(batch), dtype=bool)
    forward = window_scores(batch, pwm).max(axis=-1)
    backward = window_scores(reverse_complement(batch), pwm).max(axis=-1)
    return np.maximum(forward, backward) > threshold + SCORE_TOL


def motif_profile(sequences, motifs, threshold_quantile: float = 0.999) -> MotifProfile:
    """
    Count sequences (not occurrences) holding at least one window, on
    either strand, whose score exceeds the motif's null-calibrated threshold.

    Parameters:
        sequences list[str]: base strings, possibly of different lengths
        motifs list[Pwm]: motif set, nonempty
        threshold_quantile float: null quantile used as threshold

    Returns:
        MotifProfile
    """
    motifs = list(motifs)
    if not motifs:
        raise ContractError("motif_profile needs at least one motif")
    counts = {pwm.motif_id: 0 for pwm in motifs}
    by_length = {}
    for seq in sequences:
        by_length.setdefault(len(seq), []).append(seq)
    for group in by_length.values():
        batch = one_hot_batch(group, dtype=np.float64)
        for pwm in motifs:
            counts[pwm.motif_id] += int(_present(batch, pwm, null_threshold(pwm, threshold_quantile)).sum())
    return MotifProfile(counts)


def js_distance(p: MotifProfile, q: MotifProfile) -> float:
    """
    sqrt of the base-2 Jensen-Shannon divergence between add-one smoothed
    motif frequencies over the union of both motif sets.
    """
    if p.total <= 0 or q.total <= 0:
        raise ContractError(f"js_distance needs positive totals, got: {p.total}, {q.total}")
    motif_ids = sorted(set(p.counts) | set(q.counts))
    a = np.array([p.counts.get(m, 0) for m in motif_ids], dtype=np.float64) + 1.0
    b = np.array([q.counts.get(m, 0) for m in motif_ids], dtype=np.float64) + 1.0
    return float(jensenshannon(a / a.sum(), b / b.sum(), base=2))
