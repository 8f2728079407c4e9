"""
Position weight matrices: file IO and log-odds scanning
"""
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.data.sequences import BASES
from src.errors import ContractError, ParseError

logger = logging.getLogger(__name__)

BUNDLED_MOTIFS = os.path.join(os.path.dirname(os.path.dirname(__file__)), "data", "motifs", "desk_motifs.txt")
UNIFORM = np.full(4, 0.25)

# representative factor of each default cell line, used by the synthetic corpus and the toy oracle
CELL_MOTIFS = {"K562": "GATA1", "HepG2": "HNF4A", "GM12878": "SPI1", "hESCT0": "POU5F1"}


@dataclass
class Pwm:
    """
    motif_id str: identifier from the `>MOTIF_ID` header
    matrix np.ndarray: 4×W base probabilities, rows A,C,G,T
    background np.ndarray: base frequencies the log-odds are taken against
    """
    motif_id: str
    matrix: np.ndarray
    background: np.ndarray = field(default_factory=lambda: UNIFORM.copy())

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != 4 or self.matrix.shape[1] < 1:
            raise ContractError(f"motif {self.motif_id}: matrix must be 4×W with W >= 1, got {self.matrix.shape}")
        if not np.allclose(self.matrix.sum(axis=0), 1.0, rtol=0, atol=1e-9):
            raise ContractError(f"motif {self.motif_id}: columns must sum to 1")
        if np.any(self.matrix <= 0):
            raise ContractError(f"motif {self.motif_id}: probabilities must be positive (load with a pseudocount)")

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    @property
    def log_odds(self) -> np.ndarray:
        return np.log(self.matrix / self.background[:, None])

    @property
    def consensus(self) -> str:
        return "".join(BASES[i] for i in np.argmax(self.matrix, axis=0))

    def max_score(self) -> float:
        return float(self.log_odds.max(axis=0).sum())


def window_scores(matrix: np.ndarray, pwm: Pwm) -> np.ndarray:
    """
    Log-odds score of every offset: sum over positions and bases of
    column[base] * log(pwm / background). Columns may be soft distributions.

    matrix np.ndarray: 4×N (or B×4×N) base probabilities
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[-1] < pwm.width:
        raise ContractError(f"input of length {matrix.shape[-1]} is shorter than motif {pwm.motif_id} ({pwm.width})")
    windows = sliding_window_view(matrix, pwm.width, axis=-1)
    return np.einsum("...bnw,bw->...n", windows, pwm.log_odds)


def max_score(matrix: np.ndarray, pwm: Pwm) -> float:
    return float(window_scores(matrix, pwm).max())


def read_pwm_file(path: str, pseudocount: float = 0.01) -> list:
    """
    Records separated by blank lines: `>MOTIF_ID` then 4 rows (A,C,G,T) of W
    values. Rows are normalized per column after adding `pseudocount`, so
    count matrices load too.
    """
    with open(path, "r", encoding="ascii") as handle:
        lines = handle.read().splitlines()

    motifs, motif_id, rows, start = [], None, [], 0

    def flush():
        if motif_id is None:
            return
        if len(rows) != 4:
            raise ParseError(f"motif {motif_id} has {len(rows)} rows, expected 4", line=start)
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise ParseError(f"motif {motif_id} rows have different widths {sorted(widths)}", line=start)
        values = np.array(rows, dtype=np.float64)
        if np.any(values < 0):
            raise ParseError(f"motif {motif_id} has negative entries", line=start)
        values = values + pseudocount
        motifs.append(Pwm(motif_id, values / values.sum(axis=0, keepdims=True)))

    for number, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith(">"):
            flush()
            motif_id, rows, start = stripped[1:].split()[0], [], number
            continue
        if motif_id is None:
            raise ParseError("matrix row before any >MOTIF_ID header", line=number)
        try:
            rows.append([float(v) for v in stripped.split()])
        except ValueError:
            raise ParseError(f"non-numeric matrix row {stripped!r}", line=number)
    flush()
    logger.debug("Read %d motifs from %s", len(motifs), path)
    return motifs


def write_pwm_file(path: str, motifs):
    blocks = []
    for pwm in motifs:
        rows = [" ".join(f"{v:.6g}" for v in row) for row in pwm.matrix]
        blocks.append("\n".join([f">{pwm.motif_id}"] + rows))
    with open(path, "w", encoding="ascii") as handle:
        handle.write("\n\n".join(blocks) + "\n")


def load_bundled_motifs(pseudocount: float = 0.0) -> dict:
    """The desk-scale motif set keyed by motif id."""
    return {pwm.motif_id: pwm for pwm in read_pwm_file(BUNDLED_MOTIFS, pseudocount=pseudocount)}
