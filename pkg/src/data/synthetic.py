"""
Planted-motif corpora for desk-scale runs
"""
import logging

import numpy as np

from src.data.sequences import BASES, LabeledSequence, validate_bases
from src.errors import ContractError

logger = logging.getLogger(__name__)


def make_synthetic(num_per_cell: int, length: int, motifs: dict, seed: int) -> list:
    """
    Uniform-random background with the cell's consensus planted at a uniform offset.

    num_per_cell int: sequences generated per cell type
    length int: sequence length
    motifs dict[CellType, str]: consensus string per cell
    seed int: generator seed, identical seeds give identical corpora
    """
    for cell, consensus in motifs.items():
        validate_bases(consensus)
        if len(consensus) > length:
            raise ContractError(f"motif for {cell.name} has width {len(consensus)} > sequence length {length}")

    rng = np.random.default_rng(seed)
    records = []
    for cell in sorted(motifs, key=lambda c: c.id):
        consensus = motifs[cell]
        for _ in range(num_per_cell):
            background = rng.integers(0, 4, size=length)
            offset = int(rng.integers(0, length - len(consensus) + 1))
            chars = [BASES[i] for i in background]
            chars[offset:offset + len(consensus)] = consensus
            records.append(LabeledSequence("".join(chars), cell))
    logger.info("Generated %d synthetic sequences (%d per cell, length %d)", len(records), num_per_cell, length)
    return records
