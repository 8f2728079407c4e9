"""
Embedding generated inserts into a scoring context
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np

from src.data.sequences import one_hot, validate_bases
from src.errors import ContractError

FILLER = np.full(4, 0.25)


class ContextMode(str, Enum):
    IN_SITU = "in_situ"
    EX_SITU = "ex_situ"


@dataclass(frozen=True)
class Context:
    """
    mode ContextMode: in-situ (genomic locus) or ex-situ (filler columns)
    left np.ndarray: 4×F columns before the insert window
    right np.ndarray: 4×F' columns after the insert window
    insert_offset int: first column of the insert in the composed matrix
    insert_length int: width of the replaced window
    """
    mode: ContextMode
    left: np.ndarray
    right: np.ndarray
    insert_offset: int
    insert_length: int

    @classmethod
    def ex_situ(cls, flank: int, insert_length: int) -> "Context":
        if flank < 0:
            raise ContractError(f"flank must be >= 0, got: {flank}")
        filler = np.repeat(FILLER[:, None], flank, axis=1)
        return cls(ContextMode.EX_SITU, filler, filler.copy(), flank, insert_length)

    @classmethod
    def in_situ(cls, locus, insert_offset: int, insert_length: int) -> "Context":
        """
        locus str | np.ndarray: flanking locus as bases or a 4×N matrix; the
        window [insert_offset, insert_offset + insert_length) is replaced
        """
        matrix = one_hot(validate_bases(locus), dtype=np.float64) if isinstance(locus, str) else np.asarray(locus, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != 4:
            raise ContractError(f"locus must be 4×N, got {matrix.shape}")
        if insert_offset < 0 or insert_offset + insert_length > matrix.shape[1]:
            raise ContractError(f"insert window [{insert_offset}, {insert_offset + insert_length}) "
                                f"outside locus of length {matrix.shape[1]}")
        return cls(ContextMode.IN_SITU, matrix[:, :insert_offset].copy(),
                   matrix[:, insert_offset + insert_length:].copy(), insert_offset, insert_length)

    @property
    def total_length(self) -> int:
        return self.left.shape[1] + self.insert_length + self.right.shape[1]

    def extract(self, composed: np.ndarray) -> np.ndarray:
        return composed[..., self.insert_offset:self.insert_offset + self.insert_length]


def compose(insert: np.ndarray, ctx: Context) -> np.ndarray:
    """
    flank ‖ insert ‖ flank. The insert is copied bit-exactly and the context
    arrays are never written to.
    """
    insert = np.asarray(insert)
    if insert.ndim != 2 or insert.shape[0] != 4:
        raise ContractError(f"insert must be 4×L, got {insert.shape}")
    if insert.shape[1] != ctx.insert_length:
        raise ContractError(f"insert of length {insert.shape[1]} does not fit window of {ctx.insert_length}")
    return np.concatenate([ctx.left, insert.astype(np.float64), ctx.right], axis=1)
