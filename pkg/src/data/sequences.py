"""
Labeled DNA sequences: TSV ingestion, one-hot encoding, reverse complement and splits
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from src.errors import ConfigError, ContractError, ParseError
from src.tensor.checkpoint import atomic_write

logger = logging.getLogger(__name__)

BASES = "ACGT"
BASE_INDEX = {base: i for i, base in enumerate(BASES)}
COMPLEMENT = str.maketrans("ACGT", "TGCA")
HEADER = ("sequence", "cell")
DEFAULT_CELLS = ("K562", "HepG2", "GM12878", "hESCT0")


@dataclass(frozen=True)
class CellType:
    id: int
    name: str


class CellRegistry:
    """
    Dense cell-type ids in [0, num_cells) plus one reserved null id (== num_cells)
    used for the unconditional branch of classifier-free guidance.
    """

    def __init__(self, names=DEFAULT_CELLS):
        names = list(names)
        if not names:
            raise ConfigError("cell registry is empty")
        if len(set(names)) != len(names):
            raise ConfigError(f"cell registry has duplicate names: {names}")
        self.cells = [CellType(i, name) for i, name in enumerate(names)]
        self._by_name = {cell.name: cell for cell in self.cells}

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @property
    def null_id(self) -> int:
        return len(self.cells)

    @property
    def names(self) -> list:
        return [cell.name for cell in self.cells]

    def lookup(self, name: str) -> CellType:
        if name not in self._by_name:
            raise ConfigError(f"unknown cell '{name}', registry is: {', '.join(self.names)}")
        return self._by_name[name]

    def __getitem__(self, cell_id: int) -> CellType:
        return self.cells[cell_id]

    def __iter__(self):
        return iter(self.cells)

    def __len__(self):
        return len(self.cells)

    def __repr__(self):
        return f"CellRegistry({self.names})"


@dataclass(frozen=True)
class LabeledSequence:
    bases: str
    cell: CellType


def validate_bases(bases: str, expected_length: int = None, line: int = None) -> str:
    for position, base in enumerate(bases):
        if base not in BASE_INDEX:
            raise ParseError(f"invalid base {base!r} at position {position}", line=line)
    if expected_length is not None and len(bases) != expected_length:
        raise ParseError(f"sequence length {len(bases)}, expected {expected_length}", line=line)
    return bases


def load_dataset(path: str, expected_length: int, registry: CellRegistry) -> list:
    """
    Read a `SEQUENCE<TAB>CELL_NAME` file. A leading `sequence<TAB>cell` header is skipped.

    path str: TSV file
    expected_length int: required length of every sequence
    registry CellRegistry: names allowed in the cell column
    """
    try:
        frame = pd.read_csv(path, sep="\t", header=None, dtype=str, keep_default_na=False,
                            skip_blank_lines=False)
    except pd.errors.EmptyDataError:
        frame = pd.DataFrame(columns=[0, 1])
    except pd.errors.ParserError as e:
        raise ParseError(f"{path}: expected SEQUENCE<TAB>CELL_NAME records ({e})")

    if frame.shape[1] != 2 and len(frame):
        if all(_blank(v) for v in frame.to_numpy().ravel()):
            frame = pd.DataFrame(columns=[0, 1])
        else:
            raise ParseError(f"{path}: expected 2 columns, found {frame.shape[1]}")

    records = []
    first = True
    # one frame row per physical line, blank ones included
    for row, (bases, name) in enumerate(frame.itertuples(index=False, name=None)):
        line = row + 1
        if _blank(bases) and _blank(name):
            continue
        if first and (bases, name) == HEADER:
            first = False
            continue
        first = False
        if not isinstance(name, str) or name == "":
            raise ParseError("missing cell name", line=line)
        validate_bases(bases, expected_length, line=line)
        try:
            cell = registry.lookup(name)
        except ConfigError as e:
            raise ParseError(str(e), line=line)
        records.append(LabeledSequence(bases, cell))

    counts = counts_by_cell(records, registry)
    logger.info("Loaded %d sequences from %s: %s", len(records), path,
                ", ".join(f"{k}={v}" for k, v in counts.items()))
    return records


def _blank(value) -> bool:
    return not isinstance(value, str) or value.strip() == ""


def counts_by_cell(records, registry: CellRegistry) -> pd.Series:
    names = pd.Series([r.cell.name for r in records], dtype=object)
    return names.value_counts().reindex(registry.names, fill_value=0)


def write_dataset(path: str, records):
    """Write records as TSV with the `sequence<TAB>cell` header."""
    lines = ["\t".join(HEADER)] + [f"{r.bases}\t{r.cell.name}" for r in records]
    atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def one_hot(seq, dtype=np.float32) -> np.ndarray:
    """
    4×L matrix with rows A,C,G,T and exactly one 1 per column.

    seq LabeledSequence | str: validated sequence
    """
    bases = seq.bases if isinstance(seq, LabeledSequence) else seq
    matrix = np.zeros((4, len(bases)), dtype=dtype)
    matrix[[BASE_INDEX[b] for b in bases], np.arange(len(bases))] = 1
    return matrix


def one_hot_batch(records, dtype=np.float32) -> np.ndarray:
    return np.stack([one_hot(r, dtype) for r in records]) if records else np.zeros((0, 4, 0), dtype=dtype)


def decode(x: np.ndarray) -> str:
    """Per-column argmax; ties resolve to the lowest base index (A<C<G<T)."""
    return "".join(BASES[i] for i in np.argmax(x, axis=0))


def reverse_complement(x: np.ndarray) -> np.ndarray:
    """
    Reverse the position axis and swap A<->T, C<->G. With rows ordered A,C,G,T
    the swap is a row reversal. Works on 4×L and B×4×L arrays.
    """
    return np.ascontiguousarray(x[..., ::-1, ::-1])


def reverse_complement_str(bases: str) -> str:
    return bases.translate(COMPLEMENT)[::-1]


def augment_batch(batch: np.ndarray, rng, p: float = 0.5) -> np.ndarray:
    """Reverse-complement each sample of a B×4×L batch independently with probability p."""
    flip = rng.random(len(batch)) < p
    out = batch.copy()
    out[flip] = reverse_complement(batch[flip])
    return out


def split(data, val_fraction: float, seed: int):
    """
    Stratified, seeded train/validation split. Each cell contributes
    floor(val_fraction * n_cell) records to validation; input order is kept.

    Returns:
        (train, val) lists
    """
    if not 0.0 < val_fraction < 1.0:
        raise ContractError(f"val_fraction must be in (0, 1), got: {val_fraction}")
    rng = np.random.default_rng(seed)
    by_cell = {}
    for index, record in enumerate(data):
        by_cell.setdefault(record.cell.id, []).append(index)
    val_indices = set()
    for cell_id in sorted(by_cell):
        indices = np.array(by_cell[cell_id])
        n_val = int(np.floor(val_fraction * len(indices)))
        val_indices.update(rng.permutation(indices)[:n_val].tolist())
    train = [r for i, r in enumerate(data) if i not in val_indices]
    val = [r for i, r in enumerate(data) if i in val_indices]
    return train, val


def random_sequences(n: int, length: int, rng) -> list:
    """Uniform random base strings, the Random control of the evaluation."""
    draws = rng.integers(0, 4, size=(n, length))
    return ["".join(BASES[i] for i in row) for row in draws]
