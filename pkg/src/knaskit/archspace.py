"""Architecture encodings: the 4-node / 6-edge cell space and macro topologies.

Cells are indexed base-5 over their edges, most significant digit first, so
index 0 is the all-``none`` cell and the encoding gives stable ids.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ContractError

OPS = ("none", "skip", "conv1x1", "conv3x3", "avgpool3x3")
EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
SPACE_SIZE = len(OPS) ** len(EDGES)

TOPOLOGIES = ("chain", "highway", "lookahead", "dense", "mlp", "linear")
BLOCK_TOPOLOGIES = ("highway", "lookahead", "dense")
LAYERS_PER_CELL = tuple(range(2, 12))


@dataclass(frozen=True, order=True)
class CellGenotype:
    edges: tuple[str, ...]

    def __post_init__(self):
        if len(self.edges) != len(EDGES):
            raise ContractError(f"a cell has {len(EDGES)} edges, got {len(self.edges)}")
        for pos, op in enumerate(self.edges):
            if op not in OPS:
                raise ContractError(f"edge {pos} {EDGES[pos]}: unknown op {op!r} (expected one of {', '.join(OPS)})")

    @property
    def index(self) -> int:
        return encode(self)

    def incoming(self, node: int) -> list[tuple[int, str]]:
        """Non-``none`` edges ending at ``node`` as (source, op) pairs."""
        return [(i, op) for (i, j), op in zip(EDGES, self.edges) if j == node and op != "none"]

    def __str__(self) -> str:
        return "|".join(self.edges)


def encode(cell: CellGenotype) -> int:
    idx = 0
    for op in cell.edges:
        idx = idx * len(OPS) + OPS.index(op)
    return idx


def decode(index: int) -> CellGenotype:
    if not 0 <= index < SPACE_SIZE:
        raise ContractError(f"cell index {index} outside [0, {SPACE_SIZE})")
    digits = []
    for _ in EDGES:
        index, d = divmod(index, len(OPS))
        digits.append(OPS[d])
    return CellGenotype(tuple(reversed(digits)))


def parse_genotype(text: str) -> CellGenotype:
    """Parse ``"none|skip|conv3x3|conv1x1|avgpool3x3|skip"``."""
    tokens = [t.strip() for t in text.split("|")]
    if len(tokens) != len(EDGES):
        raise ContractError(f"genotype {text!r} has {len(tokens)} edge tokens, expected {len(EDGES)}")
    bad = [(pos, tok) for pos, tok in enumerate(tokens) if tok not in OPS]
    if bad:
        desc = ", ".join(f"edge {pos} {EDGES[pos]} token {tok!r}" for pos, tok in bad)
        raise ContractError(f"bad genotype {text!r}: {desc}; valid ops are {', '.join(OPS)}")
    return CellGenotype(tuple(tokens))


def enumerate_cells() -> Iterator[CellGenotype]:
    for combo in itertools.product(OPS, repeat=len(EDGES)):
        yield CellGenotype(combo)


def sample_cells(seed: int, n: int) -> list[CellGenotype]:
    """Draw ``n`` distinct cells without replacement, reproducibly."""
    if not 1 <= n <= SPACE_SIZE:
        raise ContractError(f"cannot sample {n} cells from a space of {SPACE_SIZE}")
    rng = np.random.default_rng([seed, 0x5A4D])
    return [decode(int(i)) for i in rng.choice(SPACE_SIZE, size=n, replace=False)]


@dataclass(frozen=True)
class Blueprint:
    """Macro description of a network.

    ``chain`` stacks copies of one cell over image inputs. The block
    topologies (``highway``, ``lookahead``, ``dense``) and ``mlp`` operate on
    flattened inputs with linear+ReLU layers of width ``width``; for those
    ``cells`` holds one width per cell (or per hidden layer for ``mlp``).
    """

    topology: str
    cells: tuple = ()
    in_shape: tuple[int, ...] = (8, 8, 3)
    width: int = 8
    head: str = "classifier"
    num_classes: int = 4
    layers_per_cell: int | None = None

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ContractError(f"unknown topology {self.topology!r}")
        if self.head not in ("classifier", "sum"):
            raise ContractError(f"unknown head {self.head!r}")
        if self.topology in BLOCK_TOPOLOGIES and self.layers_per_cell not in LAYERS_PER_CELL:
            raise ContractError(f"{self.topology} needs layers_per_cell in 2..11, got {self.layers_per_cell}")
        if self.topology == "chain" and not all(isinstance(c, CellGenotype) for c in self.cells):
            raise ContractError("chain blueprints hold CellGenotype cells")

    @property
    def genotype(self) -> CellGenotype | None:
        if self.topology == "chain" and self.cells:
            return self.cells[0]
        return None


def make_blueprints(
    topology: str,
    width: int = 8,
    cell: CellGenotype | None = None,
    *,
    n_cells: int = 3,
    in_shape: tuple[int, ...] = (8, 8, 3),
    head: str = "classifier",
    num_classes: int = 4,
) -> list[Blueprint]:
    if topology == "chain":
        if cell is None:
            raise ContractError("chain topology needs a cell genotype")
        return [Blueprint("chain", (cell,) * n_cells, in_shape, width, head, num_classes)]
    if topology in BLOCK_TOPOLOGIES:
        return [
            Blueprint(topology, (width,) * n_cells, in_shape, width, head, num_classes, layers_per_cell=lpc)
            for lpc in LAYERS_PER_CELL
        ]
    if topology == "mlp":
        return [Blueprint("mlp", (width,) * n_cells, in_shape, width, head, num_classes)]
    if topology == "linear":
        return [Blueprint("linear", (), in_shape, width, head, num_classes)]
    raise ContractError(f"unknown topology {topology!r}")
