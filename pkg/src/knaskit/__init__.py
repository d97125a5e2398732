"""Training-free architecture scoring with the mean of the gradient Gram matrix."""

from .archspace import CellGenotype, decode, encode, parse_genotype, sample_cells
from .errors import ContractError, DivergenceError, FormatError, KnasError, NoViableCandidate, NumericError
from .gramkernel import MgmConfig, MgmScore, gram, lambda_min, score
from .netbuild import Batch, instantiate
from .search import CellSpace, SearchConfig, knas_search, random_search_baseline

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "CellGenotype",
    "CellSpace",
    "ContractError",
    "DivergenceError",
    "FormatError",
    "KnasError",
    "MgmConfig",
    "MgmScore",
    "NoViableCandidate",
    "NumericError",
    "SearchConfig",
    "decode",
    "encode",
    "gram",
    "instantiate",
    "knas_search",
    "lambda_min",
    "parse_genotype",
    "random_search_baseline",
    "sample_cells",
    "score",
]
