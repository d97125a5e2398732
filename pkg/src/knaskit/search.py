"""KNAS top-k search, the random-search baseline, and speedup accounting."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, TypeVar

import numpy as np

from .archspace import SPACE_SIZE, Blueprint, CellGenotype, make_blueprints, parse_genotype, sample_cells
from .data import Dataset, scoring_batch
from .errors import ContractError
from .gramkernel import MgmConfig, score
from .netbuild import Batch, NetworkInstance, instantiate
from .records import RunReport, TrialRecord
from .stats import CorrelationReport, spearman
from .trainer import EvalCurve, TrainConfig, short_train, top1_select

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def default_threads() -> int:
    env = os.environ.get("KNASKIT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    """Order-preserving map; results never depend on ``threads``."""
    items = list(items)
    threads = threads or default_threads()
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def subseed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


@dataclass(frozen=True)
class CellSpace:
    """The cell search space together with the fixed macro skeleton."""

    width: int = 8
    n_cells: int = 3
    in_shape: tuple[int, ...] = (8, 8, 3)
    num_classes: int = 4

    @property
    def size(self) -> int:
        return SPACE_SIZE

    def sample(self, seed: int, n: int) -> list[CellGenotype]:
        return sample_cells(seed, n)

    def blueprint(self, cell: CellGenotype) -> Blueprint:
        return make_blueprints(
            "chain", self.width, cell, n_cells=self.n_cells, in_shape=self.in_shape, num_classes=self.num_classes
        )[0]

    def network(self, cell: CellGenotype, seed: int) -> NetworkInstance:
        return instantiate(self.blueprint(cell), subseed(seed, cell.index, 0x1))


@dataclass(frozen=True)
class SearchConfig:
    max_iterations: int = 100
    k: int = 20
    mgm: MgmConfig = field(default_factory=MgmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    score_batch: int = 32

    def __post_init__(self):
        if self.max_iterations < 1 or self.k < 1:
            raise ContractError("max_iterations and k must be positive")
        if self.k > self.max_iterations:
            raise ContractError(f"k={self.k} exceeds max_iterations={self.max_iterations}")


@dataclass
class SearchReport:
    policy: str
    best_genotype: CellGenotype
    trials: list[TrialRecord]
    scoring_time: float
    training_time: float
    k: int
    max_iterations: int
    flags: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def candidates(self) -> list[TrialRecord]:
        return [t for t in self.trials if t.curve is not None]

    @property
    def speedup(self) -> float | None:
        try:
            return speedup_accounting(self)
        except ContractError:
            return None

    def to_run_report(self) -> RunReport:
        return RunReport(
            config=self.config,
            trials=self.trials,
            timings={"scoring_time": self.scoring_time, "training_time": self.training_time},
            extra={
                "policy": self.policy,
                "best_genotype": str(self.best_genotype),
                "k": self.k,
                "max_iterations": self.max_iterations,
                "flags": self.flags,
            },
        )

    @classmethod
    def from_run_report(cls, r: RunReport) -> "SearchReport":
        e = r.extra
        return cls(
            e["policy"],
            parse_genotype(e["best_genotype"]),
            r.trials,
            r.timings.get("scoring_time"),
            r.timings.get("training_time"),
            e["k"],
            e["max_iterations"],
            list(e["flags"]),
            r.config,
        )


def config_to_dict(cfg: SearchConfig) -> dict:
    return asdict(cfg)


def rank_order(trials: list[TrialRecord]) -> list[TrialRecord]:
    """Scores descending, numeric failures last, ties by canonical genotype id."""

    def key(t: TrialRecord):
        ok = t.mgm is not None and t.mgm.numeric_ok
        return (not ok, -(t.mgm.value if ok else 0.0), t.genotype_id)

    return sorted(trials, key=key)


def score_genotypes(space: CellSpace, batch: Batch, genotypes: list[CellGenotype], cfg: SearchConfig, threads=None) -> list[TrialRecord]:
    """Score every genotype at init and assign MGM ranks (1 = highest)."""

    def one(g: CellGenotype) -> TrialRecord:
        net = space.network(g, cfg.seed)
        mcfg = replace(cfg.mgm, seed=subseed(cfg.mgm.seed, g.index, 0x2))
        return TrialRecord(str(g), g.index, cfg.seed, score(net, batch, mcfg))

    trials = parallel_map(one, genotypes, threads)
    for rank, t in enumerate(rank_order(trials), start=1):
        t.mgm_rank = rank
    return trials


def train_genotypes(space: CellSpace, data: Dataset, genotypes: list[CellGenotype], cfg: SearchConfig, threads=None) -> list[EvalCurve]:
    def one(g: CellGenotype) -> EvalCurve:
        net = space.network(g, cfg.seed)
        tcfg = replace(cfg.train, seed=subseed(cfg.train.seed, g.index, 0x3))
        return short_train(net, data.train, data.val, tcfg)

    return parallel_map(one, genotypes, threads)


def knas_search(space: CellSpace, data: Dataset, cfg: SearchConfig, threads: int | None = None) -> SearchReport:
    """Sample M cells, keep the top-k by MGM at init, train those, pick the best."""
    if space.size < cfg.max_iterations:
        raise ContractError(f"space holds {space.size} genotypes, fewer than M={cfg.max_iterations}")
    genotypes = space.sample(cfg.seed, cfg.max_iterations)
    batch = scoring_batch(data, cfg.score_batch, cfg.seed)
    trials = score_genotypes(space, batch, genotypes, cfg, threads)
    ranked = rank_order(trials)
    viable = [t for t in ranked if t.mgm.numeric_ok]
    flags = []
    if cfg.k == cfg.max_iterations:
        flags.append("k_equals_m")
    if len(viable) < cfg.k:
        log.warning("only %d of %d candidates scored without numeric failure", len(viable), cfg.k)
        flags.append(f"only_{len(viable)}_viable")
    kept = viable[: cfg.k]
    curves = train_genotypes(space, data, [parse_genotype(t.genotype) for t in kept], cfg, threads)
    for t, c in zip(kept, curves):
        t.curve = c
    best = top1_select([(parse_genotype(t.genotype), t.curve) for t in kept])
    return SearchReport(
        "knas",
        best,
        ranked,
        scoring_time=float(sum(t.mgm.wall_time for t in trials)),
        training_time=float(sum(c.wall_time for c in curves)),
        k=cfg.k,
        max_iterations=cfg.max_iterations,
        flags=flags,
        config=config_to_dict(cfg),
    )


def random_search_baseline(space: CellSpace, data: Dataset, budget_k: int, cfg: SearchConfig, threads: int | None = None) -> SearchReport:
    """Train ``budget_k`` uniformly sampled cells and keep the best by validation accuracy."""
    if budget_k < 1:
        raise ContractError("budget_k must be positive")
    genotypes = space.sample(cfg.seed, budget_k)
    curves = train_genotypes(space, data, genotypes, cfg, threads)
    trials = [TrialRecord(str(g), g.index, cfg.seed, curve=c) for g, c in zip(genotypes, curves)]
    best = top1_select(list(zip(genotypes, curves)))
    conf = config_to_dict(cfg)
    conf["budget_k"] = budget_k
    return SearchReport(
        "random",
        best,
        trials,
        scoring_time=0.0,
        training_time=float(sum(c.wall_time for c in curves)),
        k=budget_k,
        max_iterations=budget_k,
        config=conf,
    )


def correlation_study(
    space: CellSpace,
    data: Dataset,
    genotypes: list[CellGenotype],
    cfg: SearchConfig,
    permutations: int = 10_000,
    threads: int | None = None,
    trials: list[TrialRecord] | None = None,
) -> tuple[list[TrialRecord], CorrelationReport]:
    """Score (unless ``trials`` already carry scores) and train every genotype,
    then correlate MGM with final validation accuracy.

    Numeric failures and diverged runs are left out of the correlation.
    """
    if trials is None:
        trials = score_genotypes(space, scoring_batch(data, cfg.score_batch, cfg.seed), genotypes, cfg, threads)
    todo = [i for i, t in enumerate(trials) if t.val_acc is None]
    curves = train_genotypes(space, data, [genotypes[i] for i in todo], cfg, threads)
    for i, c in zip(todo, curves):
        trials[i].curve = c
    usable = [t for t in trials if t.val_acc is not None and t.mgm is not None and t.mgm.numeric_ok]
    corr = spearman([t.mgm.value for t in usable], [t.val_acc for t in usable], permutations, cfg.seed)
    return trials, corr


def speedup_accounting(report: SearchReport) -> float:
    """Full-evaluation cost over actual cost.

    Full evaluation trains all M sampled architectures; the actual cost is the
    scoring time plus training the k kept candidates.
    """
    cands = report.candidates
    if not cands or not report.training_time:
        raise ContractError("no training time recorded; the speedup ratio is undefined")
    mean_train = report.training_time / len(cands)
    full = report.max_iterations * mean_train
    actual = report.scoring_time + len(cands) * mean_train
    return full / actual
