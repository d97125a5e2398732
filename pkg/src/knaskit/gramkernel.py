"""Gram matrix of per-example gradients and the mean-of-Gram (MGM) scores.

Three estimators are provided:

* ``exact``: mean of every entry of ``H = G Gᵀ``.
* ``layer_sampled``: for each parameter tensor, restrict G to ``m`` sampled
  coordinates, take the mean of that restricted Gram matrix, and average
  over tensors.
* ``split_halves``: for each sampled coordinate, shuffle its n per-example
  gradients, dot the first half against the second half, and average.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .netbuild import Batch, NetworkInstance, per_example_output_grads

ESTIMATORS = ("exact", "layer_sampled", "split_halves")
SPECTRAL_CAP = 256


@dataclass
class GramMatrix:
    h: np.ndarray

    @property
    def n(self) -> int:
        return self.h.shape[0]


@dataclass(frozen=True)
class MgmConfig:
    m: int = 50
    seed: int = 0
    estimator: str = "split_halves"
    gradient_mode: str = "loss"

    def __post_init__(self):
        if self.m < 1:
            raise ContractError(f"per-layer samples must be >= 1, got {self.m}")
        if self.estimator not in ESTIMATORS:
            raise ContractError(f"unknown estimator {self.estimator!r}")
        if self.gradient_mode not in ("output", "loss"):
            raise ContractError(f"unknown gradient mode {self.gradient_mode!r}")


@dataclass
class MgmScore:
    value: float | None
    estimator: str
    wall_time: float | None = None
    numeric_ok: bool = True

    def __post_init__(self):
        if not self.numeric_ok:
            self.value = None


def gram(G: np.ndarray) -> GramMatrix:
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] < 1 or G.shape[1] < 1:
        raise ContractError(f"gradient matrix must be a non-empty [n, P] array, got shape {G.shape}")
    if not np.isfinite(G).all():
        raise NumericError("gradient matrix has non-finite entries")
    h = G @ G.T
    # G Gᵀ is symmetric in exact arithmetic; enforce it bitwise
    return GramMatrix(0.5 * (h + h.T))


def mgm_exact(H: GramMatrix) -> MgmScore:
    return MgmScore(float(H.h.mean()), "exact")


def lambda_min(H: GramMatrix, cap: int = SPECTRAL_CAP) -> float:
    if H.n > cap:
        raise ContractError(f"{H.n} examples exceeds the spectral cap of {cap}; subsample the batch")
    return float(np.linalg.eigvalsh(H.h)[0])


def fro_norm(H: GramMatrix) -> float:
    return float(np.sqrt(np.sum(H.h**2)))


# -- estimators working on a precomputed gradient matrix ---------------------


def _sample_columns(slices: list[tuple[str, slice]], m: int, rng: np.random.Generator) -> list[np.ndarray]:
    picked = []
    clamped = []
    for name, sl in slices:
        size = sl.stop - sl.start
        if size == 0:
            warnings.warn(f"parameter tensor {name!r} is empty; skipped", stacklevel=3)
            continue
        if m > size:
            clamped.append(name)
        take = min(m, size)
        picked.append(sl.start + np.sort(rng.choice(size, size=take, replace=False)))
    if clamped:
        warnings.warn(f"m={m} exceeds the size of {len(clamped)} parameter tensor(s); sampling all of their entries", stacklevel=3)
    if not picked:
        raise ContractError("every parameter tensor was empty; nothing to score")
    return picked


def layer_sampled_from_grads(G: np.ndarray, slices: list[tuple[str, slice]], m: int, rng: np.random.Generator) -> float:
    n = G.shape[0]
    total = 0.0
    cols = _sample_columns(slices, m, rng)
    sizes = {sl.start: sl.stop - sl.start for _, sl in slices}
    for idx in cols:
        # rescale by size/m so each layer term is unbiased for its full Gram mean
        scale = sizes[_owner(idx[0], slices)] / len(idx)
        col_sums = G[:, idx].sum(axis=0)
        total += scale * np.sum(col_sums**2) / n**2
    return total / len(cols)


def _owner(col: int, slices: list[tuple[str, slice]]) -> int:
    for _, sl in slices:
        if sl.start <= col < sl.stop:
            return sl.start
    raise ContractError(f"column {col} lies outside every parameter tensor")


def split_halves_from_grads(G: np.ndarray, slices: list[tuple[str, slice]], m: int, rng: np.random.Generator) -> float:
    n = G.shape[0]
    if n % 2:
        raise ContractError(f"split-halves needs an even example count, got {n}; drop one example")
    cols = _sample_columns(slices, m, rng)
    perm = rng.permutation(n)
    first, second = G[perm[: n // 2]], G[perm[n // 2 :]]
    per_tensor = [np.mean(np.sum(first[:, idx] * second[:, idx], axis=0)) for idx in cols]
    return float(np.mean(per_tensor))


def _score(net: NetworkInstance, batch: Batch, cfg: MgmConfig, fn) -> MgmScore:
    t0 = time.perf_counter()
    try:
        G = per_example_output_grads(net, batch, cfg.gradient_mode)
    except NumericError:
        return MgmScore(None, cfg.estimator, time.perf_counter() - t0, numeric_ok=False)
    if not np.isfinite(G).all():
        return MgmScore(None, cfg.estimator, time.perf_counter() - t0, numeric_ok=False)
    value = fn(G)
    ok = bool(np.isfinite(value))
    return MgmScore(float(value) if ok else None, cfg.estimator, time.perf_counter() - t0, ok)


def mgm_layer_sampled(net: NetworkInstance, batch: Batch, cfg: MgmConfig) -> MgmScore:
    if cfg.estimator != "layer_sampled":
        raise ContractError(f"config selects estimator {cfg.estimator!r}, not 'layer_sampled'")
    rng = np.random.default_rng([cfg.seed, 0x4C53])
    return _score(net, batch, cfg, lambda G: layer_sampled_from_grads(G, net.param_slices(), cfg.m, rng))


def mgm_split_halves(net: NetworkInstance, batch: Batch, cfg: MgmConfig) -> MgmScore:
    if cfg.estimator != "split_halves":
        raise ContractError(f"config selects estimator {cfg.estimator!r}, not 'split_halves'")
    if len(batch) % 2:
        raise ContractError(f"split-halves needs an even batch, got {len(batch)}; drop one example")
    rng = np.random.default_rng([cfg.seed, 0x5348])
    return _score(net, batch, cfg, lambda G: split_halves_from_grads(G, net.param_slices(), cfg.m, rng))


def score(net: NetworkInstance, batch: Batch, cfg: MgmConfig) -> MgmScore:
    """Dispatch on ``cfg.estimator``."""
    if cfg.estimator == "exact":
        return _score(net, batch, cfg, lambda G: mgm_exact(gram(G)).value)
    if cfg.estimator == "layer_sampled":
        return mgm_layer_sampled(net, batch, cfg)
    return mgm_split_halves(net, batch, cfg)
