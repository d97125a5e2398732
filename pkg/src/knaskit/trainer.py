"""Short SGD training runs and final-epoch candidate selection."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .archspace import CellGenotype
from .errors import ContractError, NoViableCandidate, NumericError
from .netbuild import Batch, NetworkInstance


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.005
    batch_size: int = 32
    seed: int = 0
    objective: str = "softmax_xent"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")
        if self.lr < 0:
            raise ContractError("learning rate must be non-negative")
        if self.objective not in ("softmax_xent", "mse"):
            raise ContractError(f"unknown objective {self.objective!r}")


@dataclass
class EvalCurve:
    train_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    wall_time: float | None = None
    diverged: bool = False

    @property
    def final_val_acc(self) -> float | None:
        return self.val_acc[-1] if self.val_acc else None

    @property
    def final_train_loss(self) -> float | None:
        return self.train_loss[-1] if self.train_loss else None


def evaluate(net: NetworkInstance, data: Batch, batch_size: int = 256) -> tuple[float, float | None]:
    """Return (mean loss, accuracy) on ``data``; accuracy is None for regression heads."""
    graph = net.loss_graph
    total_loss, correct = 0.0, 0
    for start in range(0, len(data), batch_size):
        x = data.inputs[start : start + batch_size]
        y = data.targets[start : start + batch_size]
        loss = graph.forward(x, y).item()
        total_loss += loss * (len(x) if net.is_classifier else 1.0)
        if net.is_classifier:
            logits = graph.activation(graph.output_id - 1)
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
    mean_loss = total_loss / len(data)
    return mean_loss, (correct / len(data) if net.is_classifier else None)


def short_train(net: NetworkInstance, train: Batch, val: Batch, cfg: TrainConfig) -> EvalCurve:
    """Plain constant-lr SGD on a private copy of ``net``'s parameters."""
    if len(train) == 0 or len(val) == 0:
        raise ContractError("training and validation data must be non-empty")
    expected = "softmax_xent" if net.is_classifier else "mse"
    if cfg.objective != expected:
        raise ContractError(f"objective {cfg.objective!r} does not match the network head ({expected})")
    t0 = time.perf_counter()
    work = net.clone()
    graph = work.loss_graph
    names = graph.trainable()
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    curve = EvalCurve()
    try:
        for _ in range(cfg.epochs):
            order = rng.permutation(len(train))
            epoch_loss, seen = 0.0, 0
            for start in range(0, len(train), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                out = graph.forward(train.inputs[idx], train.targets[idx])
                grads = graph.backward(out)
                if cfg.lr:
                    for k in names:
                        graph.params[k].data -= cfg.lr * grads[k].data
                epoch_loss += out.item() * len(idx)
                seen += len(idx)
            val_loss, val_acc = evaluate(work, val)
            curve.train_loss.append(epoch_loss / seen)
            curve.val_loss.append(val_loss)
            curve.val_acc.append(val_acc if val_acc is not None else float("nan"))
            if not np.isfinite(curve.train_loss[-1]):
                curve.diverged = True
                break
    except NumericError:
        curve.diverged = True
    curve.wall_time = time.perf_counter() - t0
    return curve


def top1_select(candidates: Sequence[tuple[CellGenotype, EvalCurve]]) -> CellGenotype:
    """Highest final validation accuracy; ties go to lower final train loss,
    then to the lower canonical genotype index."""
    if not candidates:
        raise ContractError("no candidates to select from")
    lengths = {len(c.val_acc) for _, c in candidates if not c.diverged}
    if len(lengths) > 1:
        raise ContractError(f"candidate curves differ in length: {sorted(lengths)}")
    viable = [(g, c) for g, c in candidates if not c.diverged and c.val_acc]
    if not viable:
        raise NoViableCandidate(f"all {len(candidates)} candidates diverged")
    best = min(viable, key=lambda gc: (-gc[1].final_val_acc, gc[1].final_train_loss, gc[0].index))
    return best[0]
