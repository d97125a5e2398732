"""Gradient-flow simulation and the λ_min loss-decay bound.

Under gradient flow on L = ½‖y − y*‖² the residual obeys
dy/dt = H(t)(y* − y), so ‖y* − y(t)‖² ≤ exp(−λ_min t)·‖y* − y(0)‖².
The flow is integrated with explicit Euler steps and H(t) is recomputed at
every record point.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DivergenceError
from .gramkernel import SPECTRAL_CAP, fro_norm, gram, lambda_min
from .netbuild import Batch, NetworkInstance, per_example_output_grads
from .records import trajectory_csv
from .tensor import OpKind

BOUND_RTOL = 1e-6


@dataclass(frozen=True)
class FlowConfig:
    step: float | None = None
    horizon: float | None = None
    record_every: float | None = None
    default_steps: int = 2000
    records: int = 50
    enforce_guard: bool = True

    def __post_init__(self):
        for name in ("step", "horizon", "record_every"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ContractError(f"{name} must be positive, got {v}")


@dataclass
class FlowTrajectory:
    times: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lambda_mins: list[float] = field(default_factory=list)
    bound_values: list[float] = field(default_factory=list)
    fro_norms: list[float] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    step: float = 0.0
    wall_time: float | None = None

    def to_csv(self) -> str:
        return trajectory_csv(self.times, self.losses, self.lambda_mins, self.bound_values)


@dataclass
class BoundReport:
    holds: bool
    min_margin: float
    violations: list[int]
    lambda_positive: bool


def _spectrum(net: NetworkInstance, batch: Batch) -> tuple[float, float]:
    H = gram(per_example_output_grads(net, batch, "output"))
    return lambda_min(H), fro_norm(H)


def gradient_flow(net: NetworkInstance, batch: Batch, cfg: FlowConfig = FlowConfig()) -> FlowTrajectory:
    """Euler-integrate w' = −∂L/∂w from ``net``'s parameters (``net`` is untouched)."""
    if net.is_classifier:
        raise ContractError("gradient flow needs a scalar-output (sum head) network with MSE loss")
    if len(batch) > SPECTRAL_CAP:
        raise ContractError(f"{len(batch)} examples exceeds the spectral cap of {SPECTRAL_CAP}")
    t0 = time.perf_counter()
    work = net.clone()
    loss_graph = work.graph.with_loss(OpKind.MSE, reduction="sum")
    names = loss_graph.trainable()
    y_star = np.asarray(batch.targets, dtype=np.float64).reshape(-1)

    lam0, fro0 = _spectrum(work, batch)
    guard = 1.0 / (10.0 * fro0) if fro0 > 0 else 1.0
    mu = cfg.step if cfg.step is not None else guard
    if cfg.enforce_guard and mu > guard * (1 + 1e-12):
        raise ContractError(f"step {mu:g} exceeds the stability guard 1/(10·‖H(0)‖_F) = {guard:g}")
    horizon = cfg.horizon if cfg.horizon is not None else cfg.default_steps * mu
    n_steps = max(1, int(round(horizon / mu)))
    every = cfg.record_every if cfg.record_every is not None else horizon / cfg.records
    rec_steps = max(1, int(round(every / mu)))

    traj = FlowTrajectory(step=mu)
    loss0 = None
    for step in range(n_steps + 1):
        out = loss_graph.forward(batch.inputs, y_star)
        loss = 2.0 * out.item()
        if loss0 is None:
            loss0 = loss
        elif loss > 10.0 * loss0 and loss0 > 0:
            raise DivergenceError(f"loss grew from {loss0:g} to {loss:g} by t={step * mu:g}; use a smaller step than {mu:g}")
        if step % rec_steps == 0 or step == n_steps:
            t = step * mu
            lam, fro = (lam0, fro0) if step == 0 else _spectrum(work, batch)
            traj.times.append(t)
            traj.losses.append(loss)
            traj.lambda_mins.append(lam)
            traj.fro_norms.append(fro)
            traj.outputs.append(loss_graph.activation(work.graph.output_id).reshape(-1).copy())
            traj.bound_values.append(math.exp(-lam * t) * loss0)
        if step == n_steps:
            break
        grads = loss_graph.backward(out)
        for k in names:
            loss_graph.params[k].data -= mu * grads[k].data
    traj.wall_time = time.perf_counter() - t0
    return traj


def check_bound(traj: FlowTrajectory, rtol: float = BOUND_RTOL) -> BoundReport:
    """Check loss(t) ≤ exp(−λ̄ t)·loss(0) + rtol·loss(0) at every record.

    λ̄ is the running minimum of the recorded λ_min values up to t, a
    conservative stand-in for the time-varying rate.
    """
    if not traj.losses:
        return BoundReport(True, 0.0, [], True)
    loss0 = traj.losses[0]
    running = math.inf
    margins, violations = [], []
    for i, (t, loss, lam) in enumerate(zip(traj.times, traj.losses, traj.lambda_mins)):
        running = min(running, lam)
        bound = math.exp(-running * t) * loss0 + rtol * loss0
        margin = bound - loss
        margins.append(margin)
        if margin < 0:
            violations.append(i)
    return BoundReport(not violations, min(margins), violations, min(traj.lambda_mins) > 0)


def fnorm_bound_sweep(nets: list[NetworkInstance], batch: Batch) -> list[dict]:
    """λ_min(H(0)) and ‖H(0)‖_F per network, with the inequality checked per row."""
    rows = []
    for net in nets:
        lam, fro = _spectrum(net, batch)
        rows.append({"lambda_min": lam, "fro_norm": fro, "holds": lam <= fro})
    return rows
