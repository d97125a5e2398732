"""Lower blueprints to initialized graphs and extract per-example gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .archspace import BLOCK_TOPOLOGIES, Blueprint, CellGenotype
from .errors import ContractError, ShapeError
from .tensor import INPUT, Graph, OpKind


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        if len(self.inputs) < 2:
            raise ContractError(f"a batch needs at least 2 examples, got {len(self.inputs)}")
        if len(self.targets) != len(self.inputs):
            raise ShapeError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.targets[idx])


@dataclass
class NetworkInstance:
    graph: Graph
    blueprint: Blueprint
    seed: int
    scheme: str = "he-normal"
    _loss_graph: Graph | None = field(default=None, repr=False)

    @property
    def parameter_count(self) -> int:
        return self.graph.num_parameters()

    @property
    def is_classifier(self) -> bool:
        return self.blueprint.head == "classifier"

    @property
    def loss_kind(self) -> OpKind:
        return OpKind.SOFTMAX_XENT if self.is_classifier else OpKind.MSE

    @property
    def loss_graph(self) -> Graph:
        if self._loss_graph is None:
            self._loss_graph = self.graph.with_loss(self.loss_kind)
        return self._loss_graph

    def param_slices(self) -> list[tuple[str, slice]]:
        """Column ranges of each trainable tensor in a flattened gradient row."""
        out, start = [], 0
        for name in self.graph.trainable():
            size = self.graph.params[name].size
            out.append((name, slice(start, start + size)))
            start += size
        return out

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.graph.params[k].data.reshape(-1) for k in self.graph.trainable()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        for name, sl in self.param_slices():
            t = self.graph.params[name]
            t.data = np.asarray(flat[sl], dtype=np.float64).reshape(t.shape).copy()

    def clone(self) -> "NetworkInstance":
        """Independent copy sharing nothing mutable with ``self``."""
        g = Graph(self.graph.input_shape)
        g.nodes = list(self.graph.nodes)
        g.params = {k: t.copy() for k, t in self.graph.params.items()}
        return NetworkInstance(g, self.blueprint, self.seed, self.scheme)


class _Builder:
    def __init__(self, in_shape, rng: np.random.Generator):
        self.g = Graph(in_shape)
        self.rng = rng

    def _weight(self, name: str, shape: tuple[int, ...], fan_in: int, fan_out: int) -> tuple[str, str]:
        w = self.rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        self.g.add_param(f"{name}.w", w)
        self.g.add_param(f"{name}.b", np.zeros(fan_out))
        return f"{name}.w", f"{name}.b"

    def linear(self, x: int, d_out: int, name: str) -> int:
        d_in = int(np.prod(self.shape(x)))
        return self.g.add_node(OpKind.LINEAR, [x], self._weight(name, (d_out, d_in), d_in, d_out), name=name)

    def conv(self, x: int, c_out: int, k: int, name: str) -> int:
        c_in = self.shape(x)[-1]
        op = OpKind.CONV3X3 if k == 3 else OpKind.CONV1X1
        shape = (3, 3, c_in, c_out) if k == 3 else (c_in, c_out)
        return self.g.add_node(op, [x], self._weight(name, shape, c_in * k * k, c_out), name=name)

    def relu(self, x: int, name: str) -> int:
        return self.g.add_node(OpKind.RELU, [x], name=name)

    def add(self, xs: list[int], shape, name: str) -> int:
        xs = list(dict.fromkeys(xs))
        if len(xs) == 1:
            return xs[0]
        return self.g.add_node(OpKind.ADD, xs, name=name, shape=tuple(shape))

    def shape(self, x: int) -> tuple[int, ...]:
        return self.g.input_shape if x == INPUT else self.g.nodes[x].shape


def _lower_cell(b: _Builder, x: int, cell: CellGenotype, prefix: str) -> int:
    shape = b.shape(x)
    nodes = {0: x}
    for j in (1, 2, 3):
        contribs = []
        for i, op in cell.incoming(j):
            src = nodes[i]
            tag = f"{prefix}.e{i}{j}"
            if op == "skip":
                contribs.append(src)
            elif op in ("conv1x1", "conv3x3"):
                r = b.relu(src, f"{tag}.relu")
                contribs.append(b.conv(r, shape[-1], 3 if op == "conv3x3" else 1, f"{tag}.{op}"))
            elif op == "avgpool3x3":
                contribs.append(b.g.add_node(OpKind.AVGPOOL3X3, [src], name=f"{tag}.avgpool3x3"))
        if len(contribs) == 1:
            nodes[j] = contribs[0]
        else:
            # an empty add is an all-zero map
            nodes[j] = b.g.add_node(OpKind.ADD, contribs, name=f"{prefix}.n{j}", shape=shape)
    return nodes[3]


def _layer(b: _Builder, x: int, width: int, name: str) -> int:
    return b.relu(b.linear(x, width, name), f"{name}.relu")


def _lower_block_cell(b: _Builder, x: int, bp: Blueprint, width: int, prefix: str) -> int:
    n = bp.layers_per_cell
    outs = [_layer(b, x, width, f"{prefix}.l1")]
    for k in range(2, n):
        outs.append(_layer(b, outs[-1], width, f"{prefix}.l{k}"))
    if bp.topology == "highway":
        last_in = b.add([outs[0], outs[-1]], (width,), f"{prefix}.highway")
    elif bp.topology == "lookahead":
        # the cell input counts as an inner output
        last_in = b.add([x] + outs, (width,), f"{prefix}.lookahead")
    else:
        last_in = outs[-1]
    return _layer(b, last_in, width, f"{prefix}.l{n}")


def _head(b: _Builder, x: int, bp: Blueprint) -> None:
    if bp.head == "classifier":
        b.linear(x, bp.num_classes, "head")
    else:
        y = b.linear(x, 1, "head")
        b.g.add_node(OpKind.SUM_OUTPUT, [y], name="sum_output")


def lower(bp: Blueprint, rng: np.random.Generator) -> Graph:
    b = _Builder(bp.in_shape, rng)
    if bp.topology == "chain":
        if len(bp.in_shape) != 3:
            raise ShapeError(f"chain networks take [H,W,C] inputs, got {bp.in_shape}")
        x = b.conv(INPUT, bp.width, 3, "stem")
        for c, cell in enumerate(bp.cells):
            x = _lower_cell(b, x, cell, f"cell{c}")
        x = b.g.add_node(OpKind.GLOBAL_AVG_POOL, [x], name="gap")
    elif bp.topology in BLOCK_TOPOLOGIES:
        stem = _layer(b, INPUT, bp.width, "stem")
        x, history = stem, [stem]
        for c, width in enumerate(bp.cells):
            if bp.topology == "dense":
                x = b.add(history, (bp.width,), f"cell{c}.in")
            x = _lower_block_cell(b, x, bp, width, f"cell{c}")
            history.append(x)
    elif bp.topology == "mlp":
        x = INPUT
        for k, width in enumerate(bp.cells):
            x = _layer(b, x, width, f"fc{k}")
    else:
        x = INPUT
    _head(b, x, bp)
    b.g.topo_check()
    return b.g


def instantiate(blueprint: Blueprint, seed: int) -> NetworkInstance:
    """Build the graph and draw N(0, 2/fan_in) weights; biases start at zero."""
    rng = np.random.default_rng([seed, 0x1417])
    return NetworkInstance(lower(blueprint, rng), blueprint, seed)


def per_example_output_grads(net: NetworkInstance, batch: Batch, mode: str = "output") -> np.ndarray:
    """Return the ``[n, P]`` matrix whose row i is the gradient for example i.

    ``output`` mode differentiates the scalar network output (the target
    logit for classifiers); ``loss`` mode differentiates the example's loss.
    Each row comes from its own forward/backward pass on that example alone.
    """
    if mode not in ("output", "loss"):
        raise ContractError(f"gradient mode must be 'output' or 'loss', got {mode!r}")
    graph = net.graph if mode == "output" else net.loss_graph
    if mode == "output" and not net.is_classifier and graph.output_shape != (1,):
        raise ContractError(f"output mode needs a scalar per example, head gives {graph.output_shape}")
    names = graph.trainable()
    rows = np.empty((len(batch), net.parameter_count))
    for i in range(len(batch)):
        x = batch.inputs[i : i + 1]
        t = batch.targets[i : i + 1]
        if mode == "loss":
            out = graph.forward(x, t)
            grads = graph.vjp(np.ones_like(out.data))
        else:
            out = graph.forward(x)
            seed = np.zeros_like(out.data)
            if net.is_classifier:
                seed[0, int(t[0])] = 1.0
            else:
                seed[...] = 1.0
            grads = graph.vjp(seed)
        rows[i] = np.concatenate([grads[k].reshape(-1) for k in names])
    return rows
