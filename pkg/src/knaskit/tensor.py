"""Dense float64 tensors and a static computation graph with reverse-mode
differentiation.

Every array carries a leading batch dimension; image activations are laid out
``[B, H, W, C]`` and conv kernels ``[3, 3, C_in, C_out]`` / ``[C_in, C_out]``. A :class:`Graph` is built once
(nodes appended in topological order), then run with :meth:`Graph.forward`
and differentiated with :meth:`Graph.backward` or :meth:`Graph.vjp`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError, ShapeError, StateError

INPUT = -1
TARGET = -2


@dataclass(eq=False)
class Tensor:
    data: np.ndarray
    requires_grad: bool = False
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.array(self.data, dtype=np.float64)
        if self.data.ndim == 0:
            self.data = self.data.reshape(1)
        if any(s <= 0 for s in self.data.shape):
            raise ShapeError(f"tensor extents must be positive, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NumericError("tensor holds non-finite values")
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError("grad shape differs from data shape")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.requires_grad, None if self.grad is None else self.grad.copy())


class OpKind(str, enum.Enum):
    LINEAR = "linear"
    CONV1X1 = "conv1x1"
    CONV3X3 = "conv3x3"
    AVGPOOL3X3 = "avgpool3x3"
    RELU = "relu"
    ADD = "add"
    GLOBAL_AVG_POOL = "global_avg_pool"
    SUM_OUTPUT = "sum_output"
    SOFTMAX_XENT = "softmax_xent"
    MSE = "mse"


LOSS_OPS = (OpKind.SOFTMAX_XENT, OpKind.MSE)


@dataclass
class Node:
    op: OpKind
    inputs: tuple[int, ...]
    params: tuple[str, ...] = ()
    name: str = ""
    attrs: dict[str, Any] = field(default_factory=dict)
    # per-example output shape, batch dimension excluded
    shape: tuple[int, ...] = ()


# -- kernels -----------------------------------------------------------------


def _pad(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c))
    xp[:, 1:-1, 1:-1] = x
    return xp


def _im2col(x: np.ndarray) -> np.ndarray:
    """[B,H,W,C] -> [B*H*W, 9*C] patches ordered (dy, dx, c) to match HWIO kernels."""
    b, h, w, c = x.shape
    win = sliding_window_view(_pad(x), (3, 3), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * c)


def _box3x3(x: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 box sum over the spatial axes."""
    _, h, w, _ = x.shape
    xp = _pad(x)
    out = np.zeros_like(x)
    for di in range(3):
        for dj in range(3):
            out += xp[:, di : di + h, dj : dj + w]
    return out


def _forward_op(node: Node, xs: list[np.ndarray], ps: list[np.ndarray], target, batch: int):
    """Return (output, cache) for one node."""
    op = node.op
    if op is OpKind.LINEAR:
        x = xs[0].reshape(xs[0].shape[0], -1)
        w, b = ps
        return x @ w.T + b, x
    if op is OpKind.CONV1X1:
        x = xs[0]
        w, b = ps
        return x @ w + b, None
    if op is OpKind.CONV3X3:
        x = xs[0]
        w, b = ps
        cols = _im2col(x)
        out = cols @ w.reshape(-1, w.shape[3]) + b
        return out.reshape(x.shape[:3] + (w.shape[3],)), cols
    if op is OpKind.AVGPOOL3X3:
        return _box3x3(xs[0]) / 9.0, None
    if op is OpKind.RELU:
        mask = xs[0] > 0
        return xs[0] * mask, mask
    if op is OpKind.ADD:
        if not xs:
            return np.zeros((batch,) + node.shape), None
        out = xs[0].copy()
        for x in xs[1:]:
            out += x
        return out, None
    if op is OpKind.GLOBAL_AVG_POOL:
        return xs[0].mean(axis=(1, 2)), xs[0].shape
    if op is OpKind.SUM_OUTPUT:
        x = xs[0]
        return x.reshape(x.shape[0], -1).sum(axis=1, keepdims=True), x.shape
    if op is OpKind.SOFTMAX_XENT:
        logits = xs[0]
        labels = np.asarray(target).astype(np.int64).reshape(-1)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -logp[np.arange(len(labels)), labels].mean()
        return np.array([loss]), (logp, labels)
    if op is OpKind.MSE:
        y = xs[0].reshape(xs[0].shape[0], -1)
        t = np.asarray(target, dtype=np.float64).reshape(y.shape[0], -1)
        resid = y - t
        loss = 0.5 * np.sum(resid**2)
        if node.attrs.get("reduction", "sum") == "mean":
            loss /= y.shape[0]
        return np.array([loss]), resid
    raise ContractError(f"unknown op {op!r}")


def _backward_op(node: Node, g: np.ndarray, xs: list[np.ndarray], ps: list[np.ndarray], cache):
    """Return (input grads, param grads) for one node given the output grad."""
    op = node.op
    if op is OpKind.LINEAR:
        x = cache
        w, _ = ps
        dx = (g @ w).reshape(xs[0].shape)
        return [dx], [g.T @ x, g.sum(axis=0)]
    if op is OpKind.CONV1X1:
        x = xs[0]
        w, _ = ps
        g2 = g.reshape(-1, w.shape[1])
        dw = x.reshape(-1, w.shape[0]).T @ g2
        return [g @ w.T], [dw, g2.sum(axis=0)]
    if op is OpKind.CONV3X3:
        cols = cache
        w, _ = ps
        g2 = g.reshape(-1, w.shape[3])
        dw = (cols.T @ g2).reshape(w.shape)
        # input grad is the same-padded correlation of g with the flipped kernel
        flipped = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, w.shape[2])
        dx = _im2col(g) @ flipped
        return [dx.reshape(xs[0].shape)], [dw, g2.sum(axis=0)]
    if op is OpKind.AVGPOOL3X3:
        return [_box3x3(g) / 9.0], []
    if op is OpKind.RELU:
        return [g * cache], []
    if op is OpKind.ADD:
        return [g] * len(xs), []
    if op is OpKind.GLOBAL_AVG_POOL:
        _, h, wd, _ = cache
        return [np.broadcast_to(g[:, None, None, :] / (h * wd), cache).copy()], []
    if op is OpKind.SUM_OUTPUT:
        return [np.broadcast_to(g.reshape(-1, *([1] * (len(cache) - 1))), cache).copy()], []
    if op is OpKind.SOFTMAX_XENT:
        logp, labels = cache
        d = np.exp(logp)
        d[np.arange(len(labels)), labels] -= 1.0
        return [d * (g[0] / len(labels))], []
    if op is OpKind.MSE:
        resid = cache
        scale = g[0] / resid.shape[0] if node.attrs.get("reduction", "sum") == "mean" else g[0]
        return [(resid * scale).reshape(xs[0].shape)], []
    raise ContractError(f"unknown op {op!r}")


# -- shape inference ---------------------------------------------------------


def _infer_shape(op: OpKind, in_shapes: list[tuple[int, ...]], p_shapes: list[tuple[int, ...]], attrs) -> tuple[int, ...]:
    if op is OpKind.LINEAR:
        d_in = int(np.prod(in_shapes[0]))
        w, b = p_shapes
        if w[1] != d_in or b != (w[0],):
            raise ShapeError(f"linear expects {w[1]} inputs, got {d_in}")
        return (w[0],)
    if op in (OpKind.CONV1X1, OpKind.CONV3X3):
        if len(in_shapes[0]) != 3:
            raise ShapeError(f"{op.value} needs an [H,W,C] input, got {in_shapes[0]}")
        w, b = p_shapes
        expect = 4 if op is OpKind.CONV3X3 else 2
        if len(w) != expect or (op is OpKind.CONV3X3 and w[:2] != (3, 3)):
            raise ShapeError(f"{op.value} kernel has shape {w}")
        c_in, c_out = w[-2], w[-1]
        if c_in != in_shapes[0][2] or b != (c_out,):
            raise ShapeError(f"{op.value} expects {c_in} channels, got {in_shapes[0][2]}")
        return in_shapes[0][:2] + (c_out,)
    if op is OpKind.AVGPOOL3X3:
        if len(in_shapes[0]) != 3:
            raise ShapeError(f"avgpool3x3 needs an [H,W,C] input, got {in_shapes[0]}")
        return in_shapes[0]
    if op is OpKind.RELU:
        return in_shapes[0]
    if op is OpKind.ADD:
        if not in_shapes:
            if "shape" not in attrs:
                raise ShapeError("add with no inputs needs an explicit shape")
            return tuple(attrs["shape"])
        if any(s != in_shapes[0] for s in in_shapes):
            raise ShapeError(f"add operands disagree: {in_shapes}")
        return in_shapes[0]
    if op is OpKind.GLOBAL_AVG_POOL:
        if len(in_shapes[0]) != 3:
            raise ShapeError(f"global_avg_pool needs an [H,W,C] input, got {in_shapes[0]}")
        return in_shapes[0][2:]
    if op is OpKind.SUM_OUTPUT:
        return (1,)
    if op in LOSS_OPS:
        return ()
    raise ContractError(f"unknown op {op!r}")


class Graph:
    """A topologically ordered list of nodes plus the parameter store.

    Node ids are list positions. ``INPUT`` and ``TARGET`` are pseudo-ids for
    the batch input and the targets fed to a loss node.
    """

    def __init__(self, input_shape: Sequence[int]):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.nodes: list[Node] = []
        self.params: dict[str, Tensor] = {}
        self._acts: list[np.ndarray] | None = None
        self._caches: list[Any] | None = None
        self._input: np.ndarray | None = None
        self._last_output: Tensor | None = None
        self.input_grad: np.ndarray | None = None

    # construction

    def add_param(self, name: str, value: np.ndarray, requires_grad: bool = True) -> str:
        if name in self.params:
            raise ContractError(f"duplicate parameter {name!r}")
        self.params[name] = Tensor(value, requires_grad=requires_grad)
        return name

    def add_node(self, op: OpKind | str, inputs: Sequence[int], params: Sequence[str] = (), name: str = "", **attrs) -> int:
        op = OpKind(op)
        nid = len(self.nodes)
        for i in inputs:
            if i == TARGET and op not in LOSS_OPS:
                raise ContractError(f"node {nid} ({name}): only loss ops read targets")
            if i != INPUT and i != TARGET and not 0 <= i < nid:
                raise ContractError(f"node {nid} ({name}): input {i} does not precede it")
        for p in params:
            if p not in self.params:
                raise ContractError(f"node {nid} ({name}): unknown parameter {p!r}")
        data_inputs = [i for i in inputs if i != TARGET]
        in_shapes = [self.input_shape if i == INPUT else self.nodes[i].shape for i in data_inputs]
        try:
            shape = _infer_shape(op, in_shapes, [self.params[p].shape for p in params], attrs)
        except ShapeError as exc:
            raise ShapeError(f"node {nid} ({name or op.value}): {exc}") from None
        self.nodes.append(Node(op, tuple(inputs), tuple(params), name or f"{op.value}{nid}", attrs, shape))
        return nid

    @property
    def output_id(self) -> int:
        if not self.nodes:
            raise StateError("graph has no nodes")
        return len(self.nodes) - 1

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.nodes[-1].shape

    def topo_check(self) -> None:
        """Raise if any node reads a later node (acyclicity in list form)."""
        for nid, node in enumerate(self.nodes):
            for i in node.inputs:
                if i >= nid:
                    raise ContractError(f"node {nid} ({node.name}) reads node {i}, graph is not topologically ordered")

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values() if t.requires_grad)

    def trainable(self) -> list[str]:
        return [k for k, t in self.params.items() if t.requires_grad]

    def with_loss(self, kind: OpKind | str, **attrs) -> "Graph":
        """Return a graph sharing this one's parameters with a loss node on top."""
        g = Graph(self.input_shape)
        g.nodes = list(self.nodes)
        g.params = self.params
        g.add_node(kind, [self.output_id, TARGET], name=OpKind(kind).value, **attrs)
        return g

    # execution

    def forward(self, x, targets=None) -> Tensor:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.shape[1:] != self.input_shape or x.ndim != len(self.input_shape) + 1:
            raise ShapeError(f"input shape {x.shape[1:]} does not match graph input {self.input_shape}")
        batch = x.shape[0]
        acts: list[np.ndarray] = []
        caches: list[Any] = []
        for nid, node in enumerate(self.nodes):
            xs = [x if i == INPUT else acts[i] for i in node.inputs if i != TARGET]
            if node.op in LOSS_OPS and targets is None:
                raise ContractError(f"node {nid} ({node.name}) is a loss and needs targets")
            ps = [self.params[p].data for p in node.params]
            with np.errstate(over="ignore", invalid="ignore"):
                out, cache = _forward_op(node, xs, ps, targets, batch)
            if not np.isfinite(out).all():
                raise NumericError(f"non-finite output at node {nid} ({node.name})", node=nid)
            acts.append(out)
            caches.append(cache)
        self._acts, self._caches, self._input = acts, caches, x
        self._last_output = Tensor.__new__(Tensor)
        self._last_output.data = acts[-1]
        self._last_output.requires_grad = True
        self._last_output.grad = None
        return self._last_output

    def activation(self, node_id: int) -> np.ndarray:
        """Output of ``node_id`` from the latest forward pass."""
        if self._acts is None:
            raise StateError("no forward pass has run")
        return self._acts[node_id]

    def vjp(self, seed: np.ndarray) -> dict[str, np.ndarray]:
        """Pull ``seed`` (shaped like the last output) back to every trainable parameter."""
        if self._acts is None:
            raise StateError("backward called before forward")
        acts, caches = self._acts, self._caches
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != acts[-1].shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {acts[-1].shape}")
        adj: list[np.ndarray | None] = [None] * len(self.nodes)
        adj[-1] = seed
        grads = {k: np.zeros_like(t.data) for k, t in self.params.items() if t.requires_grad}
        input_grad = np.zeros_like(self._input)
        for nid in range(len(self.nodes) - 1, -1, -1):
            g = adj[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            data_inputs = [i for i in node.inputs if i != TARGET]
            xs = [self._input if i == INPUT else acts[i] for i in data_inputs]
            ps = [self.params[p].data for p in node.params]
            dxs, dps = _backward_op(node, g, xs, ps, caches[nid])
            for p, dp in zip(node.params, dps):
                if p in grads:
                    grads[p] += dp
            for i, dx in zip(data_inputs, dxs):
                if i == INPUT:
                    input_grad += dx
                elif adj[i] is None:
                    adj[i] = dx
                else:
                    adj[i] = adj[i] + dx
        self.input_grad = input_grad
        return grads

    def backward(self, scalar_output: Tensor) -> dict[str, Tensor]:
        """Gradient of a single-element output with respect to every trainable parameter."""
        if self._acts is None or self._last_output is None:
            raise StateError("backward called before forward")
        if scalar_output is not self._last_output:
            raise StateError("output was not produced by the latest forward on this graph")
        if scalar_output.data.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {scalar_output.shape}")
        grads = self.vjp(np.ones_like(scalar_output.data))
        return {k: Tensor(v, requires_grad=False) for k, v in grads.items()}


def forward(graph: Graph, input, targets=None) -> Tensor:
    return graph.forward(input, targets)


def backward(graph: Graph, scalar_output: Tensor) -> dict[str, Tensor]:
    return graph.backward(scalar_output)


def grad_check(graph: Graph, input, eps: float, targets=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    The graph output must be a single element.
    """
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    out = graph.forward(input, targets)
    analytic = {k: t.data for k, t in graph.backward(out).items()}
    worst = 0.0
    for name in graph.trainable():
        flat = graph.params[name].data.reshape(-1)
        a = analytic[name].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = graph.forward(input, targets).item()
            flat[idx] = orig - eps
            fm = graph.forward(input, targets).item()
            flat[idx] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(a[idx] - num) / max(abs(a[idx]), abs(num), 1e-12)
            worst = max(worst, err)
    return worst
