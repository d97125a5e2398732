import numpy as np
import pytest

from knaskit.tensor import INPUT, Graph, OpKind


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def mlp_graph(rng, dims, scalar=True, scale=None):
    """Dense ReLU network over flat inputs; ends in sum_output when ``scalar``."""
    g = Graph((dims[0],))
    x = INPUT
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        s = np.sqrt(2.0 / a) if scale is None else scale
        g.add_param(f"l{i}.w", rng.standard_normal((b, a)) * s)
        g.add_param(f"l{i}.b", rng.standard_normal(b) * 0.1)
        x = g.add_node(OpKind.LINEAR, [x], (f"l{i}.w", f"l{i}.b"))
        if i < len(dims) - 2:
            x = g.add_node(OpKind.RELU, [x])
    if scalar:
        g.add_node(OpKind.SUM_OUTPUT, [x])
    return g
