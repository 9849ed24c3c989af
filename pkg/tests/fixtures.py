"""Small graph topologies shared by the rewrite tests and the golden files,
plus the function-preservation harness."""

import numpy as np

from tqt.execute import run
from tqt.graph import Graph, infer_shapes


def assert_preserves(before, after, n=20, tol=1e-8, seed=0, batch=2):
    """Both graphs must produce the same outputs on random inputs."""
    rng = np.random.default_rng(seed)
    shapes = infer_shapes(before, batch=batch)
    for _ in range(n):
        feeds = {nm: rng.normal(size=shapes[nm]) for nm in before.inputs}
        a, _ = run(before, feeds)
        b, _ = run(after, feeds)
        assert len(a) == len(b)  # output names may change, the order cannot
        for va, vb in zip(a.values(), b.values()):
            np.testing.assert_allclose(va, vb, rtol=0, atol=tol)


def conv_relu():
    """Single compute layer with bias and a trailing relu."""
    g = Graph()
    g.add("x", "input", shape="8x8x2")
    g.const("w", np.linspace(-0.5, 0.5, 72).reshape(3, 3, 2, 4))
    g.add("conv", "conv2d", ("x", "w"), stride=1, pad="same")
    g.const("b", np.linspace(-0.2, 0.2, 4))
    g.add("convb", "bias_add", ("conv", "b"))
    g.add("act", "relu", ("convb",))
    g.inputs, g.outputs = ["x"], ["act"]
    return g


def eltwise_pair():
    """Two branches joining in an eltwise add under a relu."""
    g = Graph()
    g.add("x", "input", shape="6x6x2")
    g.const("w1", np.linspace(-0.4, 0.4, 8).reshape(1, 1, 2, 4))
    g.add("c1", "conv2d", ("x", "w1"), stride=1, pad="same")
    g.add("r1", "relu", ("c1",))
    g.const("w2", np.linspace(-0.3, 0.5, 72).reshape(3, 3, 2, 4))
    g.add("c2", "conv2d", ("x", "w2"), stride=1, pad="same")
    g.add("r2", "relu", ("c2",))
    g.add("add", "eltwise_add", ("r1", "r2"))
    g.add("r3", "relu", ("add",))
    g.inputs, g.outputs = ["x"], ["r3"]
    return g


def concat_three():
    """Three branches merged by a concat that stays unquantized."""
    g = Graph()
    g.add("x", "input", shape="5x5x2")
    for i, cout in enumerate((2, 3, 4)):
        w = "w%d" % i
        g.const(w, np.linspace(-0.5, 0.5, 2 * cout).reshape(1, 1, 2, cout))
        g.add("c%d" % i, "conv2d", ("x", w), stride=1, pad="same")
        g.add("r%d" % i, "relu", ("c%d" % i,))
    g.add("cat", "concat", ("r0", "r1", "r2"), axis=-1)
    g.inputs, g.outputs = ["x"], ["cat"]
    return g


def leaky_tail():
    """Compute layer with bias feeding a leaky relu."""
    g = Graph()
    g.add("x", "input", shape="6x6x3")
    g.const("w", np.linspace(-0.6, 0.6, 27).reshape(3, 3, 3, 1))
    g.add("dw", "depthwise_conv2d", ("x", "w"), stride=1, pad="same")
    g.const("b", np.array([0.1, -0.1, 0.05]))
    g.add("dwb", "bias_add", ("dw", "b"))
    g.add("act", "leaky_relu", ("dwb",), alpha=0.1)
    g.inputs, g.outputs = ["x"], ["act"]
    return g


def pooled_head():
    """Conv into an average pool into a classifier matmul."""
    g = Graph()
    g.add("x", "input", shape="4x4x2")
    g.const("w", np.linspace(-0.5, 0.5, 16).reshape(2, 2, 2, 2))
    g.add("conv", "conv2d", ("x", "w"), stride=1, pad="same")
    g.add("act", "relu", ("conv",))
    g.add("pool", "avg_pool", ("act",), k=2)
    g.add("flat", "flatten", ("pool",))
    g.const("fw", np.linspace(-0.4, 0.4, 24).reshape(8, 3))
    g.add("fc", "matmul", ("flat", "fw"))
    g.inputs, g.outputs = ["x"], ["fc"]
    return g


GOLDEN_TOPOLOGIES = {
    "conv_relu": conv_relu,
    "eltwise_pair": eltwise_pair,
    "concat_three": concat_three,
    "leaky_tail": leaky_tail,
    "pooled_head": pooled_head,
}
