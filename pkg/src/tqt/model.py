"""Small desk-scale CNN for the bundled image task.

The topology deliberately touches every rewrite the transform pass
knows: a batch-normalized conv without bias, a residual add over two
relu outputs, a strided depthwise stage with leaky relu, a two-branch
concat, an average pool, and a final fully connected layer.
"""

import numpy as np

from .data import Dataset, batch_stream
from .errors import TrainingError
from .execute import build_tape, run
from .graph import Graph
from .optim import AdamState, adam_step
from .tensor import Rng

BN_MOMENTUM = 0.9


def build_desk_graph() -> Graph:
    g = Graph()
    g.add("x", "input", shape="32x32x1")
    g.inputs.append("x")

    g.const("conv1_w", np.zeros((3, 3, 1, 8)))
    g.add("conv1", "conv2d", ("x", "conv1_w"), stride=2, pad="same")
    for nm, v in (("bn1_gamma", np.ones(8)), ("bn1_beta", np.zeros(8)),
                  ("bn1_mean", np.zeros(8)), ("bn1_var", np.ones(8))):
        g.const(nm, v)
    g.add("bn1", "batch_norm",
          ("conv1", "bn1_gamma", "bn1_beta", "bn1_mean", "bn1_var"), eps=1e-5)
    g.add("act1", "relu6", ("bn1",))

    g.const("conv2_w", np.zeros((3, 3, 8, 8)))
    g.add("conv2", "conv2d", ("act1", "conv2_w"), stride=1, pad="same")
    g.const("conv2_bias", np.zeros(8))
    g.add("conv2_b", "bias_add", ("conv2", "conv2_bias"))
    g.add("act2", "relu", ("conv2_b",))

    g.add("res", "eltwise_add", ("act1", "act2"))
    g.add("act3", "relu", ("res",))

    g.const("dw_w", np.zeros((3, 3, 8, 1)))
    g.add("dw", "depthwise_conv2d", ("act3", "dw_w"), stride=2, pad="same")
    g.const("dw_bias", np.zeros(8))
    g.add("dw_b", "bias_add", ("dw", "dw_bias"))
    g.add("act4", "leaky_relu", ("dw_b",), alpha=0.1)

    g.const("conv3a_w", np.zeros((1, 1, 8, 8)))
    g.add("conv3a", "conv2d", ("act4", "conv3a_w"), stride=1, pad="same")
    g.const("conv3a_bias", np.zeros(8))
    g.add("conv3a_b", "bias_add", ("conv3a", "conv3a_bias"))
    g.add("act5a", "relu", ("conv3a_b",))

    g.const("conv3b_w", np.zeros((3, 3, 8, 8)))
    g.add("conv3b", "conv2d", ("act4", "conv3b_w"), stride=1, pad="same")
    g.const("conv3b_bias", np.zeros(8))
    g.add("conv3b_b", "bias_add", ("conv3b", "conv3b_bias"))
    g.add("act5b", "relu", ("conv3b_b",))

    g.add("cat", "concat", ("act5a", "act5b"), axis=-1)
    g.add("pool", "avg_pool", ("cat",), k=8)
    g.add("flat", "flatten", ("pool",))

    g.const("fc_w", np.zeros((16, 8)))
    g.add("fc", "matmul", ("flat", "fc_w"))
    g.const("fc_bias", np.zeros(8))
    g.add("logits", "bias_add", ("fc", "fc_bias"))
    g.outputs.append("logits")
    g.validate()
    return g


def init_weights(g: Graph, rng: Rng):
    gen = rng.stream("init")
    for name, v in g.values.items():
        if not name.endswith("_w"):
            continue
        if name.startswith("fc"):
            fan_in = v.shape[0]
        elif v.shape[3] == 1 and v.shape[2] > 1:  # depthwise
            fan_in = v.shape[0] * v.shape[1]
        else:
            fan_in = v.shape[0] * v.shape[1] * v.shape[2]
        g.values[name] = gen.normal(0.0, np.sqrt(2.0 / fan_in), size=v.shape)


def _trainable(g: Graph):
    # bn running stats follow the moving average, not the gradient, and
    # consts materialized by graph rewrites (pool kernels, leaky slopes)
    # are structural, not parameters
    return [n for n in g.values
            if not (n.endswith("_mean") or n.endswith("_var"))
            and not g.nodes[n].attrs.get("synthetic")]


def pretrain_float(g: Graph, ds: Dataset, seed: int, epochs: int = 15,
                   batch: int = 32, lr: float = 3e-3):
    """Train the float model in place.  Returns per-epoch history rows.

    Batch norm runs on batch statistics (with a moving average feeding
    the stored stats) during the first epoch only; afterwards the stats
    are frozen and the layer behaves as in inference.
    """
    rng = Rng(seed)
    names = _trainable(g)
    states = {n: AdamState() for n in names}
    bn_nodes = tuple(n for n, nd in g.nodes.items() if nd.op == "batch_norm")
    steps_per_epoch = len(ds.x_train) // batch
    total = steps_per_epoch * epochs
    history = []
    loss_acc = []
    for step, idx in enumerate(batch_stream(rng, len(ds.x_train), batch, total)):
        epoch = step // steps_per_epoch
        bn_train = bn_nodes if epoch < 1 else ()
        tr = build_tape(g, {"x": ds.x_train[idx]}, labels=ds.y_train[idx],
                        bn_train=bn_train,
                        weight_overrides={n: g.values[n] for n in names})
        loss = float(tr.tape.val(tr.loss_id))
        if not np.isfinite(loss):
            raise TrainingError("loss diverged at step %d" % step)
        grads = tr.tape.backprop(tr.loss_id)
        for n in names:
            gr = grads.get(tr.weight_ids[n])
            if gr is None:
                continue
            g.values[n] = g.values[n] + adam_step(states[n], gr, lr)
        for bn in bn_train:
            mean, var = tr.bn_stats[bn]
            mn, vn = g.nodes[bn].inputs[3], g.nodes[bn].inputs[4]
            g.values[mn] = BN_MOMENTUM * g.values[mn] + (1 - BN_MOMENTUM) * mean
            g.values[vn] = BN_MOMENTUM * g.values[vn] + (1 - BN_MOMENTUM) * var
        loss_acc.append(loss)
        if (step + 1) % steps_per_epoch == 0:
            history.append({"epoch": epoch, "loss": float(np.mean(loss_acc))})
            loss_acc = []
    return history


def accuracy(g: Graph, x, y, batch: int = 256):
    """Top-1 accuracy of the (float or quantized-emulated) graph."""
    hits = 0
    out_name = g.outputs[0]
    for k in range(0, len(x), batch):
        out, _ = run(g, {g.inputs[0]: x[k:k + batch]})
        hits += int(np.sum(np.argmax(out[out_name], axis=1) == y[k:k + batch]))
    return hits / len(x)
