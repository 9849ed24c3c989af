"""Graph executors.

`run` evaluates a graph with plain numpy (inference).  `build_tape`
emits the same computation onto a Tape so every weight and every shared
threshold gets an exact gradient.  Quantize nodes read their parameters
from graph.qparams keyed by group, so tensors in one group always see a
single scale.
"""

import numpy as np

from .errors import GraphError
from .graph import Graph, topo_order
from . import tensor as T
from .quantize import quantize_forward
from . import quantize as Q


def run(g: Graph, feeds: dict, collect=(), hook=None, passthrough=()):
    """Evaluate `g` and return (outputs, collected).

    feeds maps primary input names to arrays.  `collect` names extra
    nodes whose values are wanted.  `hook(node, params, x)` fires before
    each quantize node is applied; calibration uses it to observe and
    update parameters in place.  Quantizers whose group is listed in
    `passthrough` act as identity, so statistics can be gathered before
    their thresholds exist.
    """
    vals = {}
    for name in g.inputs:
        if name not in feeds:
            raise GraphError("missing feed for input %s" % name)
        vals[name] = np.asarray(feeds[name], dtype=np.float64)
    collected = {}
    for name in topo_order(g):
        node = g.nodes[name]
        op = node.op
        a = node.inputs
        if op == "input":
            pass
        elif op == "const":
            vals[name] = g.values[name]
        elif op == "identity":
            vals[name] = vals[a[0]]
        elif op == "quantize":
            group = node.attrs["group"]
            params = g.qparams[group]
            x = vals[a[0]]
            if hook is not None:
                hook(node, params, x)
                params = g.qparams[group]
            if group in passthrough:
                vals[name] = x
            else:
                vals[name] = quantize_forward(x, params)
        elif op == "conv2d":
            vals[name] = T.conv2d_(vals[a[0]], vals[a[1]],
                                   int(node.attrs.get("stride", 1)),
                                   node.attrs.get("pad", "same"))
        elif op == "depthwise_conv2d":
            vals[name] = T.depthwise_conv2d_(vals[a[0]], vals[a[1]],
                                             int(node.attrs.get("stride", 1)),
                                             node.attrs.get("pad", "same"))
        elif op == "matmul":
            vals[name] = T.matmul_(vals[a[0]], vals[a[1]])
        elif op == "bias_add":
            vals[name] = vals[a[0]] + vals[a[1]]
        elif op == "eltwise_add":
            vals[name] = vals[a[0]] + vals[a[1]]
        elif op == "mul":
            vals[name] = vals[a[0]] * vals[a[1]]
        elif op == "maximum":
            vals[name] = np.maximum(vals[a[0]], vals[a[1]])
        elif op == "relu":
            vals[name] = np.maximum(vals[a[0]], 0.0)
        elif op == "relu6":
            vals[name] = np.clip(vals[a[0]], 0.0, 6.0)
        elif op == "leaky_relu":
            alpha = float(node.attrs.get("alpha", 0.01))
            x = vals[a[0]]
            vals[name] = np.maximum(x, alpha * x)
        elif op == "avg_pool":
            vals[name] = T.avg_pool_(vals[a[0]], int(node.attrs["k"]),
                                     int(node.attrs.get("stride",
                                                        node.attrs["k"])))
        elif op == "batch_norm":
            vals[name] = T.batch_norm_(vals[a[0]], vals[a[1]], vals[a[2]],
                                       vals[a[3]], vals[a[4]],
                                       float(node.attrs.get("eps", 1e-5)))
        elif op == "concat":
            axis = int(node.attrs.get("axis", -1))
            vals[name] = np.concatenate([vals[i] for i in a], axis=axis)
        elif op == "flatten":
            x = vals[a[0]]
            vals[name] = x.reshape(x.shape[0], -1)
        else:
            raise GraphError("cannot execute op %s" % op)
        if name in collect:
            collected[name] = vals[name]
    outputs = {o: vals[o] for o in g.outputs}
    return outputs, collected


class TapeRun:
    """Handles into a built training tape."""

    def __init__(self, tape, node_ids, weight_ids, threshold_ids,
                 logits_id, loss_id, bn_stats):
        self.tape = tape
        self.node_ids = node_ids            # graph node name -> tape value id
        self.weight_ids = weight_ids        # const name -> leaf id
        self.threshold_ids = threshold_ids  # group name -> leaf id
        self.logits_id = logits_id
        self.loss_id = loss_id
        self.bn_stats = bn_stats            # bn node name -> (mean, var)


def build_tape(g: Graph, feeds: dict, labels=None, bn_train=(),
               weight_overrides=None, threshold_overrides=None):
    """Build a Tape for one step over `feeds`.

    Every const becomes a leaf, as does one log2_t scalar per quantizer
    group (shared by all members).  With `labels` a softmax cross entropy
    loss over the single graph output is appended.  bn nodes listed in
    bn_train run on batch statistics and their (mean, var) are reported
    for moving-average updates.  Overrides supply current trainable
    values without mutating the graph.
    """
    wv = weight_overrides or {}
    tv = threshold_overrides or {}
    tape = T.Tape()
    ids = {}
    weight_ids = {}
    threshold_ids = {}
    bn_stats = {}

    def thr(group):
        if group not in threshold_ids:
            params = g.qparams[group]
            v = tv.get(group, params.log2_t)
            threshold_ids[group] = tape.leaf(np.asarray(float(v)))
        return threshold_ids[group]

    for name in g.inputs:
        ids[name] = tape.leaf(np.asarray(feeds[name], dtype=np.float64))
    for name in topo_order(g):
        node = g.nodes[name]
        op = node.op
        a = node.inputs
        if op == "input":
            continue
        if op == "const":
            weight_ids[name] = tape.leaf(
                np.asarray(wv.get(name, g.values[name]), dtype=np.float64))
            ids[name] = weight_ids[name]
        elif op == "identity":
            ids[name] = ids[a[0]]
        elif op == "quantize":
            params = g.qparams[node.attrs["group"]]
            ids[name] = Q.t_quantize(tape, ids[a[0]],
                                     thr(node.attrs["group"]),
                                     params.bits, params.signed)
        elif op == "conv2d":
            ids[name] = T.t_conv2d(tape, ids[a[0]], ids[a[1]],
                                   int(node.attrs.get("stride", 1)),
                                   node.attrs.get("pad", "same"))
        elif op == "depthwise_conv2d":
            ids[name] = T.t_depthwise_conv2d(tape, ids[a[0]], ids[a[1]],
                                             int(node.attrs.get("stride", 1)),
                                             node.attrs.get("pad", "same"))
        elif op == "matmul":
            ids[name] = T.t_matmul(tape, ids[a[0]], ids[a[1]])
        elif op == "bias_add":
            ids[name] = T.t_bias_add(tape, ids[a[0]], ids[a[1]])
        elif op == "eltwise_add":
            ids[name] = T.t_add(tape, ids[a[0]], ids[a[1]])
        elif op == "mul":
            ids[name] = T.t_mul(tape, ids[a[0]], ids[a[1]])
        elif op == "maximum":
            ids[name] = T.t_maximum(tape, ids[a[0]], ids[a[1]])
        elif op == "relu":
            ids[name] = T.t_relu(tape, ids[a[0]])
        elif op == "relu6":
            ids[name] = T.t_relu6(tape, ids[a[0]])
        elif op == "leaky_relu":
            ids[name] = T.t_leaky_relu(tape, ids[a[0]],
                                       float(node.attrs.get("alpha", 0.01)))
        elif op == "avg_pool":
            ids[name] = T.t_avg_pool(tape, ids[a[0]], int(node.attrs["k"]),
                                     int(node.attrs.get("stride",
                                                        node.attrs["k"])))
        elif op == "batch_norm":
            eps = float(node.attrs.get("eps", 1e-5))
            if name in bn_train:
                out, mean, var = T.t_batch_norm_train(
                    tape, ids[a[0]], ids[a[1]], ids[a[2]], eps)
                bn_stats[name] = (mean, var)
                ids[name] = out
            else:
                ids[name] = T.t_batch_norm_inference(
                    tape, ids[a[0]], ids[a[1]], ids[a[2]],
                    ids[a[3]], ids[a[4]], eps)
        elif op == "concat":
            ids[name] = T.t_concat(tape, [ids[i] for i in a],
                                   int(node.attrs.get("axis", -1)))
        elif op == "flatten":
            ids[name] = T.t_flatten(tape, ids[a[0]])
        else:
            raise GraphError("cannot trace op %s" % op)

    logits_id = ids[g.outputs[0]] if g.outputs else None
    loss_id = None
    if labels is not None:
        if logits_id is None:
            raise GraphError("graph has no output to attach a loss to")
        loss_id = T.t_softmax_cross_entropy(tape, logits_id,
                                            np.asarray(labels))
    return TapeRun(tape, ids, weight_ids, threshold_ids,
                   logits_id, loss_id, bn_stats)
