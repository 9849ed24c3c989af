"""Graph rewrites and quantizer-insertion.

The float-graph rewrites (batch-norm folding, identity splicing,
concat-of-concat collapse, average-pool to depthwise-conv) are all
function preserving.  `insert_quant_layers` then decorates a prepared
float graph with quantize nodes:

  compute layer   y = q8( q16'(sum(qw(w) * q8(x))) + q16'(b) )
  eltwise add     y = q8( q8'(a) + q8'(b) )            shared input scale
  maximum         like eltwise add
  leaky relu      y = q8( max(q16'(x), q16'(q16(alpha) * q16'(x))) )
  avg pool        y = q8( sum(q8(1/F^2) * q8(x)) )     via depthwise conv
  concat          inputs share one scale, no output quantizer

where q' marks quantizers whose groups share a single scale.  The trailing
8-bit stage of a layer is delayed past a following relu/relu6 and switched
to unsigned; when the follower is a leaky relu the 8-bit stage is skipped
and a 16-bit one feeds the decomposed max.  Inputs are assumed already
quantized by their producers, except primary graph inputs which get an
explicit quantizer.
"""

from dataclasses import dataclass

import numpy as np

from .errors import TransformError
from .graph import COMPUTE_OPS, Graph, infer_shapes, topo_order
from .quantize import QuantizerParams


@dataclass
class PrecisionConfig:
    bits_weights: int = 8
    bits_activations: int = 8
    bits_internal: int = 16

    @classmethod
    def named(cls, name: str):
        if name == "int8":
            return cls(8, 8, 16)
        if name == "int4":
            return cls(4, 8, 16)
        raise TransformError("unknown precision %r" % (name,))


# ---------------------------------------------------------------------------
# Float-graph rewrites

def fold_batchnorm(g: Graph) -> Graph:
    """Fold inference-mode batch_norm into the preceding compute layer.

    w' = w * gamma / sqrt(var + eps); bias' = beta + (bias - mean) * same.
    The depthwise case scales per input channel, others per output channel.
    Normalizations not directly behind a (possibly biased) compute layer
    raise; patterns with shared weights are left untouched.
    """
    g = g.clone()
    cons = g.consumers()
    for name in topo_order(g):
        node = g.nodes.get(name)
        if node is None or node.op != "batch_norm":
            continue
        src = g.nodes[node.inputs[0]]
        bias_node = None
        layer = src
        if src.op == "bias_add":
            bias_node = src
            layer = g.nodes[src.inputs[0]]
        if layer.op not in COMPUTE_OPS:
            raise TransformError(
                "batch_norm %s follows %s, not a compute layer" % (name, layer.op))
        w_name = layer.inputs[1]
        if g.nodes[w_name].op != "const":
            continue
        if len(cons[w_name]) > 1 or len(cons[layer.name]) > 1:
            continue  # shared structure; folding would change other users
        gamma, beta, mean, var = (g.values[i] for i in node.inputs[1:])
        eps = float(node.attrs.get("eps", 1e-5))
        scale = gamma / np.sqrt(var + eps)
        w = g.values[w_name]
        if layer.op == "depthwise_conv2d":
            g.values[w_name] = w * scale[:, None]
        else:
            g.values[w_name] = w * scale
        if bias_node is not None:
            b_name = bias_node.inputs[1]
            g.values[b_name] = beta + (g.values[b_name] - mean) * scale
            tail = bias_node.name
        else:
            b_name = layer.name + "_bias"
            while b_name in g.nodes:
                b_name += "_"
            g.const(b_name, beta - mean * scale)
            add_name = layer.name + "_biasadd"
            while add_name in g.nodes:
                add_name += "_"
            g.add(add_name, "bias_add", (layer.name, b_name))
            tail = add_name
        g.rewire(name, tail)
        g.nodes[name].inputs = ()  # detach so prune drops the bn chain
        g.prune()
        cons = g.consumers()
    return g


def splice_identity(g: Graph) -> Graph:
    """Remove identity nodes, reconnecting consumers to the source."""
    g = g.clone()
    for name in topo_order(g):
        node = g.nodes[name]
        if node.op == "identity":
            g.rewire(name, node.inputs[0])
    g.prune()
    return g


def collapse_concat(g: Graph) -> Graph:
    """Merge concat-of-concat (same axis) into a single concat."""
    g = g.clone()
    changed = True
    while changed:
        changed = False
        for node in list(g.nodes.values()):
            if node.op != "concat":
                continue
            axis = node.attrs.get("axis", -1)
            new_inputs = []
            for src in node.inputs:
                inner = g.nodes[src]
                if inner.op == "concat" and inner.attrs.get("axis", -1) == axis:
                    new_inputs.extend(inner.inputs)
                    changed = True
                else:
                    new_inputs.append(src)
            node.inputs = tuple(new_inputs)
    g.prune()
    return g


def avgpool_to_dwconv(g: Graph) -> Graph:
    """Rewrite valid-padding average pools as depthwise convs with 1/F^2
    weights; other pools pass through."""
    g = g.clone()
    pools = [n for n in g.nodes.values() if n.op == "avg_pool"
             and n.attrs.get("pad", "valid") == "valid"]
    if not pools:
        return g
    shapes = infer_shapes(g)
    for node in pools:
        k = int(node.attrs["k"])
        stride = int(node.attrs.get("stride", k))
        channels = shapes[node.inputs[0]][-1]
        r_name = node.name + "_recip"
        while r_name in g.nodes:
            r_name += "_"
        g.const(r_name, np.full((k, k, channels, 1), 1.0 / (k * k)),
                synthetic=True)
        node.op = "depthwise_conv2d"
        node.inputs = (node.inputs[0], r_name)
        node.attrs = {"stride": stride, "pad": "valid", "from_avgpool": True}
    return g


def optimize(g: Graph) -> Graph:
    """The standard pre-quantization pipeline."""
    g = fold_batchnorm(g)
    g = splice_identity(g)
    g = collapse_concat(g)
    g = avgpool_to_dwconv(g)
    return g


# ---------------------------------------------------------------------------
# Quantizer insertion

class _Groups:
    """Union-find over quantizer groups carrying (bits, signed)."""

    def __init__(self):
        self.parent = {}
        self.kind = {}

    def make(self, name, bits, signed):
        self.parent[name] = name
        self.kind[name] = (bits, signed)
        return name

    def find(self, name):
        while self.parent[name] != name:
            self.parent[name] = self.parent[self.parent[name]]
            name = self.parent[name]
        return name

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.kind[ra] != self.kind[rb]:
            raise TransformError(
                "cannot share scales: %s is %s-bit signed=%s but %s is "
                "%s-bit signed=%s" % (ra, *self.kind[ra], rb, *self.kind[rb]))
        root, other = min(ra, rb), max(ra, rb)
        self.parent[other] = root
        return root


def insert_quant_layers(g: Graph, cfg: PrecisionConfig) -> Graph:
    """Insert quantize nodes per the layer schemes above.

    Expects an optimized float graph (batch norm folded, average pools
    converted).  A graph that already contains quantize nodes is returned
    unchanged, which makes the pass idempotent.

    The first and last compute layers keep their weights at 8 bits even in
    4-bit mode; those boundary layers carry the raw input and the logits and
    do not survive 4-bit weights, while staying on the same integer datapath.
    """
    if any(n.op == "quantize" for n in g.nodes.values()):
        return g.clone()
    g = g.clone()
    groups = _Groups()

    compute = [n for n in topo_order(g)
               if g.nodes[n].op in COMPUTE_OPS
               and not g.nodes[n].attrs.get("from_avgpool")]
    boundary = {compute[0], compute[-1]} if compute else set()

    def insert_q(src, bits, signed, role, group=None, name=None):
        qname = name or (src + "_q")
        while qname in g.nodes:
            qname += "_"
        gid = groups.make(qname, bits, signed) if group is None else group
        g.add(qname, "quantize", (src,), bits=bits, signed=signed,
              group=gid, role=role)
        g.rewire(src, qname, keep=(qname,))
        return qname

    def quantizer_of(src):
        node = g.nodes[src]
        return node if node.op == "quantize" else None

    def ensure_quantized(src, bits, signed, role="act"):
        """Quantizer feeding a scale-sharing op; inserted if missing."""
        q = quantizer_of(src)
        if q is None:
            qn = insert_q(src, bits, signed, role)
            return g.nodes[qn]
        return q

    def single_consumer(name, cons):
        uses = [c for c, _ in cons.get(name, ()) if c.op != "quantize"]
        if len(uses) == 1 and name not in g.outputs:
            return uses[0]
        return None

    def output_stage(tail):
        """Place the trailing activation quantizer, delaying past relus."""
        cons = g.consumers()
        nxt = single_consumer(tail, cons)
        if nxt is not None and nxt.op in ("relu", "relu6"):
            insert_q(nxt.name, cfg.bits_activations, False, "act")
        elif nxt is not None and nxt.op == "leaky_relu":
            insert_q(tail, cfg.bits_internal, True, "act",
                     name=tail + "_q16")
        else:
            insert_q(tail, cfg.bits_activations, True, "act")

    for name in g.inputs:
        insert_q(name, cfg.bits_activations, True, "act")

    for name in topo_order(g):
        node = g.nodes.get(name)
        if node is None or name not in g.nodes:
            continue
        op = node.op
        if op in COMPUTE_OPS and not node.attrs.get("from_avgpool"):
            w_bits = max(cfg.bits_weights, 8) if name in boundary \
                else cfg.bits_weights
            insert_q(node.inputs[1], w_bits, True, "weight")
            acc_group = None
            cons = g.consumers()
            nxt = single_consumer(name, cons)
            if nxt is not None and nxt.op == "bias_add":
                accq = insert_q(name, cfg.bits_internal, True, "act",
                                name=name + "_acc_q")
                acc_group = groups.find(accq)
                bias = nxt.inputs[1]
                if g.nodes[bias].op == "const":
                    insert_q(bias, cfg.bits_internal, True, "act",
                             group=acc_group)
                tail = nxt.name
            else:
                # no bias: the output stage hangs off the accumulator
                # quantizer, otherwise it would land between the two
                tail = insert_q(name, cfg.bits_internal, True, "act",
                                name=name + "_acc_q")
            output_stage(tail)
        elif op == "depthwise_conv2d" and node.attrs.get("from_avgpool"):
            insert_q(node.inputs[1], 8, True, "weight")
            output_stage(name)
        elif op in ("eltwise_add", "maximum"):
            qs = [ensure_quantized(s, cfg.bits_activations, True)
                  for s in node.inputs]
            root = qs[0].attrs["group"]
            for q in qs[1:]:
                root = groups.union(root, q.attrs["group"])
            output_stage(name)
        elif op == "concat":
            qs = [ensure_quantized(s, cfg.bits_activations, True)
                  for s in node.inputs]
            root = qs[0].attrs["group"]
            for q in qs[1:]:
                root = groups.union(root, q.attrs["group"])
        elif op == "leaky_relu":
            alpha = float(node.attrs.get("alpha", 0.01))
            src = node.inputs[0]
            q_in = quantizer_of(src)
            if q_in is None or g.nodes[src].attrs.get("bits") != cfg.bits_internal:
                qn = insert_q(src, cfg.bits_internal, True, "act")
                q_in = g.nodes[qn]
            a_name = name + "_alpha"
            while a_name in g.nodes:
                a_name += "_"
            g.const(a_name, np.asarray(alpha), synthetic=True)
            qa = insert_q(a_name, cfg.bits_internal, True, "weight")
            p_name = name + "_scaled"
            while p_name in g.nodes:
                p_name += "_"
            g.add(p_name, "mul", (q_in.name, qa))
            qp = insert_q(p_name, cfg.bits_internal, True, "act",
                          group=groups.find(q_in.attrs["group"]),
                          name=p_name + "_q")
            node.op = "maximum"
            node.inputs = (q_in.name, qp)
            node.attrs = {}
            output_stage(name)

    # canonicalize groups and materialize shared parameters
    for node in g.nodes.values():
        if node.op == "quantize":
            root = groups.find(node.attrs["group"])
            node.attrs["group"] = root
            if root not in g.qparams:
                bits, signed = groups.kind[root]
                g.qparams[root] = QuantizerParams(bits, signed, 0.0)
    return g
