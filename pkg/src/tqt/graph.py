"""In-memory dataflow graph and its textual form.

One node per line, `id = op(inputs...) {key=value, ...}`, preceded by
`inputs:` / `outputs:` directives naming the primary boundary tensors.
Serialization emits nodes in deterministic topological order with sorted
attribute keys, so equal graphs produce byte-equal documents.  Const
payloads live in sidecar tensor files referenced by a relative `file`
attribute; `save_graph`/`load_graph` handle the sidecars.
"""

import os
import re

import numpy as np

from .errors import GraphError, GraphParseError
from .quantize import QuantizerParams

# op -> (min arity, max arity); None = unbounded
KINDS = {
    "input": (0, 0),
    "const": (0, 0),
    "identity": (1, 1),
    "conv2d": (2, 2),
    "depthwise_conv2d": (2, 2),
    "matmul": (2, 2),
    "bias_add": (2, 2),
    "batch_norm": (5, 5),
    "relu": (1, 1),
    "relu6": (1, 1),
    "leaky_relu": (1, 1),
    "avg_pool": (1, 1),
    "eltwise_add": (2, 2),
    "mul": (2, 2),
    "maximum": (2, 2),
    "concat": (1, None),
    "flatten": (1, 1),
    "quantize": (1, 1),
    # lowered (integer) forms
    "int_input": (0, 0),
    "int_const": (0, 0),
    "int_conv2d": (2, 2),
    "int_depthwise_conv2d": (2, 2),
    "int_matmul": (2, 2),
    "int_add": (2, 2),
    "int_mul": (2, 2),
    "int_maximum": (2, 2),
    "int_concat": (1, None),
    "int_flatten": (1, 1),
    "requant": (1, 1),
}

CONST_OPS = ("const", "int_const")

COMPUTE_OPS = ("conv2d", "depthwise_conv2d", "matmul")

_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_./-]*$")
_LINE = re.compile(r"^(\S+) = ([a-z0-9_]+)\(([^()]*)\)(?: \{(.*)\})?$")


class Node:
    __slots__ = ("name", "op", "inputs", "attrs")

    def __init__(self, name, op, inputs=(), attrs=None):
        self.name = name
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = dict(attrs or {})

    def __repr__(self):
        return "Node(%r, %r, %r, %r)" % (self.name, self.op, self.inputs, self.attrs)

    def __eq__(self, other):
        return (isinstance(other, Node) and self.name == other.name
                and self.op == other.op and self.inputs == other.inputs
                and self.attrs == other.attrs)


class Graph:
    def __init__(self):
        self.nodes = {}      # name -> Node, insertion ordered
        self.inputs = []     # primary input names
        self.outputs = []    # primary output names
        self.values = {}     # const name -> ndarray
        self.qparams = {}    # quantizer group -> QuantizerParams

    def add(self, name, op, inputs=(), **attrs):
        if name in self.nodes:
            raise GraphError("duplicate node %r" % name)
        if op not in KINDS:
            raise GraphError("unknown op %r" % op)
        lo, hi = KINDS[op]
        if len(inputs) < lo or (hi is not None and len(inputs) > hi):
            raise GraphError("%s takes %s inputs, got %d" % (op, lo, len(inputs)))
        self.nodes[name] = Node(name, op, inputs, attrs)
        return name

    def const(self, name, value, **attrs):
        self.add(name, "const", **attrs)
        self.values[name] = np.asarray(value, dtype=np.float64)
        return name

    def consumers(self):
        """name -> list of (consumer node, input position)."""
        out = {name: [] for name in self.nodes}
        for node in self.nodes.values():
            for pos, src in enumerate(node.inputs):
                out[src].append((node, pos))
        return out

    def rewire(self, old, new, keep=()):
        """Point every consumer of `old` (except those in `keep`) at `new`."""
        for node in self.nodes.values():
            if node.name in keep or node.name == new:
                continue
            if old in node.inputs:
                node.inputs = tuple(new if i == old else i for i in node.inputs)
        self.outputs = [new if o == old and o not in keep else o for o in self.outputs]

    def prune(self):
        """Drop nodes unreachable from the outputs (keeps primary inputs)."""
        live = set(self.inputs)
        stack = list(self.outputs)
        while stack:
            name = stack.pop()
            if name in live:
                continue
            live.add(name)
            stack.extend(self.nodes[name].inputs)
        for name in [n for n in self.nodes if n not in live]:
            del self.nodes[name]
            self.values.pop(name, None)
        groups = {n.attrs["group"] for n in self.nodes.values() if n.op == "quantize"}
        self.qparams = {g: p for g, p in self.qparams.items() if g in groups}

    def clone(self):
        g = Graph()
        for node in self.nodes.values():
            g.nodes[node.name] = Node(node.name, node.op, node.inputs, node.attrs)
        g.inputs = list(self.inputs)
        g.outputs = list(self.outputs)
        g.values = dict(self.values)
        g.qparams = {k: QuantizerParams(p.bits, p.signed, p.log2_t)
                     for k, p in self.qparams.items()}
        return g

    def validate(self):
        for node in self.nodes.values():
            for src in node.inputs:
                if src not in self.nodes:
                    raise GraphError("%s reads undefined %r" % (node.name, src))
        for name in self.inputs + self.outputs:
            if name not in self.nodes:
                raise GraphError("boundary name %r undefined" % name)
        topo_order(self)  # raises on cycles


def topo_order(g: Graph):
    """Deterministic topological order; ties broken by node name."""
    import heapq
    indeg = {name: 0 for name in g.nodes}
    cons = {name: [] for name in g.nodes}
    for node in g.nodes.values():
        seen = set()
        for src in node.inputs:
            if src not in g.nodes:
                raise GraphError("%s reads undefined %r" % (node.name, src))
            cons[src].append(node.name)
            if src not in seen:
                seen.add(src)
        indeg[node.name] = len(set(node.inputs))
    ready = [name for name, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        name = heapq.heappop(ready)
        order.append(name)
        for dst in set(cons[name]):
            indeg[dst] -= 1
            if indeg[dst] == 0:
                heapq.heappush(ready, dst)
    if len(order) != len(g.nodes):
        raise GraphError("graph has a cycle")
    return order


# ---------------------------------------------------------------------------
# Text form

def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    s = str(v)
    if not s or re.search(r"[\s,={}()]", s):
        raise GraphError("attribute value %r not serializable" % (v,))
    return s


def _parse_value(s):
    if re.fullmatch(r"-?\d+", s):
        return int(s)
    if s == "true":
        return True
    if s == "false":
        return False
    try:
        if re.fullmatch(r"[-+0-9.eE]+", s):
            return float(s)
    except ValueError:
        pass
    return s


def serialize_graph(g: Graph) -> str:
    lines = []
    if g.inputs:
        lines.append("inputs: " + ", ".join(g.inputs))
    if g.outputs:
        lines.append("outputs: " + ", ".join(g.outputs))
    for name in topo_order(g):
        node = g.nodes[name]
        attrs = dict(node.attrs)
        if node.op in CONST_OPS and name in g.values and "file" not in attrs:
            attrs["file"] = "tensors/%s.tqt" % name
        if node.op == "quantize":
            attrs["log2_t"] = float(g.qparams[attrs["group"]].log2_t)
        body = "%s = %s(%s)" % (name, node.op, ", ".join(node.inputs))
        if attrs:
            body += " {%s}" % ", ".join(
                "%s=%s" % (k, _fmt_value(attrs[k])) for k in sorted(attrs))
        lines.append(body)
    return "\n".join(lines) + ("\n" if lines else "")


def parse_graph(text: str) -> Graph:
    g = Graph()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("inputs:"):
            g.inputs = [s.strip() for s in line[7:].split(",") if s.strip()]
            continue
        if line.startswith("outputs:"):
            g.outputs = [s.strip() for s in line[8:].split(",") if s.strip()]
            continue
        m = _LINE.match(line)
        if not m:
            raise GraphParseError("unparseable node", lineno)
        name, op, ins, attrs_src = m.groups()
        if not _NAME.match(name):
            raise GraphParseError("bad node name %r" % name, lineno)
        if op not in KINDS:
            raise GraphParseError("unknown op %r" % op, lineno)
        if name in g.nodes:
            raise GraphParseError("duplicate node %r" % name, lineno)
        inputs = tuple(s.strip() for s in ins.split(",") if s.strip())
        lo, hi = KINDS[op]
        if len(inputs) < lo or (hi is not None and len(inputs) > hi):
            raise GraphParseError(
                "%s takes %s inputs, got %d" % (op, lo, len(inputs)), lineno)
        attrs = {}
        if attrs_src:
            for item in attrs_src.split(","):
                item = item.strip()
                if not item:
                    continue
                if "=" not in item:
                    raise GraphParseError("bad attribute %r" % item, lineno)
                k, v = item.split("=", 1)
                attrs[k.strip()] = _parse_value(v.strip())
        if op == "quantize":
            for req in ("bits", "signed", "group"):
                if req not in attrs:
                    raise GraphParseError("quantize missing %r" % req, lineno)
        g.nodes[name] = Node(name, op, inputs, attrs)
    # resolve references and quantizer groups
    for node in g.nodes.values():
        for src in node.inputs:
            if src not in g.nodes:
                raise GraphParseError(
                    "%s reads undefined %r" % (node.name, src))
        if node.op == "quantize":
            a = node.attrs
            group = a["group"]
            params = g.qparams.get(group)
            if params is None:
                g.qparams[group] = QuantizerParams(
                    int(a["bits"]), bool(a["signed"]), float(a.get("log2_t", 0.0)))
            elif (params.bits, params.signed) != (int(a["bits"]), bool(a["signed"])):
                raise GraphParseError(
                    "group %r mixes quantizer kinds" % group)
            node.attrs.pop("log2_t", None)
    topo_order(g)  # cycle check
    return g


def save_graph(g: Graph, path: str):
    """Write the IR text plus sidecar tensor files for const payloads."""
    from .tensor import save_tensor
    base = os.path.dirname(os.path.abspath(path))
    text = serialize_graph(g)
    for name, node in g.nodes.items():
        if node.op not in CONST_OPS:
            continue
        rel = node.attrs.get("file", "tensors/%s.tqt" % name)
        dest = os.path.join(base, rel)
        os.makedirs(os.path.dirname(dest), exist_ok=True)
        save_tensor(dest, g.values[name])
    with open(path, "w") as f:
        f.write(text)


def load_graph(path: str) -> Graph:
    from .tensor import load_tensor
    with open(path) as f:
        g = parse_graph(f.read())
    base = os.path.dirname(os.path.abspath(path))
    for name, node in g.nodes.items():
        if node.op in CONST_OPS:
            rel = node.attrs.get("file")
            if rel is None:
                raise GraphParseError("const %r has no file attribute" % name)
            g.values[name] = load_tensor(os.path.join(base, rel))
    return g


# ---------------------------------------------------------------------------
# Shape inference

def _parse_shape(s):
    if isinstance(s, (int, np.integer)):
        return (int(s),)
    return tuple(int(t) for t in str(s).split("x"))


def _conv_out(size, k, stride, pad):
    if pad == "same":
        return -(-size // stride)
    return (size - k) // stride + 1


def infer_shapes(g: Graph, batch: int = 1):
    """Output shape per node; input nodes get a leading batch dimension."""
    shapes = {}
    for name in topo_order(g):
        node = g.nodes[name]
        ins = [shapes[i] for i in node.inputs]
        op = node.op
        if op == "input":
            shapes[name] = (batch,) + _parse_shape(node.attrs["shape"])
        elif op == "const":
            shapes[name] = tuple(g.values[name].shape)
        elif op in ("conv2d", "depthwise_conv2d"):
            xs, ws = ins
            stride = int(node.attrs.get("stride", 1))
            pad = node.attrs.get("pad", "valid")
            ho = _conv_out(xs[1], ws[0], stride, pad)
            wo = _conv_out(xs[2], ws[1], stride, pad)
            cout = ws[2] if op == "depthwise_conv2d" else ws[3]
            shapes[name] = (xs[0], ho, wo, cout)
        elif op == "matmul":
            xs, ws = ins
            if xs[1] != ws[0]:
                raise GraphError("matmul %s: %s x %s" % (name, xs, ws))
            shapes[name] = (xs[0], ws[1])
        elif op == "avg_pool":
            xs = ins[0]
            k = int(node.attrs["k"])
            stride = int(node.attrs.get("stride", k))
            pad = node.attrs.get("pad", "valid")
            shapes[name] = (xs[0], _conv_out(xs[1], k, stride, pad),
                            _conv_out(xs[2], k, stride, pad), xs[3])
        elif op == "concat":
            axis = int(node.attrs.get("axis", -1))
            base = list(ins[0])
            base[axis] = sum(s[axis] for s in ins)
            shapes[name] = tuple(base)
        elif op == "flatten":
            xs = ins[0]
            shapes[name] = (xs[0], int(np.prod(xs[1:])))
        elif op in ("eltwise_add", "maximum", "mul"):
            a, b = ins
            if np.prod(a) == 1:
                shapes[name] = b
            elif np.prod(b) == 1 or a == b:
                shapes[name] = a
            else:
                raise GraphError("%s shape mismatch %s vs %s" % (name, a, b))
        elif op == "bias_add":
            shapes[name] = ins[0]
        else:  # identity, relu family, batch_norm, quantize
            shapes[name] = ins[0]
    return shapes
