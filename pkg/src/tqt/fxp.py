"""Fixed-point lowering and the integer inference runtime.

A quantized graph (every tensor produced by a quantize node) maps onto
integer ops plus `requant` rescaling stages.  Because all scales are
powers of two, requantization is a rounding right-shift; banker's
rounding in the shift makes the integer path produce bit for bit the
same level indices as the float emulation.

The runtime carries int64 arrays but enforces 32-bit accumulator bounds,
matching what a fixed-point target would provide.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (AccumulatorOverflowError, ContractError, GraphError,
                     TransformError)
from .graph import Graph, load_graph, save_graph, topo_order
from .quantize import int_range, quantize_int

ACC_BITS = 32
_ACC_LIMIT = 1 << (ACC_BITS - 1)


@dataclass
class FixedPointTensor:
    """Integer payload with its interpretation: real = data * 2^-f."""
    data: np.ndarray
    bits: int
    signed: bool
    f: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        n, p = int_range(self.bits, self.signed)
        if self.data.size and (self.data.min() < n or self.data.max() > p):
            raise ContractError(
                "values outside %d-bit %s range [%d, %d]"
                % (self.bits, "signed" if self.signed else "unsigned", n, p))

    @property
    def real(self):
        return self.data.astype(np.float64) * 2.0 ** -self.f


def _shift_round(x, shift):
    """rint(x / 2^shift) on int64, ties to even; negative shift multiplies."""
    x = np.asarray(x, dtype=np.int64)
    if shift <= 0:
        return x << (-shift)
    q = x >> shift          # floor division
    r = x - (q << shift)    # remainder in [0, 2^shift)
    half = np.int64(1) << (shift - 1)
    up = (r > half) | ((r == half) & ((q & 1) == 1))
    return q + up


def shift_requant(x, shift, bits, signed, clip_lo=None, clip_hi=None):
    """Round-shift then clip to the target range (narrowed by clip_*)."""
    n, p = int_range(bits, signed)
    lo = n if clip_lo is None else max(n, int(clip_lo))
    hi = p if clip_hi is None else min(p, int(clip_hi))
    return np.clip(_shift_round(x, shift), lo, hi)


def _check_acc(name, v):
    if v.size and (v.min() <= -_ACC_LIMIT or v.max() >= _ACC_LIMIT):
        raise AccumulatorOverflowError(
            "%s exceeds the %d-bit accumulator" % (name, ACC_BITS))


def _int_conv2d(x, w, stride, pad, depthwise=False):
    # mirror the float conv loops with exact int64 accumulation
    from .tensor import _pad_amounts
    n, h, wd, c = x.shape
    kh, kw = w.shape[:2]
    t0, b0, ho = _pad_amounts(h, kh, stride, pad)
    l0, r0, wo = _pad_amounts(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (t0, b0), (l0, r0), (0, 0)))
    if depthwise:
        out = np.zeros((n, ho, wo, c), dtype=np.int64)
        for u in range(kh):
            for v in range(kw):
                sl = xp[:, u:u + ho * stride:stride, v:v + wo * stride:stride, :]
                out += sl * w[u, v, :, 0]
        return out
    f = w.shape[3]
    out = np.zeros((n * ho * wo, f), dtype=np.int64)
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, u:u + ho * stride:stride, v:v + wo * stride:stride, :]
            out += sl.reshape(-1, c) @ w[u, v]
    return out.reshape(n, ho, wo, f)


# ---------------------------------------------------------------------------
# Lowering

def _combine_clamp(a, b):
    lo = b[0] if a[0] is None else (a[0] if b[0] is None else max(a[0], b[0]))
    hi = b[1] if a[1] is None else (a[1] if b[1] is None else min(a[1], b[1]))
    return (lo, hi)


def lower(g: Graph) -> Graph:
    """Lower a fully quantized float graph to integer ops.

    relu/relu6 between a producer and its quantizer fold into the requant
    clip limits.  Raises TransformError on anything that cannot be lowered
    exactly (unfolded batch norms, unconverted pools, unquantized edges).
    """
    g.validate()
    lg = Graph()
    lowered = {}   # source graph name -> lowered node name
    meta = {}      # lowered name -> (f, bits, signed)
    clamp = {}     # source name -> pending (lo_real, hi_real)
    cons = g.consumers()

    def fxp_of(src):
        if src not in lowered:
            raise TransformError("edge %s is not quantized" % src)
        return lowered[src]

    for name in topo_order(g):
        node = g.nodes[name]
        op = node.op
        a = node.inputs
        if op == "input":
            for user, _ in cons[name]:
                if user.op != "quantize":
                    raise TransformError(
                        "input %s feeds unquantized %s" % (name, user.name))
            continue
        if op == "const":
            for user, _ in cons[name]:
                if user.op != "quantize":
                    raise TransformError(
                        "const %s feeds unquantized %s" % (name, user.name))
            continue
        if op == "identity":
            lowered[name] = lowered[a[0]]
            if a[0] in clamp:
                clamp[name] = clamp[a[0]]
            continue
        if op == "quantize":
            params = g.qparams[node.attrs["group"]]
            f_q = params.fraction_length()
            src = g.nodes[a[0]]
            if src.op == "input":
                if "shape" not in src.attrs:
                    raise TransformError(
                        "input %s needs a shape attribute" % src.name)
                lg.add(name, "int_input", (), f=f_q, bits=params.bits,
                       signed=params.signed, shape=src.attrs["shape"])
            elif src.op == "const":
                ints = quantize_int(g.values[src.name], params)
                lg.add(name, "int_const", (), f=f_q, bits=params.bits,
                       signed=params.signed)
                lg.values[name] = ints.astype(np.int32)
            else:
                f_in = meta[fxp_of(a[0])][0]
                n, p = params.n, params.p
                lo, hi = n, p
                pend = clamp.get(a[0])
                if pend is not None:
                    rlo, rhi = pend
                    if rlo is not None:
                        lo = max(lo, int(np.rint(rlo * 2.0 ** f_q)))
                    if rhi is not None:
                        hi = min(hi, int(np.rint(rhi * 2.0 ** f_q)))
                lg.add(name, "requant", (fxp_of(a[0]),),
                       shift=int(f_in - f_q), f=f_q, bits=params.bits,
                       signed=params.signed, clip_lo=lo, clip_hi=hi)
            lowered[name] = name
            meta[name] = (f_q, params.bits, params.signed)
            continue
        if op in ("relu", "relu6"):
            bound = (0.0, None) if op == "relu" else (0.0, 6.0)
            prior = clamp.get(a[0], (None, None))
            clamp[name] = _combine_clamp(prior, bound)
            lowered[name] = lowered[a[0]]
            for user, _ in cons[name]:
                if user.op not in ("quantize", "relu", "relu6"):
                    raise TransformError(
                        "%s output of %s reaches %s without a quantizer"
                        % (op, name, user.name))
            continue
        if op in ("conv2d", "depthwise_conv2d", "matmul"):
            xl, wl = fxp_of(a[0]), fxp_of(a[1])
            fx, fw = meta[xl][0], meta[wl][0]
            kind = "int_" + op
            lg.add(name, kind, (xl, wl),
                   stride=int(node.attrs.get("stride", 1)),
                   pad=node.attrs.get("pad", "same"),
                   f=fx + fw, bits=ACC_BITS, signed=True)
            if op == "matmul":
                lg.nodes[name].attrs.pop("stride")
                lg.nodes[name].attrs.pop("pad")
            lowered[name] = name
            meta[name] = (fx + fw, ACC_BITS, True)
            continue
        if op in ("bias_add", "eltwise_add", "maximum", "mul", "concat"):
            srcs = [fxp_of(s) for s in a]
            fs = [meta[s][0] for s in srcs]
            if op == "mul":
                f_out = fs[0] + fs[1]
                kind = "int_mul"
            else:
                if len(set(fs)) != 1:
                    raise TransformError(
                        "%s %s mixes fraction lengths %s" % (op, name, fs))
                f_out = fs[0]
                kind = {"bias_add": "int_add", "eltwise_add": "int_add",
                        "maximum": "int_maximum", "concat": "int_concat"}[op]
            attrs = {"f": f_out, "bits": ACC_BITS, "signed": True}
            if op == "concat":
                attrs["axis"] = int(node.attrs.get("axis", -1))
            lg.add(name, kind, tuple(srcs), **attrs)
            lowered[name] = name
            meta[name] = (f_out, ACC_BITS, True)
            continue
        if op == "flatten":
            xl = fxp_of(a[0])
            fm = meta[xl]
            lg.add(name, "int_flatten", (xl,), f=fm[0], bits=fm[1],
                   signed=fm[2])
            lowered[name] = name
            meta[name] = fm
            continue
        raise TransformError("op %s cannot be lowered; run the float-graph "
                             "rewrites first" % op)

    lg.inputs = [lowered[q.name] for q in
                 (g.nodes[n] for n in g.nodes) if q.op == "quantize"
                 and g.nodes[q.inputs[0]].op == "input"]
    lg.outputs = [fxp_of(o) for o in g.outputs]
    lg.validate()
    return lg


def manifest(lg: Graph):
    """Per-node scale table for the deployment bundle."""
    rows = []
    for name in topo_order(lg):
        node = lg.nodes[name]
        at = node.attrs
        if "f" not in at:
            continue
        rows.append({
            "name": name, "op": node.op, "f": int(at["f"]),
            "bits": int(at["bits"]), "signed": int(bool(at["signed"])),
            "shift": int(at["shift"]) if "shift" in at else "",
            "clip_lo": int(at["clip_lo"]) if "clip_lo" in at else "",
            "clip_hi": int(at["clip_hi"]) if "clip_hi" in at else "",
        })
    return rows


MANIFEST_FIELDS = ["name", "op", "f", "bits", "signed",
                   "shift", "clip_lo", "clip_hi"]


def save_bundle(lg: Graph, dirpath: str):
    """graph.ir + tensors/ + scales.csv in one directory."""
    os.makedirs(dirpath, exist_ok=True)
    save_graph(lg, os.path.join(dirpath, "graph.ir"))
    with open(os.path.join(dirpath, "scales.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        w.writeheader()
        w.writerows(manifest(lg))


def load_bundle(dirpath: str) -> Graph:
    return load_graph(os.path.join(dirpath, "graph.ir"))


# ---------------------------------------------------------------------------
# Integer execution

def execute_integer(lg: Graph, feeds: dict, collect=()):
    """Run the lowered graph on integer feeds.

    feeds maps int_input names to integer arrays (level indices).  Returns
    (outputs, collected, stats); stats["saturations"] counts requant
    values that fell outside the representable integer range, keyed by
    node name.
    """
    vals = {}
    sat = {}
    for name in topo_order(lg):
        node = lg.nodes[name]
        op = node.op
        a = node.inputs
        at = node.attrs
        if op == "int_input":
            if name not in feeds:
                raise GraphError("missing feed for input %s" % name)
            x = np.asarray(feeds[name])
            if not np.issubdtype(x.dtype, np.integer):
                raise ContractError("input %s must be integer" % name)
            x = x.astype(np.int64)
            n, p = int_range(int(at["bits"]), bool(at["signed"]))
            if x.size and (x.min() < n or x.max() > p):
                raise ContractError("input %s outside [%d, %d]" % (name, n, p))
            vals[name] = x
        elif op == "int_const":
            vals[name] = lg.values[name].astype(np.int64)
        elif op == "int_conv2d":
            v = _int_conv2d(vals[a[0]], vals[a[1]],
                            int(at.get("stride", 1)), at.get("pad", "same"))
            _check_acc(name, v)
            vals[name] = v
        elif op == "int_depthwise_conv2d":
            v = _int_conv2d(vals[a[0]], vals[a[1]],
                            int(at.get("stride", 1)), at.get("pad", "same"),
                            depthwise=True)
            _check_acc(name, v)
            vals[name] = v
        elif op == "int_matmul":
            v = vals[a[0]] @ vals[a[1]]
            _check_acc(name, v)
            vals[name] = v
        elif op == "int_add":
            v = vals[a[0]] + vals[a[1]]
            _check_acc(name, v)
            vals[name] = v
        elif op == "int_mul":
            v = vals[a[0]] * vals[a[1]]
            _check_acc(name, v)
            vals[name] = v
        elif op == "int_maximum":
            vals[name] = np.maximum(vals[a[0]], vals[a[1]])
        elif op == "int_concat":
            vals[name] = np.concatenate([vals[i] for i in a],
                                        axis=int(at.get("axis", -1)))
        elif op == "int_flatten":
            x = vals[a[0]]
            vals[name] = x.reshape(x.shape[0], -1)
        elif op == "requant":
            r = _shift_round(vals[a[0]], int(at["shift"]))
            n, p = int_range(int(at["bits"]), bool(at["signed"]))
            outside = int(np.count_nonzero((r < n) | (r > p)))
            if outside:
                sat[name] = sat.get(name, 0) + outside
            vals[name] = np.clip(r, int(at["clip_lo"]), int(at["clip_hi"]))
        else:
            raise GraphError("cannot execute lowered op %s" % op)
    outputs = {o: vals[o] for o in lg.outputs}
    collected = {c: vals[c] for c in collect if c in vals}
    return outputs, collected, {"saturations": sat}


# ---------------------------------------------------------------------------
# Bit-exactness audit

@dataclass
class BitexactReport:
    ok: bool
    trials: int
    nodes_checked: int
    mismatches: list = field(default_factory=list)  # (trial, node, index, want, got)

    def __str__(self):
        if self.ok:
            return ("bit-exact: %d trials x %d quantizer outputs"
                    % (self.trials, self.nodes_checked))
        t, node, idx, want, got = self.mismatches[0]
        return ("MISMATCH at trial %d node %s flat index %d: emulated level "
                "%d, integer level %d (+%d more)"
                % (t, node, idx, want, got, len(self.mismatches) - 1))


def bitexact_check(gq: Graph, lg: Graph, rng, trials: int = 8,
                   batch: int = 2) -> BitexactReport:
    """Compare float emulation against integer execution level by level.

    Random inputs span 1.25x the input threshold so both the interior and
    the saturating regions are exercised.  Every quantize node's emulated
    output, divided by its scale, must equal the lowered node's integers.
    """
    from .execute import run
    from .graph import infer_shapes

    qnodes = [n for n in gq.nodes.values() if n.op == "quantize"]
    qnames = [n.name for n in qnodes]
    in_q = {}
    for n in qnodes:
        if gq.nodes[n.inputs[0]].op == "input":
            in_q[n.inputs[0]] = n
    shapes = infer_shapes(gq, batch=batch)
    report = BitexactReport(True, trials, len(qnames))
    stream = rng.stream("bitexact")
    for trial in range(trials):
        feeds = {}
        int_feeds = {}
        for iname, qn in in_q.items():
            params = gq.qparams[qn.attrs["group"]]
            span = 1.25 * (2.0 ** np.ceil(params.log2_t))
            x = stream.uniform(-span, span, size=shapes[iname])
            feeds[iname] = x
            int_feeds[qn.name] = quantize_int(x, params)
        _, emu = run(gq, feeds, collect=set(qnames))
        _, ivals, _ = execute_integer(lg, int_feeds, collect=qnames)
        for qn in qnodes:
            params = gq.qparams[qn.attrs["group"]]
            want = np.rint(emu[qn.name] / params.scale()).astype(np.int64)
            got = ivals[qn.name]
            if want.shape != got.shape:
                report.ok = False
                report.mismatches.append((trial, qn.name, -1, -1, -1))
                continue
            if not np.array_equal(want, got):
                bad = np.flatnonzero(want.ravel() != got.ravel())
                for idx in bad[:3]:
                    report.mismatches.append(
                        (trial, qn.name, int(idx),
                         int(want.ravel()[idx]), int(got.ravel()[idx])))
                report.ok = False
        if not report.ok and len(report.mismatches) >= 10:
            break
    return report
