"""Quantized retraining on the desk-scale task.

Three run modes: "static" calibrates thresholds and stops; "retrain-wt"
fine-tunes weights against frozen thresholds; "retrain-wt-th" trains
weights and log2 thresholds jointly on the task loss.  Threshold
initialization follows the mode: fixed thresholds start from the max
(weights) and the KL calibration (activations), trained weight
thresholds start from 3 standard deviations instead, trading clipped
tails for resolution that the training can then adjust.

Both parameter groups use Adam(0.9, 0.999) with staircase learning-rate
decay scaled by batch size, and trained thresholds are incrementally
frozen once they settle inside a single ceiling bin.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .calibrate import (Histogram, T_FLOOR, calib_klj, calib_max, calib_nsd,
                        threshold_policy)
from .data import Dataset, batch_stream, load_dataset, make_dataset
from .errors import ContractError, TrainingError
from .execute import build_tape, run
from .graph import Graph, load_graph, topo_order
from .model import (BN_MOMENTUM, _trainable, build_desk_graph, init_weights,
                    pretrain_float)
from .optim import AdamState, FreezeController, adam_step, lr_schedule
from .tensor import Rng
from .transforms import PrecisionConfig, insert_quant_layers, optimize

MODES = ("static", "retrain-wt", "retrain-wt-th")
CALIB_IMAGES = 50


@dataclass
class TrainRunConfig:
    mode: str = "retrain-wt-th"
    precision: str = "int8"
    epochs: int = 5
    batch: int = 4
    seed: int = 0
    eval_every: int = 200
    graph: object = None    # Graph, path, or None to build + pretrain the desk model
    dataset: object = None  # Dataset, path, or None for the bundled task

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError("mode must be one of %s, got %r"
                                % (", ".join(MODES), self.mode))
        if not 0 <= self.epochs <= 5:
            raise ContractError("epochs must be in [0, 5], got %r" % (self.epochs,))
        if self.batch < 1:
            raise ContractError("batch must be >= 1")
        if self.eval_every < 1:
            raise ContractError("eval_every must be >= 1")


@dataclass
class TrainReport:
    mode: str
    precision: str
    static_top1: float        # accuracy right after calibration
    static_loss: float
    final_top1: float         # best checkpoint, re-evaluated
    final_loss: float
    best_step: int
    last5_top1: float         # mean of the last 5 validations (best vs mean caveat)
    history: list             # (step, top1, loss) per validation
    train_loss: np.ndarray    # per-step training loss
    deviations: dict          # group -> ceil(log2 t) final minus initial
    frozen: tuple             # (step, group) freeze events, in order
    graph: Graph              # quantized graph holding the reported parameters
    threshold_trace: dict = field(default_factory=dict)  # group -> log2_t per step
    grad_trace: dict = field(default_factory=dict)       # group -> dL/dlog2_t per step


def softmax_xent(logits, labels):
    """Mean cross entropy of integer labels under softmax(logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


def evaluate(g: Graph, data, batch: int = 256):
    """Deterministic (top-1, mean cross entropy) over an evaluation split.

    `data` is a Dataset (its eval split is used) or an (x, y) pair.
    """
    if isinstance(data, Dataset):
        x, y = data.x_eval, data.y_eval
    else:
        x, y = data
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) != len(y):
        raise ContractError("evaluate: %d inputs vs %d labels" % (len(x), len(y)))
    hits = 0
    losses = []
    for i in range(0, len(x), batch):
        out, _ = run(g, {g.inputs[0]: x[i:i + batch]})
        logits = out[g.outputs[0]]
        yy = y[i:i + batch]
        hits += int(np.sum(np.argmax(logits, axis=1) == yy))
        losses.append(softmax_xent(logits, yy) * len(yy))
    return hits / len(x), float(np.sum(losses) / len(x))


# ---------------------------------------------------------------------------
# Calibration over a graph

def _weight_threshold(x, kind):
    """Returns (threshold, method actually used)."""
    if kind == "3sd" and np.size(x) >= 8:
        return calib_nsd(x, 3.0), "3sd"
    # tiny tensors have no meaningful spread; fall back to the max
    return calib_max(x), "max"


def calibrate_graph(g: Graph, calib_x, mode: str = "static"):
    """Set every quantizer group's threshold from calibration statistics.

    Weight-role quantizers read their source tensor directly.  Activation
    groups are calibrated strictly in topological order, one histogram
    pass per group; quantizers whose group has not been calibrated yet
    run as identity, so each group observes its inputs exactly as they
    will arrive at inference time.  Mutates g; returns report rows, one
    per quantize node: (tensor, method, t, log2_t, bits, signed).
    """
    policy = threshold_policy(mode)
    act_groups = []
    members = {}
    rows = []

    def report(node, method, t):
        params = g.qparams[node.attrs["group"]]
        rows.append({"tensor": node.inputs[0], "method": method,
                     "t": max(float(t), T_FLOOR), "log2_t": params.log2_t,
                     "bits": params.bits, "signed": int(params.signed)})

    for name in topo_order(g):
        node = g.nodes[name]
        if node.op != "quantize":
            continue
        grp = node.attrs["group"]
        if node.attrs.get("role") == "weight":
            t, used = _weight_threshold(g.values[node.inputs[0]],
                                        policy.weights)
            g.qparams[grp].log2_t = float(np.log2(max(t, T_FLOOR)))
            report(node, used, t)
        else:
            if grp not in members:
                act_groups.append(grp)
            members.setdefault(grp, []).append(node)
    feeds = {g.inputs[0]: np.asarray(calib_x, dtype=np.float64)}
    remaining = set(act_groups)
    for target in act_groups:
        hist = Histogram()

        def hook(node, params, x, _t=target):
            if node.attrs["group"] == _t:
                hist.add(x)

        run(g, feeds, hook=hook, passthrough=frozenset(remaining))
        params = g.qparams[target]
        t = calib_klj(hist, params.bits, params.signed)
        params.log2_t = float(np.log2(max(t, T_FLOOR)))
        remaining.discard(target)
        for node in members[target]:
            report(node, policy.activations, t)
    return rows


def calibration_batch(ds: Dataset, seed: int):
    """Unlabeled calibration images sampled from the evaluation split."""
    gen = Rng(seed).stream("calibration")
    k = min(CALIB_IMAGES, len(ds.x_eval))
    idx = gen.choice(len(ds.x_eval), size=k, replace=False)
    return ds.x_eval[idx]


# ---------------------------------------------------------------------------
# Training loop

def _train_loop(g, ds, epochs, batch, seed, eval_every, train_thresholds, tag):
    """Shared fine-tuning loop; mutates g toward the best checkpoint.

    Works on quantized and plain float graphs alike: thresholds are only
    touched when requested, batch norm (if any survives optimization)
    runs on batch statistics during the first epoch, and the weight and
    threshold learning rates follow their staircase schedules.
    """
    rng = Rng(seed)
    names = _trainable(g)
    weights = {n: np.array(g.values[n], dtype=np.float64) for n in names}
    w_states = {n: AdamState() for n in names}
    tgroups = sorted(g.qparams) if train_thresholds else []
    thresholds = {grp: float(g.qparams[grp].log2_t) for grp in tgroups}
    t_states = {grp: AdamState() for grp in tgroups}
    freezer = FreezeController(batch) if train_thresholds else None
    bn_nodes = tuple(n for n, nd in g.nodes.items() if nd.op == "batch_norm")
    # moving statistics are model state too: the best checkpoint must pin
    # them, or stats drift after the best step leaks into the final model
    stat_names = tuple(s for bn in bn_nodes
                       for s in g.nodes[bn].inputs[3:5])
    n_train = len(ds.x_train)
    steps_per_epoch = max(1, n_train // batch)
    total = steps_per_epoch * epochs
    history = []
    train_loss = np.empty(total)
    trace = {grp: np.empty(total) for grp in tgroups}
    gtrace = {grp: np.empty(total) for grp in tgroups}
    frozen_order = []

    def sync_graph():
        for n in names:
            g.values[n] = weights[n]
        for grp in tgroups:
            g.qparams[grp].log2_t = thresholds[grp]

    # the starting point is a valid checkpoint; fine-tuning can then never
    # hand back something worse than what it was given
    def snapshot(top1, at):
        return (top1, at, {n: weights[n].copy() for n in names},
                dict(thresholds),
                {s: np.array(g.values[s]) for s in stat_names})

    top1, eloss = evaluate(g, ds)
    history.append((0, top1, eloss))
    best = snapshot(top1, 0)

    for step, idx in enumerate(batch_stream(rng, n_train, batch, total)):
        epoch = step // steps_per_epoch
        bn_train = bn_nodes if epoch < 1 else ()
        lr_w = lr_schedule("weights", step, batch)
        lr_t = lr_schedule("thresholds", step, batch)
        tr = build_tape(g, {g.inputs[0]: ds.x_train[idx]},
                        labels=ds.y_train[idx], bn_train=bn_train,
                        weight_overrides=weights,
                        threshold_overrides=thresholds)
        loss = float(tr.tape.val(tr.loss_id))
        if not np.isfinite(loss):
            raise TrainingError(
                "loss became non-finite at step %d/%d (%s, lr_w=%.3g, "
                "lr_t=%.3g)" % (step, total, tag, lr_w, lr_t))
        grads = tr.tape.backprop(tr.loss_id)
        for n in names:
            gr = grads.get(tr.weight_ids[n])
            if gr is not None:
                weights[n] = weights[n] + adam_step(w_states[n], gr, lr_w)
        if train_thresholds:
            tgrads = {}
            for grp in tgroups:
                gid = tr.threshold_ids.get(grp)
                gr = grads.get(gid) if gid is not None else None
                tgrads[grp] = float(gr) if gr is not None else 0.0
            pick = freezer.freeze_step(step, thresholds, tgrads)
            if pick is not None:
                frozen_order.append((step, pick))
            for grp in tgroups:
                gtrace[grp][step] = tgrads[grp]
                if grp in freezer.frozen:
                    continue
                thresholds[grp] += float(
                    adam_step(t_states[grp], tgrads[grp], lr_t))
        for bn in bn_train:
            mean, var = tr.bn_stats[bn]
            mn, vn = g.nodes[bn].inputs[3], g.nodes[bn].inputs[4]
            g.values[mn] = BN_MOMENTUM * g.values[mn] + (1 - BN_MOMENTUM) * mean
            g.values[vn] = BN_MOMENTUM * g.values[vn] + (1 - BN_MOMENTUM) * var
        train_loss[step] = loss
        for grp in tgroups:
            trace[grp][step] = thresholds[grp]
        if (step + 1) % eval_every == 0 or step + 1 == total:
            sync_graph()
            top1, eloss = evaluate(g, ds)
            history.append((step + 1, top1, eloss))
            if top1 > best[0]:
                best = snapshot(top1, step + 1)
    _, best_step, bw, bt, bs = best
    for n in names:
        g.values[n] = bw[n]
    for grp in tgroups:
        g.qparams[grp].log2_t = bt[grp]
    for s in stat_names:
        g.values[s] = bs[s]
    final_top1, final_loss = evaluate(g, ds)
    last5 = float(np.mean([h[1] for h in history[-5:]]))
    return {"history": history, "best_step": best_step,
            "final_top1": final_top1, "final_loss": final_loss,
            "last5": last5, "train_loss": train_loss, "trace": trace,
            "grad_trace": gtrace, "frozen": tuple(frozen_order)}


def _resolve_dataset(spec, seed):
    if spec is None:
        return make_dataset(seed)
    if isinstance(spec, Dataset):
        return spec
    return load_dataset(str(spec))


def _resolve_graph(spec, ds, seed):
    if spec is None:
        g = build_desk_graph()
        init_weights(g, Rng(seed))
        pretrain_float(g, ds, seed)
        return g
    if isinstance(spec, Graph):
        return spec
    return load_graph(str(spec))


def train_quantized(cfg: TrainRunConfig) -> TrainReport:
    """Calibrate and (mode permitting) retrain a quantized graph.

    Returns the metrics bundle plus the quantized graph holding the best
    checkpoint.  Identical config and seed reproduce identical numbers.
    Zero epochs, like static mode, reports calibrated metrics only.
    """
    ds = _resolve_dataset(cfg.dataset, cfg.seed)
    gfloat = _resolve_graph(cfg.graph, ds, cfg.seed)
    gq = insert_quant_layers(optimize(gfloat),
                             PrecisionConfig.named(cfg.precision))
    calibrate_graph(gq, calibration_batch(ds, cfg.seed), cfg.mode)
    init_ceil = {grp: math.ceil(p.log2_t) for grp, p in gq.qparams.items()}
    static_top1, static_loss = evaluate(gq, ds)
    if cfg.mode == "static" or cfg.epochs == 0:
        return TrainReport(
            cfg.mode, cfg.precision, static_top1, static_loss,
            static_top1, static_loss, 0, static_top1,
            [(0, static_top1, static_loss)], np.zeros(0),
            {grp: 0 for grp in gq.qparams}, (), gq)
    out = _train_loop(gq, ds, cfg.epochs, cfg.batch, cfg.seed, cfg.eval_every,
                      train_thresholds=(cfg.mode == "retrain-wt-th"),
                      tag="%s %s" % (cfg.mode, cfg.precision))
    deviations = {grp: math.ceil(gq.qparams[grp].log2_t) - init_ceil[grp]
                  for grp in gq.qparams}
    return TrainReport(
        cfg.mode, cfg.precision, static_top1, static_loss,
        out["final_top1"], out["final_loss"], out["best_step"], out["last5"],
        out["history"], out["train_loss"], deviations, out["frozen"], gq,
        out["trace"], out["grad_trace"])


def float_retrain(g: Graph, ds: Dataset, epochs: int = 5, batch: int = 4,
                  seed: int = 0, eval_every: int = 200) -> TrainReport:
    """Weight-only float fine-tuning under the identical recipe.

    The quantized runs start from the same pretrained weights, so this
    is the fair reference accuracy for them.
    """
    g = g.clone()
    start_top1, start_loss = evaluate(g, ds)
    out = _train_loop(g, ds, epochs, batch, seed, eval_every,
                      train_thresholds=False, tag="float-wt")
    return TrainReport(
        "float-wt", "float", start_top1, start_loss,
        out["final_top1"], out["final_loss"], out["best_step"], out["last5"],
        out["history"], out["train_loss"], {}, (), g, out["trace"],
        out["grad_trace"])


@dataclass
class DeskSuiteReport:
    float_top1: float          # pretrained model on the evaluation split
    float_retrain_top1: float  # after weight-only fine-tuning, same recipe
    runs: dict                 # label -> TrainReport
    pretrain_history: list


SUITE_RUNS = (
    ("static-int8", "static", "int8"),
    ("retrain-wt-int8", "retrain-wt", "int8"),
    ("retrain-wt-th-int8", "retrain-wt-th", "int8"),
    ("retrain-wt-th-int4", "retrain-wt-th", "int4"),
)


def run_desk_suite(seed: int = 0, epochs: int = 5, batch: int = 4,
                   dataset=None, eval_every: int = 200) -> DeskSuiteReport:
    """Pretrain once, then run the full mode/precision comparison grid.

    Every run shares the pretrained weights, the dataset, and the seed,
    so differences between rows come from the quantization mode alone.
    """
    ds = _resolve_dataset(dataset, seed)
    g = build_desk_graph()
    init_weights(g, Rng(seed))
    pretrain_history = pretrain_float(g, ds, seed)
    float_top1, _ = evaluate(g, ds)
    fr = float_retrain(g, ds, epochs=epochs, batch=batch, seed=seed,
                       eval_every=eval_every)
    runs = {}
    for label, mode, precision in SUITE_RUNS:
        cfg = TrainRunConfig(mode=mode, precision=precision, epochs=epochs,
                             batch=batch, seed=seed, eval_every=eval_every,
                             graph=g, dataset=ds)
        runs[label] = train_quantized(cfg)
    return DeskSuiteReport(float_top1, fr.final_top1, runs, pretrain_history)
