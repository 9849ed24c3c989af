"""Command line front end.  One subcommand per pipeline stage.

The stages compose through files: `transform` and `quantize` rewrite
graph IR, `calibrate` fills in thresholds, `train` fine-tunes, `lower`
emits the integer bundle, `infer` and `bitexact` execute.  `toy`,
`gradcheck`, and `guidelines` are self-contained diagnostics.  Report
paths hold CSV files with rendered PNG figures next to them.
"""

import argparse
import os
import sys

from . import reports
from .data import load_dataset, make_dataset
from .fxp import bitexact_check, load_bundle, lower, save_bundle
from .graph import Graph, load_graph, save_graph
from .optim import adam_guidelines
from .quantize import gradient_check
from .tensor import Rng
from .toy import (OPTIMIZERS, ToyConfig, compare_clipped_vs_tqt,
                  measure_oscillation, toy_l2_run)
from .train import (MODES, TrainRunConfig, calibrate_graph,
                    calibration_batch, evaluate, run_desk_suite,
                    train_quantized)
from .transforms import (PrecisionConfig, avgpool_to_dwconv,
                         collapse_concat, fold_batchnorm,
                         insert_quant_layers, optimize, splice_identity)

PASSES = {
    "fold-bn": fold_batchnorm,
    "collapse-concat": collapse_concat,
    "splice-identity": splice_identity,
    "avgpool-to-dwconv": avgpool_to_dwconv,
}


def _outdir(args, default):
    out = args.out or os.path.join("tqt-out", default)
    os.makedirs(out, exist_ok=True)
    return out


def _dataset(args):
    if args.data:
        return load_dataset(args.data)
    return make_dataset(args.seed)


def _graph(args) -> Graph:
    if not args.graph:
        raise ValueError("this command needs --graph")
    return load_graph(args.graph)


def _precision(args) -> PrecisionConfig:
    if args.bits_w or args.bits_a:
        return PrecisionConfig(args.bits_w or 8, args.bits_a or 8)
    return PrecisionConfig.named(args.precision)


def cmd_transform(args):
    g = _graph(args)
    names = list(PASSES) if args.passes == "all" else args.passes.split(",")
    for name in names:
        if name not in PASSES:
            raise ValueError("unknown pass %r (have: %s)"
                             % (name, ", ".join(PASSES)))
        g = PASSES[name](g)
    out = _outdir(args, "transform")
    save_graph(g, os.path.join(out, "graph.ir"))
    print("applied %s -> %s (%d nodes)" % ("+".join(names), out, len(g.nodes)))


def cmd_quantize(args):
    g = optimize(_graph(args))
    gq = insert_quant_layers(g, _precision(args))
    out = _outdir(args, "quantize")
    save_graph(gq, os.path.join(out, "graph.ir"))
    nq = sum(1 for n in gq.nodes.values() if n.op == "quantize")
    print("inserted %d quantizers in %d groups -> %s"
          % (nq, len(gq.qparams), out))


def cmd_calibrate(args):
    g = _graph(args)
    if not any(n.op == "quantize" for n in g.nodes.values()):
        raise ValueError("graph has no quantizers; run `tqt quantize` first")
    ds = _dataset(args)
    rows = calibrate_graph(g, calibration_batch(ds, args.seed), args.mode)
    out = _outdir(args, "calibrate")
    save_graph(g, os.path.join(out, "graph.ir"))
    reports.write_calibration_csv(rows, os.path.join(out, "calibration.csv"))
    reports.calibration_figure(rows, os.path.join(out, "calibration.png"))
    print("calibrated %d tensors (%s policy) -> %s" % (len(rows), args.mode, out))


def cmd_train(args):
    ds = _dataset(args)
    out = _outdir(args, "train")
    if args.suite:
        suite = run_desk_suite(seed=args.seed, epochs=args.epochs,
                               batch=args.batch, dataset=ds)
        reports.write_suite_report(suite, out)
        print("float %.4f | float-retrain %.4f"
              % (suite.float_top1, suite.float_retrain_top1))
        for label, rep in suite.runs.items():
            print("%-20s static %.4f  final %.4f" %
                  (label, rep.static_top1, rep.final_top1))
        return
    g = load_graph(args.graph) if args.graph else None
    cfg = TrainRunConfig(mode=args.mode, precision=args.precision,
                         epochs=args.epochs, batch=args.batch,
                         seed=args.seed, graph=g, dataset=ds)
    rep = train_quantized(cfg)
    save_graph(rep.graph, os.path.join(out, "graph.ir"))
    reports.write_train_report(rep, out)
    print("%s %s: static %.4f -> final %.4f (best step %d) -> %s"
          % (rep.mode, rep.precision, rep.static_top1, rep.final_top1,
             rep.best_step, out))


def cmd_lower(args):
    lg = lower(_graph(args))
    out = _outdir(args, "lower")
    save_bundle(lg, out)
    print("lowered %d nodes -> %s (graph.ir, scales.csv, tensors)"
          % (len(lg.nodes), out))


def cmd_infer(args):
    g = _graph(args)
    ds = _dataset(args)
    top1, loss = evaluate(g, ds)
    print("top1 %.4f  loss %.4f  (%d images)" % (top1, loss, len(ds.x_eval)))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        reports.write_history_csv([(0, top1, loss)],
                                  os.path.join(args.out, "metrics.csv"))


def cmd_bitexact(args):
    gq = _graph(args)
    lg = load_bundle(args.lowered) if args.lowered else lower(gq)
    rep = bitexact_check(gq, lg, Rng(args.seed), trials=args.trials)
    print(rep)
    if not rep.ok:
        raise RuntimeError("integer execution diverged from emulation")


def cmd_toy(args):
    out = _outdir(args, "toy")
    if args.heavy_tail:
        rep = compare_clipped_vs_tqt(seed=args.seed)
        reports.write_compare_csv(rep, os.path.join(out, "compare.csv"))
        reports.compare_figure(rep, os.path.join(out, "compare.png"))
        print("loss tqt %.6f < clipped %.6f: %s | t_tqt %.3f  max|x| %.3f"
              % (rep.loss_tqt, rep.loss_clipped,
                 rep.loss_tqt < rep.loss_clipped, rep.t_tqt, rep.data_max_abs))
        return
    chosen = OPTIMIZERS if args.optimizer == "suite" else (args.optimizer,)
    curves = []
    for name in chosen:
        cfg = ToyConfig(bits=args.bits_w or 8, sigma=args.sigma,
                        optimizer=name, lr=args.lr, steps=args.steps,
                        seed=args.seed)
        traj = toy_l2_run(cfg)
        curves.append((name, traj))
        reports.write_toy_csv(traj, os.path.join(out, name + ".csv"))
        osc = measure_oscillation(traj)
        print("%-15s final log2_t %+8.4f  %s  T %.1f  r_g %.1f  maxdev %.4f%s"
              % (name, traj.log2_t[-1],
                 "diverged" if traj.diverged else "converged",
                 osc.period, osc.r_g, osc.max_deviation,
                 "" if osc.reliable else "  (unreliable)"))
    reports.toy_figure(curves, os.path.join(out, "toy.png"))


def cmd_gradcheck(args):
    bad = 0
    for bits in (3, 4, 8):
        for signed in (True, False):
            rep = gradient_check(bits, signed, seed=args.seed)
            print(rep)
            bad += not rep.ok
    if bad:
        raise RuntimeError("%d gradient checks failed" % bad)


def cmd_guidelines(args):
    print("bits  alpha_max   beta1_min  beta2_min   steps")
    for bits in args.bits:
        gl = adam_guidelines(bits)
        print("%4d  %-10.4g  %-9.4g  %-10.6g  %.3g"
              % (gl.bits, gl.alpha_max, gl.beta1_min, gl.beta2_min,
                 gl.steps_estimate))


def build_parser():
    ap = argparse.ArgumentParser(
        prog="tqt",
        description="power-of-2 quantization with trained thresholds")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--graph", help="graph IR file")
        p.add_argument("--data", help="dataset directory (default: bundled synthetic)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output directory")
        return p

    p = add("transform", cmd_transform, "apply float-graph rewrite passes")
    p.add_argument("--passes", default="all",
                   help="comma list of %s" % ",".join(PASSES))

    p = add("quantize", cmd_quantize, "insert quantize nodes")
    p.add_argument("--precision", default="int8", choices=("int8", "int4"))
    p.add_argument("--bits-w", type=int, dest="bits_w")
    p.add_argument("--bits-a", type=int, dest="bits_a")

    p = add("calibrate", cmd_calibrate, "set thresholds from statistics")
    p.add_argument("--mode", default="static", choices=MODES)

    p = add("train", cmd_train, "calibrate and fine-tune a quantized model")
    p.add_argument("--mode", default="retrain-wt-th", choices=MODES)
    p.add_argument("--precision", default="int8", choices=("int8", "int4"))
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--suite", action="store_true",
                   help="run the full mode/precision comparison grid")

    add("lower", cmd_lower, "emit the integer deployment bundle")

    add("infer", cmd_infer, "evaluate a graph on the evaluation split")

    p = add("bitexact", cmd_bitexact, "emulated vs integer execution check")
    p.add_argument("--lowered", help="bundle directory (default: lower in memory)")
    p.add_argument("--trials", type=int, default=50)

    p = add("toy", cmd_toy, "1-D threshold training dynamics")
    p.add_argument("--optimizer", default="suite",
                   choices=OPTIMIZERS + ("suite",))
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--bits-w", type=int, dest="bits_w")
    p.add_argument("--heavy-tail", action="store_true",
                   help="outlier robustness comparison instead")

    add("gradcheck", cmd_gradcheck, "finite-difference gradient checks")

    p = add("guidelines", cmd_guidelines, "Adam hyperparameter bounds per bit width")
    p.add_argument("--bits", type=int, nargs="+", default=[2, 3, 4, 5, 6, 7, 8])

    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, RuntimeError, OSError) as e:
        print("tqt-error: %s: %s" % (type(e).__name__, e), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
