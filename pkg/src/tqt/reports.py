"""CSV and figure writers shared by the CLI and the experiment drivers.

Everything here is presentation only: functions take finished report
objects, write delimited text next to rendered PNGs, and return the list
of paths they produced.  Nothing mutates the reports.
"""

import csv
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

CALIBRATION_FIELDS = ["tensor", "method", "t", "log2_t", "bits", "signed"]
HISTORY_FIELDS = ["step", "top1", "loss"]
SUITE_FIELDS = ["run", "mode", "precision", "static_top1", "final_top1",
                "best_step", "last5_top1", "mean_deviation"]
TOY_FIELDS = ["step", "log2_t", "loss", "grad"]


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _write_rows(path, fields, rows):
    _ensure_parent(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return path


def write_calibration_csv(rows, path):
    return _write_rows(path, CALIBRATION_FIELDS, rows)


def write_history_csv(history, path):
    rows = [{"step": s, "top1": t, "loss": l} for s, t, l in history]
    return _write_rows(path, HISTORY_FIELDS, rows)


def write_train_log_csv(report, path):
    """Per-step log: loss plus log2_t / gradient / frozen flag per group."""
    groups = sorted(report.threshold_trace)
    frozen_at = {grp: step for step, grp in report.frozen}
    fields = ["step", "loss"]
    for grp in groups:
        fields += ["log2_t:" + grp, "grad:" + grp, "frozen:" + grp]
    rows = []
    for step in range(len(report.train_loss)):
        row = {"step": step, "loss": repr(float(report.train_loss[step]))}
        for grp in groups:
            row["log2_t:" + grp] = repr(float(report.threshold_trace[grp][step]))
            row["grad:" + grp] = repr(float(report.grad_trace[grp][step]))
            row["frozen:" + grp] = int(frozen_at.get(grp, len(report.train_loss)) <= step)
        rows.append(row)
    return _write_rows(path, fields, rows)


def write_suite_csv(suite, path):
    rows = []
    for label, rep in suite.runs.items():
        devs = list(rep.deviations.values())
        rows.append({
            "run": label, "mode": rep.mode, "precision": rep.precision,
            "static_top1": rep.static_top1, "final_top1": rep.final_top1,
            "best_step": rep.best_step, "last5_top1": rep.last5_top1,
            "mean_deviation": float(np.mean(devs)) if devs else 0.0,
        })
    rows.append({"run": "float", "mode": "none", "precision": "float",
                 "static_top1": suite.float_top1,
                 "final_top1": suite.float_top1,
                 "best_step": 0, "last5_top1": suite.float_top1,
                 "mean_deviation": 0.0})
    rows.append({"run": "float-retrain", "mode": "retrain-wt",
                 "precision": "float", "static_top1": suite.float_top1,
                 "final_top1": suite.float_retrain_top1, "best_step": 0,
                 "last5_top1": suite.float_retrain_top1,
                 "mean_deviation": 0.0})
    return _write_rows(path, SUITE_FIELDS, rows)


def write_compare_csv(rep, path):
    fields = ["step", "t_tqt", "clip_hi", "loss_tqt", "loss_clipped"]
    rows = [{"step": i,
             "t_tqt": repr(float(2.0 ** rep.tqt_log2_t[i])),
             "clip_hi": repr(float(rep.clip_hi_trace[i])),
             "loss_tqt": repr(float(rep.tqt_loss_trace[i])),
             "loss_clipped": repr(float(rep.clip_loss_trace[i]))}
            for i in range(len(rep.tqt_log2_t))]
    return _write_rows(path, fields, rows)


def write_toy_csv(traj, path):
    rows = [{"step": i, "log2_t": repr(float(traj.log2_t[i])),
             "loss": repr(float(traj.loss[i])),
             "grad": repr(float(traj.grad[i]))}
            for i in range(len(traj))]
    return _write_rows(path, TOY_FIELDS, rows)


# ---------------------------------------------------------------------------
# Figures

def _save(fig, path):
    _ensure_parent(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def training_figure(report, path, title=None):
    """Validation accuracy and (smoothed) training loss on twin panels."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    if report.history:
        steps = [h[0] for h in report.history]
        top1 = [100.0 * h[1] for h in report.history]
        ax1.plot(steps, top1, marker=".", lw=1)
        ax1.axhline(100.0 * report.final_top1, color="gray", ls=":", lw=1)
    ax1.set_xlabel("step")
    ax1.set_ylabel("top-1 [%]")
    ax1.set_title(title or "%s %s" % (report.mode, report.precision))
    loss = np.asarray(report.train_loss, dtype=np.float64)
    if loss.size:
        k = max(1, loss.size // 200)
        sm = np.convolve(loss, np.ones(k) / k, mode="valid")
        ax2.plot(np.arange(sm.size) + k - 1, sm, lw=1)
        ax2.set_yscale("log")
    ax2.set_xlabel("step")
    ax2.set_ylabel("training loss")
    fig.tight_layout()
    return _save(fig, path)


def threshold_figure(report, path):
    """log2 threshold traces with markers where the controller froze them."""
    fig, ax = plt.subplots(figsize=(7, 4))
    frozen_at = dict((grp, step) for step, grp in report.frozen)
    for grp in sorted(report.threshold_trace):
        tr = report.threshold_trace[grp]
        line, = ax.plot(tr, lw=0.8)
        if grp in frozen_at:
            s = frozen_at[grp]
            ax.plot([s], [tr[s]], marker="x", color=line.get_color(), ms=6)
    ax.set_xlabel("step")
    ax.set_ylabel("log2 t")
    ax.set_title("threshold traces (x = frozen)")
    fig.tight_layout()
    return _save(fig, path)


def deviation_figure(deviations, path, label=""):
    """Histogram of ceil(log2 t) movement relative to calibration.

    Accepts one run's {group: deviation} map or several keyed by run
    label; multiple runs render as grouped bars.
    """
    first = next(iter(deviations.values()), None)
    if not isinstance(first, dict):
        deviations = {label: deviations}
    fig, ax = plt.subplots(figsize=(5, 3.2))
    width = 0.8 / max(len(deviations), 1)
    lo = min([0] + [min(v.values()) for v in deviations.values() if v])
    hi = max([0] + [max(v.values()) for v in deviations.values() if v])
    centers = np.arange(lo, hi + 1)
    for i, (name, vals) in enumerate(sorted(deviations.items())):
        counts = [sum(1 for v in vals.values() if v == c) for c in centers]
        ax.bar(centers + (i - (len(deviations) - 1) / 2.0) * width, counts,
               width=width, label=name or None)
    ax.set_xticks(centers)
    ax.set_xlabel("threshold deviation  ceil(log2 t) - initial")
    ax.set_ylabel("count")
    if any(deviations):
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def calibration_figure(rows, path):
    """Horizontal bars of calibrated log2 thresholds, one per tensor."""
    fig, ax = plt.subplots(figsize=(6, 0.28 * max(len(rows), 4) + 1))
    colors = {"max": "tab:blue", "3sd": "tab:orange", "klj": "tab:green"}
    ys = np.arange(len(rows))
    ax.barh(ys, [r["log2_t"] for r in rows],
            color=[colors.get(r["method"], "gray") for r in rows])
    ax.set_yticks(ys)
    ax.set_yticklabels(["%s (%s, b=%s)" % (r["tensor"], r["method"], r["bits"])
                        for r in rows], fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("log2 t")
    fig.tight_layout()
    return _save(fig, path)


def toy_figure(trajectories, path):
    """Threshold and loss panels for one or more labeled toy runs."""
    if not isinstance(trajectories, (list, tuple)):
        trajectories = [("", trajectories)]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    for label, traj in trajectories:
        ax1.plot(traj.log2_t, lw=0.8, label=label or None)
        ax2.plot(traj.loss, lw=0.8)
    ax1.set_ylabel("log2 t")
    ax2.set_ylabel("L2 loss")
    ax2.set_yscale("log")
    ax2.set_xlabel("step")
    if any(lbl for lbl, _ in trajectories):
        ax1.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def compare_figure(rep, path):
    """Threshold trajectories of the two gradient definitions side by side."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(2.0 ** np.asarray(rep.tqt_log2_t), lw=0.9, label="trained threshold")
    ax1.plot(rep.clip_hi_trace, lw=0.9, label="clipped-gradient bound")
    ax1.axhline(rep.data_max_abs, color="gray", ls=":", lw=1, label="max |x|")
    ax1.set_xlabel("step")
    ax1.set_ylabel("threshold")
    ax1.legend(fontsize=8)
    ax2.plot(rep.tqt_loss_trace, lw=0.9)
    ax2.plot(rep.clip_loss_trace, lw=0.9)
    ax2.set_yscale("log")
    ax2.set_xlabel("step")
    ax2.set_ylabel("L2 loss")
    fig.tight_layout()
    return _save(fig, path)


# ---------------------------------------------------------------------------
# Bundled report directories

def write_train_report(report, outdir):
    """metrics.csv + per-step log + figures for one training run."""
    os.makedirs(outdir, exist_ok=True)
    paths = [
        write_history_csv(report.history, os.path.join(outdir, "metrics.csv")),
        training_figure(report, os.path.join(outdir, "training.png")),
    ]
    if report.threshold_trace:
        paths.append(write_train_log_csv(
            report, os.path.join(outdir, "train_log.csv")))
        paths.append(threshold_figure(
            report, os.path.join(outdir, "thresholds.png")))
    if report.deviations:
        paths.append(deviation_figure(
            report.deviations, os.path.join(outdir, "deviations.png"),
            label=report.precision))
    return paths


def write_suite_report(suite, outdir):
    """Summary CSV plus the per-run artifacts in subdirectories."""
    os.makedirs(outdir, exist_ok=True)
    paths = [write_suite_csv(suite, os.path.join(outdir, "summary.csv"))]
    devs = {}
    for label, rep in suite.runs.items():
        paths += write_train_report(rep, os.path.join(outdir, label))
        if rep.deviations and rep.mode == "retrain-wt-th":
            devs[label] = rep.deviations
    if devs:
        paths.append(deviation_figure(
            devs, os.path.join(outdir, "deviations.png")))
    return paths
