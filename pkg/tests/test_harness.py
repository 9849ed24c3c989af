"""Toy threshold-training dynamics, the synthetic dataset, and the
desk-model training harness.

The expensive end-to-end comparisons live in test_acceptance; here the
runs are shrunk until they take fractions of a second but still exercise
the same code paths.
"""

import numpy as np
import pytest

from tqt.data import (Dataset, batch_stream, load_dataset, make_dataset,
                      save_dataset)
from tqt.errors import ContractError
from tqt.graph import Graph, infer_shapes
from tqt.model import build_desk_graph, init_weights
from tqt.tensor import Rng
from tqt.toy import (OPTIMIZERS, ToyConfig, Trajectory, compare_clipped_vs_tqt,
                     convergence_step, measure_oscillation, toy_l2_run)
from tqt.train import (TrainRunConfig, calibrate_graph, calibration_batch,
                       evaluate, float_retrain, softmax_xent, train_quantized)
from tqt.transforms import PrecisionConfig, insert_quant_layers, optimize

from fixtures import GOLDEN_TOPOLOGIES


# ---------------------------------------------------------------------------
# Toy 1-D threshold training


def toy(**kw):
    base = dict(bits=8, signed=True, sigma=1e-2, optimizer="log-adam",
                lr=0.1, beta1=0.5, beta2=0.999213, steps=400, batch=512,
                seed=0, init_log2t=0.0)
    base.update(kw)
    return toy_l2_run(ToyConfig(**base))


def test_toy_unknown_optimizer():
    with pytest.raises(ContractError):
        toy(optimizer="sgd-log")


def test_toy_trajectory_shapes():
    tr = toy(steps=37)
    assert len(tr) == 37
    assert tr.log2_t.shape == tr.loss.shape == tr.grad.shape == (37,)
    assert not tr.diverged
    assert tr.log2_t[0] == 0.0


def test_toy_default_init_is_three_sigma():
    tr = toy_l2_run(ToyConfig(sigma=2.0, steps=3, batch=32, init_log2t=None))
    assert tr.log2_t[0] == pytest.approx(np.log2(6.0))


def test_toy_zero_lr_is_flat():
    tr = toy(lr=0.0, steps=60)
    assert np.all(tr.log2_t == tr.log2_t[0])
    # fresh batches still make the recorded loss wiggle
    assert len(np.unique(tr.loss)) > 1


def test_toy_runs_are_deterministic():
    a, b = toy(steps=120), toy(steps=120)
    assert np.array_equal(a.log2_t, b.log2_t)
    assert np.array_equal(a.loss, b.loss)
    assert np.array_equal(a.grad, b.grad)
    c = toy(steps=120, seed=1)
    assert not np.array_equal(a.loss, c.loss)


def test_toy_log_adam_settles_into_sawtooth():
    """Log-domain Adam walks 5 octaves down and oscillates around the
    critical integer boundary with period close to the gradient ratio."""
    tr = toy(steps=3000, batch=4096)
    assert not tr.diverged
    rep = measure_oscillation(tr)
    assert rep.reliable
    assert rep.boundary == -5.0
    assert rep.crossings >= 20
    assert rep.max_deviation < 1.0
    assert 0.7 <= rep.period / rep.r_g <= 1.3
    assert convergence_step(tr) < 1000


def test_toy_normed_sgd_caps_every_step():
    lr = 0.1
    tr = toy(optimizer="normed-log-sgd", lr=lr, steps=1200, batch=2048)
    moves = np.abs(np.diff(tr.log2_t))
    assert moves.max() <= lr + 1e-12
    rep = measure_oscillation(tr)
    assert rep.reliable and rep.boundary == -5.0


def test_toy_raw_sgd_starves_at_small_scale():
    """Gradients through the raw threshold scale with the data, so at
    sigma=1e-2 raw SGD barely moves while log-Adam covers the distance."""
    raw = toy(optimizer="raw-sgd", lr=0.01, steps=1000, batch=1024)
    ada = toy(optimizer="log-adam", lr=0.01, beta1=0.9, beta2=0.999,
              steps=1000, batch=1024)
    assert np.max(np.abs(raw.log2_t)) < 0.01
    assert np.max(np.abs(ada.log2_t)) > 1.5


def test_toy_divergence_is_recorded_not_raised():
    tr = toy(optimizer="log-sgd", lr=3e3, sigma=1.0, init_log2t=None)
    assert tr.diverged
    assert len(tr) < 400
    tr2 = toy(optimizer="raw-sgd", lr=1e6, sigma=1.0, init_log2t=None)
    assert tr2.diverged


# ---------------------------------------------------------------------------
# Oscillation measurement on constructed trajectories


def synthetic(vals, grads=None, diverged=False):
    vals = np.asarray(vals, dtype=np.float64)
    if grads is None:
        grads = np.zeros_like(vals)
    return Trajectory(ToyConfig(), vals, np.zeros_like(vals),
                      np.asarray(grads, dtype=np.float64), diverged)


def sawtooth(n=2000, head=1400, period=50, boundary=2.0, amp=0.2):
    """Ramp from boundary+3 down into a triangle wave around boundary."""
    vals = np.empty(n)
    vals[:head] = np.linspace(boundary + 3.0, boundary - amp, head,
                              endpoint=False)
    phase = np.arange(n - head) % period
    vals[head:] = boundary - amp + 2.0 * amp * phase / (period - 1)
    grads = np.where(vals < boundary, -0.8, 0.1)
    return synthetic(vals, grads)


def test_oscillation_synthetic_sawtooth():
    traj = sawtooth()
    rep = measure_oscillation(traj)
    assert rep.reliable
    assert rep.boundary == 2.0
    assert rep.period == pytest.approx(50.0)
    assert rep.r_g == pytest.approx(8.0)  # |-0.8| / |0.1|
    assert rep.max_deviation == pytest.approx(0.2)
    assert rep.crossings >= 10


def test_oscillation_unreliable_when_diverged():
    rep = measure_oscillation(synthetic(np.linspace(0, 70, 100), diverged=True))
    assert not rep.reliable
    assert rep.max_deviation == np.inf


def test_oscillation_unreliable_when_short():
    assert not measure_oscillation(synthetic(np.zeros(9))).reliable


def test_oscillation_unreliable_without_crossings():
    # settled strictly above the boundary: nothing to average over
    rep = measure_oscillation(synthetic(np.full(200, 2.3)))
    assert not rep.reliable
    assert rep.period == 0.0


def test_oscillation_unreliable_when_still_moving():
    rep = measure_oscillation(synthetic(np.linspace(8.0, 0.0, 200)))
    assert not rep.reliable


def test_convergence_step_contract():
    traj = sawtooth()
    cs = convergence_step(traj, tol=0.75)
    assert 0 < cs < len(traj)
    assert np.all(np.abs(traj.log2_t[cs:] - 2.0) <= 0.76)
    assert abs(traj.log2_t[cs - 1] - 2.0) > 0.75


def test_convergence_step_edge_cases():
    assert convergence_step(synthetic(np.full(50, 1.25))) == 0
    diverged = synthetic(np.linspace(0, 70, 40), diverged=True)
    assert convergence_step(diverged) == 40


# ---------------------------------------------------------------------------
# Heavy-tail comparison (shrunk; the full protocol runs in acceptance)


def test_clip_compare_report_readouts():
    rep = compare_clipped_vs_tqt(sigma=1.0, bits=8, n=20000, steps=400,
                                 lr=0.02, seed=4)
    n = 400
    assert len(rep.tqt_log2_t) == len(rep.clip_hi_trace) == n
    assert len(rep.tqt_loss_trace) == len(rep.clip_loss_trace) == n
    tail = n // 10
    assert rep.loss_tqt == pytest.approx(np.median(rep.tqt_loss_trace[-tail:]))
    assert rep.loss_clipped == pytest.approx(np.median(rep.clip_loss_trace[-tail:]))
    assert rep.t_tqt == pytest.approx(
        2.0 ** np.median(rep.tqt_log2_t[-tail:]))
    # 20 outliers redrawn at 100x the bulk scale dominate the extremes
    assert rep.data_max_abs >= rep.data_max_pos > 30.0
    # both styles move outward from the 3-sigma start; only the clipped
    # pair is obliged to chase the outliers all the way
    assert rep.clip_hi > 10.0 and rep.clip_lo < -10.0
    assert rep.loss_tqt < rep.loss_clipped


# ---------------------------------------------------------------------------
# Synthetic dataset


def test_dataset_shapes_and_labels():
    ds = make_dataset(0, n_train=64, n_eval=32)
    assert ds.x_train.shape == (64, 32, 32, 1)
    assert ds.x_eval.shape == (32, 32, 32, 1)
    assert ds.x_train.dtype == np.float64
    for y in (ds.y_train, ds.y_eval):
        assert y.dtype == np.int64
        assert y.min() >= 0 and y.max() < 8
    # every class shows up in a decent sample
    assert len(np.unique(ds.y_train)) == 8


def test_dataset_deterministic_per_seed():
    a = make_dataset(3, n_train=16, n_eval=8)
    b = make_dataset(3, n_train=16, n_eval=8)
    assert np.array_equal(a.x_train, b.x_train)
    assert np.array_equal(a.y_eval, b.y_eval)
    c = make_dataset(4, n_train=16, n_eval=8)
    assert not np.array_equal(a.x_train, c.x_train)
    # train and eval splits come from independent streams
    assert not np.array_equal(a.x_train[:8], a.x_eval)


def test_dataset_hot_pixels_present():
    # hot pixels sit clear of both blobs, so each image peaks near them
    ds = make_dataset(1, n_train=32, n_eval=8)
    peaks = ds.x_train.max(axis=(1, 2, 3))
    assert np.all(peaks > 8.0)


def test_dataset_roundtrip(tmp_path):
    ds = make_dataset(2, n_train=12, n_eval=6)
    save_dataset(ds, str(tmp_path))
    back = load_dataset(str(tmp_path))
    assert np.array_equal(ds.x_train, back.x_train)
    assert np.array_equal(ds.y_train, back.y_train)
    assert np.array_equal(ds.x_eval, back.x_eval)
    assert np.array_equal(ds.y_eval, back.y_eval)
    assert back.y_train.dtype == np.int64


def test_dataset_load_missing_file(tmp_path):
    with pytest.raises(ContractError, match="x_train"):
        load_dataset(str(tmp_path))


def test_dataset_shape_contract():
    x = np.zeros((4, 32, 32, 1))
    y = np.zeros(4, dtype=np.int64)
    with pytest.raises(ContractError):
        Dataset(np.zeros((4, 16, 16, 1)), y, x, y)
    with pytest.raises(ContractError):
        Dataset(x, y[:3], x, y)


def test_batch_stream_full_batches_reshuffled():
    batches = list(batch_stream(Rng(0), 10, 3, 7))
    assert len(batches) == 7
    assert all(b.shape == (3,) for b in batches)
    # 3 full batches per epoch, disjoint within the epoch
    epoch1 = np.concatenate(batches[:3])
    assert len(np.unique(epoch1)) == 9
    epoch2 = np.concatenate(batches[3:6])
    assert not np.array_equal(np.sort(epoch1), epoch2)
    assert np.all((epoch1 >= 0) & (epoch1 < 10))
    again = list(batch_stream(Rng(0), 10, 3, 7))
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))


# ---------------------------------------------------------------------------
# Evaluation


def identity_logits_graph(k=4):
    g = Graph()
    g.add("x", "input", [], shape=(k,))
    g.add("w", "const", [])
    g.values["w"] = np.eye(k)
    g.add("y", "matmul", ["x", "w"])
    g.inputs, g.outputs = ["x"], ["y"]
    return g


def test_evaluate_perfect_and_wrong_labels():
    g = identity_logits_graph()
    x = np.tile(np.eye(4) * 10.0, (3, 1))
    y = np.tile(np.arange(4), 3)
    top1, loss = evaluate(g, (x, y))
    assert top1 == 1.0
    assert loss == pytest.approx(softmax_xent(x, y))
    top1_bad, _ = evaluate(g, (x, (y + 1) % 4))
    assert top1_bad == 0.0


def test_evaluate_batching_invariant():
    g = identity_logits_graph()
    gen = np.random.default_rng(0)
    x = gen.normal(size=(10, 4))
    y = gen.integers(0, 4, size=10)
    assert evaluate(g, (x, y), batch=3) == evaluate(g, (x, y), batch=10)


def test_evaluate_length_mismatch():
    g = identity_logits_graph()
    with pytest.raises(ContractError):
        evaluate(g, (np.zeros((3, 4)), np.zeros(2, dtype=np.int64)))


def test_softmax_xent_closed_form():
    logits = np.array([[0.0, 0.0], [0.0, np.log(3.0)]])
    want = 0.5 * (np.log(2.0) + np.log(4.0 / 3.0))
    assert softmax_xent(logits, [0, 1]) == pytest.approx(want)
    # invariant under a per-row shift
    assert softmax_xent(logits + 7.0, [0, 1]) == pytest.approx(want)


def test_evaluate_untrained_desk_is_chance_level():
    ds = make_dataset(5, n_train=8, n_eval=256)
    g = build_desk_graph()
    init_weights(g, Rng(2))
    top1, loss = evaluate(g, ds)
    assert top1 < 0.4  # 8 classes
    assert loss > 1.0
    assert evaluate(g, ds) == (top1, loss)


# ---------------------------------------------------------------------------
# Graph calibration


def quantized_fixture(name, precision="int8"):
    g = insert_quant_layers(optimize(GOLDEN_TOPOLOGIES[name]()),
                            PrecisionConfig.named(precision))
    shape = infer_shapes(g, batch=4)[g.inputs[0]]
    x = np.random.default_rng(0).normal(size=shape)
    return g, x


def test_calibrate_rows_cover_every_quantizer():
    g, x = quantized_fixture("conv_relu")
    rows = calibrate_graph(g, x, "retrain-wt-th")
    nq = sum(1 for n in g.nodes.values() if n.op == "quantize")
    assert len(rows) == nq
    for r in rows:
        assert set(r) == {"tensor", "method", "t", "log2_t", "bits", "signed"}
        assert r["log2_t"] == pytest.approx(np.log2(max(r["t"], 2.0 ** -24)))
        assert r["t"] > 0.0
    by_tensor = {r["tensor"]: r for r in rows}
    assert by_tensor["w"]["method"] == "3sd"
    assert by_tensor["x"]["method"] == "klj"
    # bias and accumulator share one group, hence one threshold
    assert by_tensor["b"]["t"] == by_tensor["conv"]["t"]
    assert by_tensor["b"]["bits"] == 16
    assert by_tensor["act"]["signed"] == 0
    # thresholds actually landed in the graph
    calibrated = {p.log2_t for p in g.qparams.values()}
    assert calibrated == {r["log2_t"] for r in rows}


def test_calibrate_static_mode_uses_max_for_weights():
    g, x = quantized_fixture("conv_relu")
    rows = calibrate_graph(g, x, "static")
    w = next(r for r in rows if r["tensor"] == "w")
    assert w["method"] == "max"
    assert w["t"] == pytest.approx(np.abs(g.values["w"]).max())


def test_calibrate_tiny_weights_fall_back_to_max():
    g, x = quantized_fixture("leaky_tail")
    rows = calibrate_graph(g, x, "retrain-wt-th")
    methods = {r["tensor"]: r["method"] for r in rows}
    assert methods["w"] == "3sd"
    # the slope constant has a single element: no spread to estimate
    assert methods["act_alpha"] == "max"


def test_calibration_batch_subset_and_deterministic():
    ds = make_dataset(6, n_train=8, n_eval=24)
    cb = calibration_batch(ds, 7)
    assert cb.shape == (24, 32, 32, 1)  # capped at the eval split size
    assert np.array_equal(cb, calibration_batch(ds, 7))
    big = make_dataset(6, n_train=8, n_eval=80)
    cb2 = calibration_batch(big, 7)
    assert cb2.shape[0] == 50
    # sampled without replacement from the eval split
    flat = big.x_eval.reshape(80, -1)
    hits = {np.flatnonzero((flat == img.ravel()).all(axis=1))[0]
            for img in cb2}
    assert len(hits) == 50


# ---------------------------------------------------------------------------
# Quantized retraining on a shrunk dataset


@pytest.fixture(scope="module")
def small_ds():
    return make_dataset(5, n_train=48, n_eval=64)


@pytest.fixture(scope="module")
def desk_float():
    g = build_desk_graph()
    init_weights(g, Rng(2))
    return g


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainRunConfig(mode="ptq")
    with pytest.raises(ContractError):
        TrainRunConfig(epochs=6)
    with pytest.raises(ContractError):
        TrainRunConfig(batch=0)
    with pytest.raises(ContractError):
        TrainRunConfig(eval_every=0)


def test_zero_epochs_reports_static_metrics(small_ds, desk_float):
    cfg = TrainRunConfig(mode="retrain-wt-th", epochs=0, graph=desk_float,
                         dataset=small_ds, seed=3)
    rep = train_quantized(cfg)
    assert rep.mode == "retrain-wt-th" and rep.precision == "int8"
    assert rep.final_top1 == rep.static_top1
    assert rep.final_loss == rep.static_loss
    assert rep.best_step == 0
    assert rep.history == [(0, rep.static_top1, rep.static_loss)]
    assert rep.train_loss.size == 0
    assert rep.frozen == ()
    assert set(rep.deviations.values()) == {0}
    assert set(rep.deviations) == set(rep.graph.qparams)
    assert any(n.op == "quantize" for n in rep.graph.nodes.values())


def test_static_mode_never_trains(small_ds, desk_float):
    cfg = TrainRunConfig(mode="static", epochs=5, graph=desk_float,
                         dataset=small_ds, seed=3)
    rep = train_quantized(cfg)
    assert rep.train_loss.size == 0
    assert rep.final_top1 == rep.static_top1


def tiny_cfg(small_ds, desk_float, **kw):
    base = dict(mode="retrain-wt-th", epochs=1, batch=4, graph=desk_float,
                dataset=small_ds, seed=3, eval_every=6)
    base.update(kw)
    return TrainRunConfig(**base)


def test_tiny_retrain_run_structure(small_ds, desk_float):
    rep = train_quantized(tiny_cfg(small_ds, desk_float))
    # 48 images / batch 4 = 12 steps, validated at 0, 6 and 12
    assert [h[0] for h in rep.history] == [0, 6, 12]
    assert rep.train_loss.shape == (12,)
    assert np.all(np.isfinite(rep.train_loss))
    groups = sorted(rep.graph.qparams)
    assert sorted(rep.threshold_trace) == groups
    assert sorted(rep.grad_trace) == groups
    for grp in groups:
        assert rep.threshold_trace[grp].shape == (12,)
        assert rep.grad_trace[grp].shape == (12,)
        assert all(isinstance(v, int) for v in (rep.deviations[grp],))
    # best checkpoint is re-evaluated, so it matches the history entry
    assert rep.final_top1 == max(h[1] for h in rep.history)
    assert rep.best_step in [h[0] for h in rep.history]
    # freezing starts thousands of steps in; a 12-step run never freezes
    assert rep.frozen == ()


def test_tiny_retrain_reproducible(small_ds, desk_float):
    a = train_quantized(tiny_cfg(small_ds, desk_float))
    b = train_quantized(tiny_cfg(small_ds, desk_float))
    assert a.final_top1 == b.final_top1
    assert a.static_top1 == b.static_top1
    assert np.array_equal(a.train_loss, b.train_loss)
    for grp in a.threshold_trace:
        assert np.array_equal(a.threshold_trace[grp], b.threshold_trace[grp])
        assert np.array_equal(a.grad_trace[grp], b.grad_trace[grp])
    assert a.deviations == b.deviations


def test_retrain_wt_leaves_thresholds_alone(small_ds, desk_float):
    rep = train_quantized(tiny_cfg(small_ds, desk_float, mode="retrain-wt"))
    assert rep.threshold_trace == {}
    assert set(rep.deviations.values()) == {0}
    assert rep.train_loss.shape == (12,)


def test_float_retrain_does_not_mutate_input(small_ds, desk_float):
    before = {n: np.array(v) for n, v in desk_float.values.items()}
    rep = float_retrain(desk_float, small_ds, epochs=1, batch=8, seed=3,
                        eval_every=3)
    assert rep.mode == "float-wt" and rep.precision == "float"
    assert rep.deviations == {} and rep.frozen == ()
    assert rep.train_loss.shape == (6,)
    for n, v in before.items():
        assert np.array_equal(desk_float.values[n], v)
    # the clone inside the report did train
    assert any(not np.array_equal(rep.graph.values[n], before[n])
               for n in before)
