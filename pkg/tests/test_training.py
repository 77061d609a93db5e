import numpy as np
import pytest

from afxmodel import autodiff as ad
from afxmodel import training as T
from afxmodel.data import Segment, SegmentSet, SyntheticDistortion, synth_dry
from afxmodel.losses import LossWeights
from afxmodel.models import build_model, spec_from_name


def synthetic_set(n_train=2, n_val=1, length=9000, seed=0):
    device = SyntheticDistortion()
    x = 0.5 * synth_dry((n_train + n_val) * length / 48000 + 0.1, seed)
    y = device(x)
    segs = []
    for k in range(n_train + n_val):
        sl = slice(k * length, (k + 1) * length)
        segs.append(Segment(x[sl], y[sl], "train" if k < n_train else "val", "fixture", sl.start))
    return SegmentSet(segs, length)


def test_scheme_defaults():
    lstm = T.TrainScheme.for_family("lstm")
    assert lstm.tbptt and lstm.clip_algorithm == "norm" and lstm.clip_value == 10.0
    assert lstm.lr_list == (0.005, 0.001)
    gb = T.TrainScheme.for_family("graybox")
    assert gb.lr_list == (0.1,) and not gb.tbptt and gb.clip_algorithm == "value"
    with pytest.raises(ValueError):
        T.TrainScheme(family="tcn", tbptt=True)


def test_plateau_halves_lr_and_stops():
    tr = T.PlateauTracker(1e-2, patience=20, factor=0.5, stop_patience=50)
    assert tr.update(1.0)["improved"]
    events = [tr.update(1.0) for _ in range(50)]
    reduced = [i + 1 for i, e in enumerate(events) if e["lr_reduced"]]
    assert reduced == [20, 40]
    assert tr.lr == pytest.approx(2.5e-3)
    assert [i + 1 for i, e in enumerate(events) if e["stop"]] == [50]


def test_plateau_strict_improvement_resets():
    tr = T.PlateauTracker(1.0, patience=2, stop_patience=3)
    tr.update(1.0)
    tr.update(1.0)  # equal is not an improvement
    assert tr.update(0.999)["improved"]
    assert not tr.update(0.999)["lr_reduced"]


def test_adam_applies_lr_multiplier():
    a = ad.Parameter(np.array([1.0]), name="a")
    b = ad.Parameter(np.array([1.0]), name="b", lr_multiplier=0.1)
    opt = T.Adam([a, b], lr=0.01)
    opt.step([np.array([1.0]), np.array([1.0])])
    # first Adam step moves by lr * m_hat / sqrt(v_hat) = lr
    assert 1.0 - a.data[0] == pytest.approx(0.01, rel=1e-6)
    assert 1.0 - b.data[0] == pytest.approx(0.001, rel=1e-6)


def test_graybox_training_improves_and_writes(tmp_path):
    data = synthetic_set()
    model = build_model("GB-DIST-RNL", seed=0, dtype=np.float64)
    scheme = T.TrainScheme.for_family("graybox", max_epochs=8, batch_size=2)
    rep = T.train(model, data, scheme, seed=0, out_dir=tmp_path)
    assert rep.stop_reason == "max-epochs"
    assert len(rep.epochs) == 8 and rep.steps == 8
    assert rep.best_val_scaled < rep.initial_val["scaled"]
    assert (tmp_path / "best.npz").exists()
    header = (tmp_path / "train_report.csv").read_text().splitlines()[0]
    assert header.split(",") == list(T.EPOCH_COLUMNS)
    # the model holds the best weights afterwards
    val = T.evaluate(model, *data.arrays("val", np.float64), LossWeights())
    assert val["total"] == pytest.approx(rep.best_val_total, rel=1e-9)


def test_training_is_deterministic():
    data = synthetic_set()
    scheme = T.TrainScheme.for_family("graybox", max_epochs=3, batch_size=1)
    runs = []
    for _ in range(2):
        model = build_model("GB-DIST-RNL", seed=3, dtype=np.float64)
        rep = T.train(model, data, scheme, seed=7)
        runs.append(([e["val_total"] for e in rep.epochs], model.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])


def test_untrained_weights_are_best_candidate():
    data = synthetic_set()
    model = build_model("GB-DIST-RNL", seed=0, dtype=np.float64)
    init = model.state_dict()
    scheme = T.TrainScheme.for_family("graybox", max_epochs=2, batch_size=2)
    rep = T.train(model, data, scheme, lr=10.0)  # oversized step: every epoch ends worse than init
    assert rep.best_epoch == 0
    assert all(e["val_total"] > rep.initial_val["total"] for e in rep.epochs)
    for k, v in init.items():
        np.testing.assert_array_equal(model.state_dict()[k], v)


def test_nan_at_init_raises():
    data = synthetic_set()
    model = build_model("GB-DIST-RNL", dtype=np.float64)
    model.parameters()[0].data[...] = np.nan
    with pytest.raises(T.InitializationError):
        T.train(model, data, T.TrainScheme.for_family("graybox", max_epochs=1))


def test_nan_mid_run_stops_and_restores_best():
    data = synthetic_set()
    model = build_model("GB-DIST-RNL", dtype=np.float64)

    def poison(row):
        if row["epoch"] == 2:
            model.parameters()[0].data[...] = np.nan

    scheme = T.TrainScheme.for_family("graybox", max_epochs=5, batch_size=2)
    rep = T.train(model, data, scheme, callback=poison)
    assert rep.failed and rep.stop_reason == "nan"
    assert rep.nan_incidents and rep.nan_incidents[0]["epoch"] == 3
    assert all(np.all(np.isfinite(v)) for v in model.state_dict().values())


def test_empty_data_rejected():
    with pytest.raises(T.DataError):
        T.train(build_model("GB-COMP"), SegmentSet(), T.TrainScheme.for_family("graybox", max_epochs=1))


def lstm_set():
    return synthetic_set(n_train=1, n_val=1, length=144_000)


def test_tbptt_update_count():
    model = build_model("LSTM-32", dtype=np.float32)
    scheme = T.TrainScheme.for_family("lstm", max_epochs=1, batch_size=1, max_steps=None)
    rep = T.train(model, lstm_set(), scheme)
    assert rep.steps == 144_000 // 4800 == 30


def test_tbptt_state_carries_no_gradient():
    model = build_model("LSTM-32", dtype=np.float64)
    x1 = ad.Parameter(np.random.default_rng(0).standard_normal((1, 4800)), name="x1")
    _, state = model.forward_with_state(x1)
    y2, _ = model.forward_with_state(np.ones((1, 4800)), None, state)
    grads = ad.backward(ad.reduce_sum(y2), [x1])
    np.testing.assert_array_equal(grads["x1"], 0.0)


def test_tbptt_carried_state_differs_from_reset():
    data = lstm_set()
    scheme = T.TrainScheme.for_family("lstm", max_epochs=1, batch_size=1, max_steps=None)
    a = build_model("LSTM-32", seed=1, dtype=np.float32)
    b = build_model("LSTM-32", seed=1, dtype=np.float32)
    T.train_tbptt(a, data, scheme, carry_state=True)
    T.train_tbptt(b, data, scheme, carry_state=False)
    diff = max(np.abs(a.state_dict()[k] - b.state_dict()[k]).max() for k in a.state_dict())
    assert diff > 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_lr_sweep_survives_diverging_run(tmp_path):
    data = synthetic_set()
    scheme = T.TrainScheme.for_family("graybox", max_epochs=2, batch_size=2)
    res = T.lr_sweep(spec_from_name("GB-DIST-RNL"), data, [0.1, 1e6], scheme=scheme, out_dir=tmp_path,
                     dtype=np.float64)
    assert [r["lr"] for r in res.rows] == [0.1, 1e6]
    assert res.best_lr in (0.1, 1e6)
    assert res.best.best_val_scaled == min(r["best_val_scaled"] for r in res.rows if r["status"] == "ok")
    lines = (tmp_path / "sweep_summary.csv").read_text().splitlines()
    assert lines[0].split(",") == list(T.SWEEP_COLUMNS) and len(lines) == 3
    with pytest.raises(T.SweepError):
        T.lr_sweep(spec_from_name("GB-DIST-RNL"), data, [])


def test_checkpoint_round_trip(tmp_path):
    model = build_model("TCN-45-S-16", seed=0)
    T.save_checkpoint(model, tmp_path / "m.npz", {"epoch": 3})
    other = build_model("TCN-45-S-16", seed=1)
    meta = T.load_checkpoint(other, tmp_path / "m.npz")
    assert meta["extra"]["epoch"] == 3
    x = np.random.default_rng(0).standard_normal((1, 500)).astype(np.float32)
    with ad.no_grad():
        np.testing.assert_array_equal(model(x).data, other(x).data)
        np.testing.assert_array_equal(T.load_model(tmp_path / "m.npz")(x).data, model(x).data)


def test_truncated_checkpoint(tmp_path):
    model = build_model("GB-COMP")
    T.save_checkpoint(model, tmp_path / "m.npz")
    raw = (tmp_path / "m.npz").read_bytes()
    (tmp_path / "m.npz").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(T.CheckpointError):
        T.load_checkpoint(model, tmp_path / "m.npz")


def test_incompatible_checkpoint(tmp_path):
    T.save_checkpoint(build_model("TCN-45-S-16"), tmp_path / "m.npz")
    with pytest.raises(T.IncompatibleCheckpointError):
        T.load_checkpoint(build_model("GCN-45-S-16"), tmp_path / "m.npz")
