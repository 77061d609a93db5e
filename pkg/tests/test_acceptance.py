"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as they happen and again in the terminal summary
(see ``conftest.py``).  Criteria 4 and 5 train models and take minutes.
"""

import time

import numpy as np
import pytest

from afxmodel import autodiff as ad
from afxmodel import backbones as bb
from afxmodel import controllers as C
from afxmodel import data as D
from afxmodel import losses as L
from afxmodel import streaming as S
from afxmodel import training as T
from afxmodel.autodiff import Parameter, grad_check
from afxmodel.losses import EmbeddingSet, LossWeights
from afxmodel.models import GRAYBOX_CHAINS, build_model, spec_from_name

from conftest import shifted_pair

RESULTS = []


def record(n: int, ok: bool, detail: str):
    line = f"ACCEPTANCE {n:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------- 1

RF_EXPECTED = {
    "TCN-45-S-16": 2047, "TCN-45-L-16": 2047, "TCN-250-S-16": 13651,
    "TCN-250-L-16": 12283, "TCN-2500-S-16": 133333, "TCN-2500-L-16": 118097,
}


def test_01_receptive_fields():
    t0 = time.perf_counter()
    got = {n: spec_from_name(n).receptive_field for n in RF_EXPECTED}
    dt = time.perf_counter() - t0
    ok = got == RF_EXPECTED and dt < 1.0
    record(1, ok, f"receptive fields {list(got.values())} in {dt * 1e3:.2f} ms")
    assert ok


# ---------------------------------------------------------------- 2

# reference parameter counts for the named configurations
TABLE_PARAMS = {
    "LSTM-32": 4.5e3, "LSTM-96": 38.1e3,
    "TCN-45-S-16": 7.5e3, "TCN-45-L-16": 7.3e3, "TCN-250-S-16": 14.5e3,
    "TCN-250-L-16": 18.4e3, "TCN-2500-S-16": 13.7e3, "TCN-2500-L-16": 11.9e3,
    "GCN-45-S-16": 16.2e3, "GCN-45-L-16": 17.1e3, "GCN-250-S-16": 30.4e3,
    "GCN-250-L-16": 39.6e3, "GCN-2500-S-16": 28.6e3, "GCN-2500-L-16": 26.4e3,
    "S4-S-16": 2.4e3, "S4-L-16": 19.0e3,
}
TABLE_GRAYBOX = {"GB-COMP": 47, "GB-DIST-MLP": 2.2e3, "GB-DIST-RNL": 47, "GB-FUZZ-MLP": 2.3e3, "GB-FUZZ-RNL": 62}


def test_02_parameter_counts():
    rows = []
    ok = True
    for table, tol in ((TABLE_PARAMS, 0.10), (TABLE_GRAYBOX, 0.30)):
        for name, ref in table.items():
            n = build_model(name).num_parameters()
            rel = (n - ref) / ref
            ok &= abs(rel) <= tol
            rows.append(f"{name}={n} ({rel:+.1%})")
    # the MLP waveshaper: 1*32+32 + 2*(32*32+32) + 32+1
    mlp = build_model("GB-DIST-MLP").stages[3].num_parameters()
    ok &= mlp == 2209
    worst = max(rows, key=lambda r: abs(float(r.split("(")[1].rstrip("%)"))))
    record(2, ok, f"{len(rows)} models in tolerance={ok}; MLP={mlp}; worst {worst}")
    assert ok


# ---------------------------------------------------------------- 3

def _randomise(module, rng, scale=0.3):
    module.assign_names()
    for p in module.parameters():
        p.data = p.data + rng.standard_normal(p.shape) * scale
    return module.parameters()


def _graybox_case(key):
    def case(rng):
        name = f"GB-{key}"
        model = build_model(name, seed=1, dtype=np.float64)
        params = _randomise(model, rng, 0.2)
        x = rng.standard_normal((1, 1000)) * 0.5
        cond = rng.uniform(size=(1, 2)) if "-C-" in name else None
        return (lambda: model(x, cond)), params
    return case


def _backbone_case(factory, cond_controls=0):
    def case(rng):
        model = factory(rng)
        params = _randomise(model, rng)
        x = rng.standard_normal((2, 300)) * 0.5
        cond = rng.uniform(size=(2, cond_controls)) if cond_controls else None
        return (lambda: model(x, cond)), params
    return case


def _modulator_case(mode):
    def case(rng):
        nc = 0 if mode == "tfilm" else 2
        m = C.make_modulator(mode, [3], nc, rng, np.float64)
        params = _randomise(m, rng, 0.5)
        f = Parameter(rng.standard_normal((2, 3, 400)), name="features")
        cond = rng.uniform(size=(2, 2)) if nc else None
        return (lambda: m.modulate(0, f, m.prepare(f[:, :1, :], cond))), params + [f]
    return case


def _stft_case(rng):
    y = rng.standard_normal((1, 4096))
    p = Parameter(y + 0.3 * rng.standard_normal((1, 4096)), name="y_hat")
    res = (L.StftResolution(512, 128, 512), L.StftResolution(256, 64, 256))
    return (lambda: L.mr_stft(p, y, res)), [p]


F64 = np.float64
GRAD_CASES = {
    **{f"graybox {k}": _graybox_case(k) for k in GRAYBOX_CHAINS},
    "graybox C-DIST-MLP": _graybox_case("C-DIST-MLP"),
    "graybox C-FUZZ-RNL": _graybox_case("C-FUZZ-RNL"),
    "tcn": _backbone_case(lambda r: bb.ConvBackbone(2, 3, 2, channels=3, rng=r, dtype=F64)),
    "gcn": _backbone_case(lambda r: bb.ConvBackbone(2, 3, 2, channels=3, gated=True, rng=r, dtype=F64)),
    "tcn film": _backbone_case(lambda r: bb.ConvBackbone(2, 3, 2, 3, cond_mode="film", n_controls=2, rng=r,
                                                         dtype=F64), 2),
    "tcn tfilm": _backbone_case(lambda r: bb.ConvBackbone(2, 3, 2, 3, cond_mode="tfilm", rng=r, dtype=F64)),
    "gcn ttfilm": _backbone_case(lambda r: bb.ConvBackbone(2, 3, 2, 3, gated=True, cond_mode="ttfilm",
                                                           n_controls=2, rng=r, dtype=F64), 2),
    "tcn tvfilm": _backbone_case(lambda r: bb.ConvBackbone(2, 3, 2, 3, cond_mode="tvfilm", n_controls=2, rng=r,
                                                           dtype=F64), 2),
    "lstm": _backbone_case(lambda r: bb.LSTMBackbone(4, rng=r, dtype=F64)),
    "lstm concat": _backbone_case(lambda r: bb.LSTMBackbone(4, "concat", 2, rng=r, dtype=F64), 2),
    "lstm tvconcat": _backbone_case(lambda r: bb.LSTMBackbone(4, "tvconcat", 2, rng=r, dtype=F64), 2),
    "s4": _backbone_case(lambda r: bb.S4Backbone(2, 2, 3, rng=r, dtype=F64)),
    "s4 film": _backbone_case(lambda r: bb.S4Backbone(2, 2, 3, cond_mode="film", n_controls=2, rng=r, dtype=F64), 2),
    **{f"modulator {m}": _modulator_case(m) for m in ("film", "tfilm", "ttfilm", "tvfilm")},
    "mr-stft": _stft_case,
}


STEP_GRID = (1e-3, 1e-4, 1e-5, 1e-6)


def _mse_probe(forward, seed):
    """Mean squared distance to a fixed random target: a loss without cancellation."""
    with ad.no_grad():
        shape = forward().shape
    target = np.random.default_rng(seed).standard_normal(shape)

    def loss():
        d = forward() - target
        return ad.reduce_sum(d * d) * (1.0 / d.size)
    return loss


def test_03_gradient_correctness():
    # central differences trade truncation against roundoff; each module is
    # scored at its best step from a fixed grid (a wrong gradient fails at all of them)
    errors, steps = {}, {}
    for i, (name, case) in enumerate(GRAD_CASES.items()):
        per_step = {}
        for eps in STEP_GRID:
            forward, params = case(np.random.default_rng(100 + i))
            loss = forward if name == "mr-stft" else _mse_probe(forward, 50 + i)
            per_step[eps] = grad_check(loss, params, eps, max_elements=12, rng=np.random.default_rng(i))
        steps[name] = min(per_step, key=per_step.get)
        errors[name] = per_step[steps[name]]
    # a full-size deep stack on 1 s of noise, sampled elements, looser bound
    tcn = build_model("TCN-45-S-16", seed=0, dtype=F64)
    tcn.assign_names()
    x = np.random.default_rng(7).standard_normal((1, 48000))
    deep = grad_check(_mse_probe(lambda: tcn(x), 8), tcn.parameters(), 1e-4, max_elements=6,
                      rng=np.random.default_rng(0))
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and deep < 1e-3
    record(3, ok, f"{len(errors)} modules, worst {worst} {errors[worst]:.2e} at eps={steps[worst]:g} (<1e-4); "
                  f"TCN-45-S-16 {deep:.2e} (<1e-3)")
    assert ok


# ---------------------------------------------------------------- 4 and 5

@pytest.fixture(scope="module")
def device_data(tmp_path_factory):
    """60 s of gain-staged audio through the reference chain, plus a held-out minute."""
    root = tmp_path_factory.mktemp("device")
    D.make_synthetic_dataset(root, n_pairs=1, duration_s=60.0, test_pairs=1, seed=3)
    return D.load_dataset(root, seed=0)


def _test_scores(model, data):
    dry, wet, _ = data.arrays("test", np.float32)
    with ad.no_grad():
        y_hat = model(dry).data
    scaled = T.evaluate(model, dry, wet, None, LossWeights())["scaled"]
    esr = float(np.sum((y_hat - wet).astype(np.float64) ** 2) / np.sum(wet.astype(np.float64) ** 2))
    return esr, scaled


@pytest.mark.slow
def test_04_synthetic_device_recovery(device_data):
    counts = device_data.counts()
    train_s = (counts["train"] + counts["val"]) * D.SEGMENT / D.FS
    model = build_model("GB-DIST-RNL", seed=0)
    _, init_scaled = _test_scores(model, device_data)
    scheme = T.TrainScheme.for_family("graybox", max_epochs=200)
    t0 = time.perf_counter()
    rep = T.train(model, device_data, scheme, seed=0, lr=0.1)
    runtime = time.perf_counter() - t0
    esr, scaled = _test_scores(model, device_data)
    reduction = 1.0 - scaled / init_scaled
    ok = esr < 0.01 and reduction >= 0.9 and runtime <= 900 and len(rep.epochs) <= 200 and train_s <= 60
    record(4, ok, f"{len(rep.epochs)} epochs on {train_s:.0f} s: test ESR {esr:.4f} (<0.01), "
                  f"scaled {init_scaled:.3f}->{scaled:.3f} ({reduction:.1%} reduction, >=90%), "
                  f"{runtime:.0f} s (<=900)")
    assert ok


@pytest.mark.slow
def test_05_black_box_sanity(device_data):
    tcn = build_model("TCN-45-S-16", seed=0)
    scheme = T.TrainScheme.for_family("tcn", max_steps=2000, max_epochs=None, batch_size=4, crop_length=8192,
                                      early_stop_patience=10 ** 9)
    t0 = time.perf_counter()
    rep = T.train(tcn, device_data, scheme, seed=0)
    t_tcn = time.perf_counter() - t0
    tcn_ok = rep.steps == 2000 and rep.best_val_scaled < 0.3

    lstm = build_model("LSTM-32", seed=0)
    scheme = T.TrainScheme.for_family("lstm", max_steps=2000, batch_size=4, early_stop_patience=10 ** 9)
    t0 = time.perf_counter()
    lrep = T.train(lstm, device_data, scheme, seed=0)
    t_lstm = time.perf_counter() - t0
    finite = all(np.all(np.isfinite(v)) for v in lstm.state_dict().values())
    lstm_ok = lrep.steps == 2000 and not lrep.failed and not lrep.nan_incidents and finite
    ok = tcn_ok and lstm_ok
    record(5, ok, f"TCN-45-S-16 {rep.steps} steps best val scaled {rep.best_val_scaled:.3f} (<0.3, {t_tcn:.0f} s); "
                  f"LSTM-32 {lrep.steps} TBPTT updates, diverged={not lstm_ok}, "
                  f"val scaled {lrep.initial_val['scaled']:.3f}->{lrep.best_val_scaled:.3f} ({t_lstm:.0f} s)")
    assert ok


# ---------------------------------------------------------------- 6

FRAME_SIZES = [2 ** k for k in range(5, 15)]
STREAM_MODELS = [
    "TCN-45-S-16", "TCN-250-L-16", "GCN-45-L-16", "TCN-TF-45-S-16", "TCN-F-45-S-16", "GCN-TTF-45-S-16",
    "TCN-TVF-45-S-16", "LSTM-32", "LSTM-C-32", "LSTM-TVC-32", "S4-S-16", "S4-TF-S-16",
    "GB-COMP", "GB-DIST-MLP", "GB-DIST-RNL", "GB-FUZZ-MLP", "GB-FUZZ-RNL", "GB-C-DIST-MLP", "GB-C-FUZZ-RNL",
]


def _offline(model, x, cond, **kw):
    with ad.no_grad():
        return model(x[None, :], cond, **kw).data[0]


def test_06_streaming_equivalence():
    x = (0.3 * np.random.default_rng(0).standard_normal(40000)).astype(np.float32)
    failures, worst = [], {}
    for name in STREAM_MODELS:
        model = build_model(name, seed=0)
        spec = spec_from_name(name)
        cond = np.array([[0.3, 0.8]]) if spec.n_controls else None
        fam = spec.family
        ref = _offline(model, x, cond, mode="recurrent") if fam == "s4" else _offline(model, x, cond)
        conv_ref = _offline(model, x, cond, mode="conv") if fam == "s4" else None
        for f in FRAME_SIZES:
            out = S.stream_signal(model, x, f, cond)
            diff = float(np.abs(out - ref).max())
            if fam in ("lstm", "s4"):
                good = diff == 0.0  # recurrent paths are exact
                if fam == "s4":
                    good &= float(np.abs(out - conv_ref).max()) < 1e-4
            else:
                good = diff < 1e-5
            worst[name] = max(worst.get(name, 0.0), diff)
            if not good:
                failures.append(f"{name}@{f}")
    ok = not failures
    top = max(worst, key=worst.get)
    record(6, ok, f"{len(STREAM_MODELS)} models x {len(FRAME_SIZES)} frame sizes, failures {failures or 'none'}, "
                  f"largest diff {top} {worst[top]:.1e}")
    assert ok


# ---------------------------------------------------------------- 7

def test_07_loss_weight_invariance():
    rng = np.random.default_rng(5)
    y = rng.standard_normal(48000)
    y_hat = np.tanh(1.5 * y) + 0.05 * rng.standard_normal(48000)
    scaled = []
    for pair in L.TABLE_WEIGHT_PAIRS:
        _, comps = L.total_loss(y_hat, y, LossWeights(*pair))
        scaled.append(L.scaled_report(comps))
    spread = max(scaled) - min(scaled)
    ok = spread <= 1e-9
    record(7, ok, f"scaled report over {len(scaled)} weight pairs spreads {spread:.1e} (<=1e-9)")
    assert ok


# ---------------------------------------------------------------- 8

def _brute_rho(x, y):
    def ranks(v):
        return np.array([sum(w < vi for w in v) + (sum(w == vi for w in v) + 1) / 2.0 for vi in v])

    rx, ry = ranks(x), ranks(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    return float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))


def test_08_metric_oracles():
    y = np.array([0.5, -1.0, 2.0, 0.0, 0.25])
    y_hat = np.array([0.25, -1.0, 1.5, 0.5, 0.25])
    # e = (-0.25, 0, -0.5, 0.5, 0); MAPE floors the zero target at 1e-3
    expected = {"l1": 1.25 / 5, "mse": 0.5625 / 5, "esr": 0.5625 / 5.3125, "mape": 500.75 / 5}
    got = {k: float(getattr(L, k)(y_hat, y).data) for k in expected}
    hand = all(abs(got[k] - expected[k]) <= 1e-15 * max(1.0, expected[k]) for k in expected)

    rng = np.random.default_rng(10)
    a = EmbeddingSet(rng.normal(0.0, 1.0, (100_000, 1)))
    b = EmbeddingSet(rng.normal(1.0, 2.0, (100_000, 1)))
    fad = L.fad(a, b)  # closed form (0,1) vs (1,4): 1 + 1 + 4 - 2*2 = 2
    fad_ok = abs(fad - 2.0) < 0.05

    rng = np.random.default_rng(11)
    mismatches = n_checked = 0
    while n_checked < 100:
        n = int(rng.integers(20, 40))
        x = rng.integers(0, 8, n).astype(float)
        yv = rng.integers(0, 8, n).astype(float) + 0.5 * x
        if np.all(x == x[0]) or np.all(yv == yv[0]):
            continue
        n_checked += 1
        mismatches += L.spearman(x, yv)[0] != _brute_rho(x, yv)
    ok = hand and fad_ok and mismatches == 0
    record(8, ok, f"5-element fixtures exact={hand}; FAD {fad:.4f} vs 2 (+-0.05); "
                  f"Spearman {n_checked - mismatches}/{n_checked} exact with ties")
    assert ok


# ---------------------------------------------------------------- 9

def test_09_alignment_recovery():
    rng = np.random.default_rng(2024)
    shifts = rng.integers(-4800, 4801, 100)
    recovered = sum(D.align_by_impulses(shifted_pair(int(s), seed=k % 3)).alignment_offset == s
                    for k, s in enumerate(shifts))
    idem = True
    for s in shifts[:10]:
        once = D.align_by_impulses(shifted_pair(int(s)))
        twice = D.align_by_impulses(once)
        idem &= twice.alignment_offset == 0 and np.array_equal(twice.wet, once.wet) and np.array_equal(
            twice.dry, once.dry)
    ok = recovered == 100 and idem
    record(9, ok, f"{recovered}/100 shifts recovered exactly; idempotent={idem}")
    assert ok


# ---------------------------------------------------------------- 10

def test_10_rtf_shapes_soft():
    models = {n: build_model(n) for n in ("TCN-45-S-16", "TCN-TF-45-S-16", "GCN-45-S-16", "GCN-TF-45-S-16",
                                          "LSTM-32", "S4-S-16")}
    recs = S.rtf_sweep(models, frame_sizes=FRAME_SIZES, repeats=3)
    rtf = {(r.model, r.frame_size): r.rtf for r in recs}
    conv_inc = {n: S.fraction_increasing(recs, n) for n in ("TCN-45-S-16", "GCN-45-S-16")}
    flat = rtf[("LSTM-32", 16384)] / rtf[("LSTM-32", 2048)]
    tf_lower = {n: rtf[(n.replace("-TF", ""), 2048)] > rtf[(n, 2048)] for n in ("TCN-TF-45-S-16", "GCN-TF-45-S-16")}
    shapes = all(v >= 0.8 for v in conv_inc.values()) and flat < 2 and all(tf_lower.values())
    # machine dependent: reported only, never gated
    record(10, True, f"soft, shapes hold={shapes}: conv increasing {conv_inc}, LSTM RTF(16384)/RTF(2048) "
                     f"{flat:.2f}, TFiLM slower at 2048 {tf_lower}")


# ---------------------------------------------------------------- 11

IDENTITY_PAIRS = [
    ("TCN-F-45-S-16", "TCN-45-S-16"), ("TCN-TF-45-S-16", "TCN-45-S-16"), ("TCN-TTF-45-S-16", "TCN-45-S-16"),
    ("TCN-TVF-45-S-16", "TCN-45-S-16"), ("GCN-F-45-L-16", "GCN-45-L-16"), ("GCN-TF-45-L-16", "GCN-45-L-16"),
    ("GCN-TTF-45-L-16", "GCN-45-L-16"), ("GCN-TVF-45-L-16", "GCN-45-L-16"), ("S4-F-S-16", "S4-S-16"),
    ("S4-TF-S-16", "S4-S-16"), ("S4-TTF-S-16", "S4-S-16"), ("S4-TVF-S-16", "S4-S-16"),
]


def test_11_conditioning_identity_at_init():
    x = (0.5 * np.random.default_rng(3).standard_normal((1, 6000))).astype(np.float32)
    cond = np.array([[0.2, 0.9]])
    failures = []
    for cond_name, plain_name in IDENTITY_PAIRS:
        conditioned = build_model(cond_name, seed=4)
        plain = build_model(plain_name, seed=9)
        # give the plain backbone the conditioned model's backbone weights
        shared = conditioned.state_dict()
        plain.load_state_dict({k: shared[k] for k in plain.state_dict()})
        c = cond if spec_from_name(cond_name).n_controls else None
        with ad.no_grad():
            same = np.array_equal(conditioned(x, c).data, plain(x).data)
        if not same:
            failures.append(cond_name)
    ok = not failures
    record(11, ok, f"{len(IDENTITY_PAIRS)} FiLM-family models bit-identical to their plain backbone; "
                   f"failures {failures or 'none'}")
    assert ok
