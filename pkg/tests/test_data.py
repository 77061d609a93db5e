import warnings

import numpy as np
import pytest
from scipy.io import wavfile

from afxmodel import data as D
from afxmodel.data import AlignmentError, AudioPair, FormatError


def test_wav_round_trip_24_bit(tmp_path):
    x = np.random.default_rng(0).uniform(-0.9, 0.9, 4800)
    D.write_wav(tmp_path / "a.wav", x, bits=24)
    assert D.wav_bit_depth(tmp_path / "a.wav") == 24
    y = D.read_wav(tmp_path / "a.wav")
    assert y.shape == x.shape
    assert np.abs(y - x).max() <= 2.0 ** -23


def test_wav_round_trip_16_and_float(tmp_path):
    x = np.linspace(-0.5, 0.5, 100)
    D.write_wav(tmp_path / "a.wav", x, bits=16)
    assert np.abs(D.read_wav(tmp_path / "a.wav") - x).max() <= 2.0 ** -15
    D.write_wav(tmp_path / "b.wav", x, bits=32)
    np.testing.assert_allclose(D.read_wav(tmp_path / "b.wav"), x, atol=1e-7)


def test_wrong_rate_rejected(tmp_path):
    wavfile.write(tmp_path / "a.wav", 44100, np.zeros(100, np.int16))
    with pytest.raises(FormatError, match="44100"):
        D.read_wav(tmp_path / "a.wav")


def test_stereo_rejected(tmp_path):
    wavfile.write(tmp_path / "a.wav", 48000, np.zeros((100, 2), np.int16))
    with pytest.raises(FormatError, match="mono"):
        D.read_wav(tmp_path / "a.wav")


def test_load_pair_reads_sidecar(tmp_path):
    D.write_wav(tmp_path / "x.dry.wav", np.zeros(480))
    D.write_wav(tmp_path / "x.wet.wav", np.zeros(480))
    (tmp_path / "x.yaml").write_text("device_type: fuzz\nsettings: {tone: 5, gain: 10}\nsplit: test\n")
    pair = D.load_pair(tmp_path / "x.dry.wav", tmp_path / "x.wet.wav")
    assert pair.dry.size == pair.wet.size == 480
    assert pair.split == "test"
    np.testing.assert_allclose(pair.controls(), [1.0, 0.5])  # sorted: gain, tone


def test_alignment_delay_48(make_pair):
    ref = make_pair(0)
    out = D.align_by_impulses(make_pair(48))
    assert out.alignment_offset == 48
    np.testing.assert_array_equal(out.dry, ref.dry[: out.dry.size])
    np.testing.assert_array_equal(out.wet, ref.wet[: out.wet.size])


def test_alignment_negative_shift(make_pair):
    ref = make_pair(0)
    out = D.align_by_impulses(make_pair(-300))
    assert out.alignment_offset == -300
    np.testing.assert_array_equal(out.dry, ref.dry[300:300 + out.dry.size])
    np.testing.assert_array_equal(out.wet, ref.wet[300:300 + out.wet.size])


def test_alignment_zero_and_idempotent(make_pair):
    pair = make_pair(0)
    once = D.align_by_impulses(pair)
    assert once.alignment_offset == 0
    np.testing.assert_array_equal(once.wet, pair.wet)
    twice = D.align_by_impulses(make_pair(1234))
    again = D.align_by_impulses(twice)
    assert again.alignment_offset == 0
    np.testing.assert_array_equal(again.wet, twice.wet)


def test_alignment_random_shifts(make_pair):
    rng = np.random.default_rng(1)
    for shift in rng.integers(-4800, 4801, 8):
        assert D.align_by_impulses(make_pair(int(shift))).alignment_offset == shift


def test_alignment_fails_on_noise():
    rng = np.random.default_rng(2)
    pair = AudioPair(rng.standard_normal(96000), rng.standard_normal(96000))
    with pytest.raises(AlignmentError):
        D.align_by_impulses(pair)


def test_manual_offset_override(make_pair):
    pair = make_pair(48)
    pair.metadata["alignment_offset"] = 40
    assert D.align_by_impulses(pair).alignment_offset == 40


def test_end_impulse_drift(make_pair):
    pair = make_pair(0)
    wet = pair.wet.copy()
    wet[-12000] = 0.0
    wet[-12000 + 5] = 0.99
    with pytest.warns(D.AlignmentWarning):
        D.align_by_impulses(AudioPair(pair.dry, wet))
    wet[-12000 + 5] = 0.0
    wet[-12000 + 40] = 0.99
    with pytest.raises(AlignmentError):
        D.align_by_impulses(AudioPair(pair.dry, wet))


def test_gain_stage_regions_and_range():
    n = 15 * 48000
    gains = D.stage_gains_db(n, seed=3)
    assert gains.size == 3
    lin = 10 ** (gains / 20)
    assert np.all((lin >= 0.1) & (lin <= 1.0))
    x = np.ones(n)
    y = D.gain_stage(x, seed=3)
    np.testing.assert_array_equal(y, D.gain_stage(x, seed=3))
    for k in range(3):
        np.testing.assert_allclose(y[k * D.GAIN_REGION:(k + 1) * D.GAIN_REGION], lin[k])


def test_segmentation_split_and_conservation():
    n = 30 * 48000 + 1000
    pair = AudioPair(np.arange(n, dtype=float), np.arange(n, dtype=float), name="p")
    segs = D.segment_and_split(pair, seed=4)
    assert segs.counts() == {"train": 9, "val": 1, "test": 0}
    total = sum(s.dry.size for s in segs.segments)
    assert total <= n < total + D.SEGMENT
    for s in segs.segments:
        assert s.dry[0] == s.start
    again = D.segment_and_split(pair, seed=4)
    assert [s.split for s in again.segments] == [s.split for s in segs.segments]


def test_test_tagged_file_routed_to_test():
    n = 10 * 48000
    pair = AudioPair(np.zeros(n), np.zeros(n), metadata={"split": "test"})
    assert D.segment_and_split(pair, seed=0).counts() == {"train": 0, "val": 0, "test": 3}


def test_too_short_file():
    with pytest.raises(D.DataError):
        D.segment_and_split(AudioPair(np.zeros(100), np.zeros(100)), seed=0)


@pytest.fixture(scope="module")
def mini_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    D.make_synthetic_dataset(root, n_pairs=2, duration_s=3.0, seed=5)
    return root


def test_verify_clean_dataset(mini_dataset):
    report = D.verify_dataset(mini_dataset)
    assert report.ok
    assert len(report.rows) == 2
    assert report.summary().endswith("PASS")
    assert report.to_csv().splitlines()[0].split(",") == list(D.REPORT_COLUMNS)


def test_verify_flags_misaligned_pair(tmp_path):
    root = tmp_path / "ds"
    dev = D.make_synthetic_dataset(root, n_pairs=2, duration_s=3.0, seed=6)
    wet = D.read_wav(dev / "pair001.wet.wav")
    D.write_wav(dev / "pair001.wet.wav", np.concatenate([np.zeros(37), wet[:-37]]))
    report = D.verify_dataset(root)
    assert not report.ok
    bad = [r for r in report.rows if r["status"] == "error"]
    assert [r["pair"] for r in bad] == ["pair001"]
    assert bad[0]["offset"] == 37


def test_verify_warns_on_clipping(tmp_path):
    root = tmp_path / "ds"
    dev = D.make_synthetic_dataset(root, n_pairs=1, duration_s=3.0, seed=7)
    wet = D.read_wav(dev / "pair000.wet.wav")
    wet[60000:60040] = 1.0
    D.write_wav(dev / "pair000.wet.wav", wet)
    report = D.verify_dataset(root)
    row = report.rows[0]
    assert row["clipped_wet"] and row["status"] == "warning"
    assert report.ok


def test_load_dataset(mini_dataset):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        segs = D.load_dataset(mini_dataset, seed=0)
    # 3 s of music plus 1 s of impulse padding per file -> one full segment each
    assert sum(segs.counts().values()) == 2
    with pytest.raises(D.DataError):
        D.load_dataset(mini_dataset / "missing")
