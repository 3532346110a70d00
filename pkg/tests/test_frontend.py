import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import mel_bins
from dualkd.errors import ConfigError, InputError
from dualkd.frontend import (
    PRESETS,
    FrontendConfig,
    get_preset,
    log_mel,
    log_mel_batch,
    mel_band_edges_hz,
    mel_filterbank,
)

CPMOBILE = PRESETS["cpmobile"]


# ---------------------------------------------------------------------------
# presets and config validation
# ---------------------------------------------------------------------------

@pytest.mark.parametrize(
    "key, n_fft, win, hop, mels",
    [
        ("passt1", 1024, 800, 320, 128),
        ("passt2", 4096, 800, 320, 128),
        ("cpresnet1", 4096, 3072, 750, 256),
        ("cpresnet2", 4096, 3072, 500, 256),
        ("cpmobile", 4096, 3072, 500, 256),
    ],
)
def test_preset_values(key, n_fft, win, hop, mels):
    cfg = get_preset(key)
    assert (cfg.n_fft, cfg.win_length, cfg.hop_length, cfg.n_mels) == (n_fft, win, hop, mels)
    assert cfg.sample_rate_hz == 32000


def test_unknown_preset():
    with pytest.raises(ConfigError, match="nope"):
        get_preset("nope")


def test_preset_override_is_validated():
    assert get_preset("cpmobile", n_mels=64).n_mels == 64
    with pytest.raises(ConfigError, match="win_length"):
        get_preset("passt1", win_length=2048)


@pytest.mark.parametrize(
    "field, value",
    [("win_length", 0), ("hop_length", 0), ("n_mels", 0), ("f_min_hz", -1.0), ("f_max_hz", 17000.0), ("log_floor", 0.0)],
)
def test_invalid_config_names_field(field, value):
    kw = dict(n_fft=1024, win_length=800, hop_length=320, n_mels=64)
    kw[field] = value
    with pytest.raises(ConfigError, match=field):
        FrontendConfig(**kw).validate()


def test_f_min_must_be_below_f_max():
    with pytest.raises(ConfigError, match="f_max_hz"):
        FrontendConfig(1024, 800, 320, 64, f_min_hz=5000.0, f_max_hz=5000.0).validate()


# ---------------------------------------------------------------------------
# filterbank
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("key", sorted(PRESETS))
def test_filterbank_shape_and_nonnegative(key):
    cfg = PRESETS[key]
    fb = mel_filterbank(cfg)
    assert fb.shape == (cfg.n_mels, cfg.n_fft // 2 + 1)
    assert fb.min() >= 0
    assert np.all(fb.max(axis=1) > 0)


def test_band_edges_match_oracle():
    ours = mel_band_edges_hz(CPMOBILE)
    ref = np.array([float(e) for e in mel_bins.band_edges(256, 0, 16000)])
    np.testing.assert_allclose(ours, ref, rtol=1e-12)


def test_rows_peak_at_nearest_fft_bin_cpmobile():
    peaks = mel_filterbank(CPMOBILE).argmax(axis=1)
    np.testing.assert_array_equal(peaks, mel_bins.nearest_fft_bins("cpmobile"))


@pytest.mark.parametrize("key", sorted(PRESETS))
def test_rows_peak_next_to_band_centre(key):
    # with asymmetric triangles the sampled maximum may sit on either bin bracketing the centre
    cfg = PRESETS[key]
    centres = mel_band_edges_hz(cfg)[1:-1]
    spacing = cfg.sample_rate_hz / cfg.n_fft
    peak_hz = mel_filterbank(cfg).argmax(axis=1) * spacing
    assert np.all(np.abs(peak_hz - centres) < spacing)


# ---------------------------------------------------------------------------
# log-Mel
# ---------------------------------------------------------------------------

def test_silence_hits_floor():
    out = log_mel(np.zeros(32000), CPMOBILE).data
    np.testing.assert_array_equal(out, np.full_like(out, np.log(CPMOBILE.log_floor)))


def test_frame_count_one_second():
    # oracle: 1 + floor(32000 / 500)
    assert log_mel(np.zeros(32000), CPMOBILE).n_frames == 65


def test_one_khz_tone_lands_in_its_band():
    t = np.arange(32000) / 32000
    out = log_mel(0.5 * np.sin(2 * np.pi * 1000 * t), CPMOBILE).data
    # oracle band index from mel_bins.tone_band("cpmobile", 1000)
    assert int(np.argmax(out.mean(axis=1))) == 71
    assert mel_bins.tone_band("cpmobile", 1000) == 71


def test_output_above_floor_everywhere():
    x = np.random.default_rng(0).standard_normal(8000)
    for cfg in PRESETS.values():
        assert log_mel(x, cfg).data.min() >= np.log(cfg.log_floor) - 1e-12


def test_batch_matches_single():
    x = np.random.default_rng(1).standard_normal((3, 6000))
    batch = log_mel_batch(x, CPMOBILE)
    for i in range(3):
        np.testing.assert_array_equal(batch[i], log_mel(x[i], CPMOBILE).data)


def test_float32_close_to_float64():
    x = np.random.default_rng(2).standard_normal((2, 8000))
    a = log_mel_batch(x.astype(np.float32), CPMOBILE)
    b = log_mel_batch(x, CPMOBILE)
    assert a.dtype == np.float32
    np.testing.assert_allclose(a, b, atol=2e-3)


@pytest.mark.parametrize("bad", [np.zeros(0), np.zeros((2, 2, 2))])
def test_bad_input_shapes(bad):
    with pytest.raises(InputError):
        log_mel(bad, CPMOBILE)


def test_deterministic():
    x = np.random.default_rng(3).standard_normal(16000)
    assert log_mel(x, CPMOBILE).data.tobytes() == log_mel(x, CPMOBILE).data.tobytes()


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

SMALL = FrontendConfig(n_fft=256, win_length=200, hop_length=64, n_mels=32)


@given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 4))
def test_hop_shift_moves_interior_frames(seed, k):
    x = np.random.default_rng(seed).standard_normal(64 * 40)
    a = log_mel(x, SMALL).data
    b = log_mel(np.roll(x, k * SMALL.hop_length), SMALL).data
    # frames whose window touches the wrap point or the reflect padding are excluded
    edge = SMALL.n_fft // SMALL.hop_length + 1
    np.testing.assert_allclose(b[:, k + edge : -edge], a[:, edge : -edge - k], atol=1e-4)


@given(seed=st.integers(0, 2**31 - 1), c=st.floats(1.0, 50.0))
def test_scaling_up_never_lowers_entries_above_floor(seed, c):
    x = np.random.default_rng(seed).standard_normal(4000)
    a = log_mel(x, SMALL).data
    b = log_mel(c * x, SMALL).data
    above = a > np.log(SMALL.log_floor)
    assert np.all(b[above] >= a[above] - 1e-9)
