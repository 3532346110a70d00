import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.io import wavfile

from dualkd.augment import (
    AUGMENT_PRESETS,
    AugmentConfig,
    DeviceImpulseResponse,
    MixStyleConfig,
    dir_convolve,
    freq_mixstyle,
    get_augment_preset,
    load_ir_directory,
    synthetic_ir_bank,
    time_roll,
)
from dualkd.errors import ConfigError, FormatError, InputError

seeds = st.integers(0, 2**31 - 1)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

@pytest.mark.parametrize(
    "name, roll, ms, dir_prob, mix",
    [
        ("passt_surrogate1", 10_000, 312.5, 0.6, (0.4, 0.4)),
        ("passt_surrogate2", 4_000, 125.0, 0.4, (0.4, 0.8)),
        ("cpresnet1", 4_000, 125.0, 0.4, (0.4, 0.8)),
        ("cpresnet2", 4_000, 125.0, 0.6, (0.3, 0.4)),
        ("student_micro", 10_000, 312.5, 0.6, None),
    ],
)
def test_presets_carry_published_values(name, roll, ms, dir_prob, mix):
    cfg = get_augment_preset(name)
    assert cfg.time_roll_max_samples == roll
    assert cfg.time_roll_ms == ms
    assert cfg.dir_prob == dir_prob
    if mix is None:
        assert cfg.mixstyle is None
    else:
        assert (cfg.mixstyle.alpha_mix, cfg.mixstyle.p) == mix


def test_unknown_preset():
    with pytest.raises(ConfigError, match="bogus"):
        get_augment_preset("bogus")


def test_config_round_trip():
    for cfg in AUGMENT_PRESETS.values():
        assert AugmentConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize(
    "cfg, field",
    [
        (AugmentConfig(-1), "time_roll_max_samples"),
        (AugmentConfig(0, 1.5), "dir_prob"),
        (AugmentConfig(0, 0.0, MixStyleConfig(0.0, 0.5)), "alpha_mix"),
        (AugmentConfig(0, 0.0, MixStyleConfig(0.3, -0.1)), "p"),
    ],
)
def test_invalid_config(cfg, field):
    with pytest.raises(ConfigError, match=field):
        cfg.validate()


# ---------------------------------------------------------------------------
# time roll
# ---------------------------------------------------------------------------

def test_zero_shift_is_identity():
    x = np.arange(10.0)
    np.testing.assert_array_equal(time_roll(x, 0, np.random.default_rng(0)), x)


def test_forced_roll_then_inverse():
    x = np.random.default_rng(0).standard_normal(100)
    np.testing.assert_array_equal(time_roll(time_roll(x, 30, shift=17), 30, shift=-17), x)


def test_roll_bound_must_be_shorter_than_clip():
    with pytest.raises(InputError, match="shorter"):
        time_roll(np.zeros(10), 10, np.random.default_rng(0))


def test_roll_needs_rng_unless_forced():
    with pytest.raises(InputError, match="random generator"):
        time_roll(np.zeros(10), 3)


@given(seed=seeds, m=st.integers(0, 99))
def test_roll_preserves_energy_and_stays_in_range(seed, m):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(100)
    y = time_roll(x, m, rng)
    # same multiset of samples, so the energy is preserved exactly (not just up to summation order)
    np.testing.assert_array_equal(np.sort(y**2), np.sort(x**2))
    shifts = [k for k in range(-m, m + 1) if np.array_equal(np.roll(x, k), y)]
    assert shifts


# ---------------------------------------------------------------------------
# device impulse responses
# ---------------------------------------------------------------------------

def test_unit_impulse_is_identity():
    x = np.random.default_rng(1).standard_normal(50)
    np.testing.assert_array_equal(dir_convolve(x, DeviceImpulseResponse([1.0]), 1.0, fire=True), x)


def test_known_convolution():
    # [1, 2, 3] * [1, 0.5] = [1, 2.5, 4, 1.5], truncated to the input length
    y = dir_convolve(np.array([1.0, 2.0, 3.0]), DeviceImpulseResponse([1.0, 0.5]), 1.0, fire=True)
    np.testing.assert_allclose(y, [1.0, 2.5, 4.0], atol=1e-12)


def test_ir_is_peak_normalised():
    y = dir_convolve(np.array([1.0, 2.0, 3.0]), DeviceImpulseResponse([-4.0, 2.0]), 1.0, fire=True)
    np.testing.assert_allclose(y, [-1.0, -1.5, -2.0], atol=1e-12)


@given(seed=seeds)
def test_prob_zero_never_fires(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(20)
    np.testing.assert_array_equal(dir_convolve(x, synthetic_ir_bank(1)[0], 0.0, rng), x)


@given(seed=seeds, g=st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3))
def test_length_one_ir_is_identity(seed, g):
    x = np.random.default_rng(seed).standard_normal(20)
    np.testing.assert_allclose(dir_convolve(x, DeviceImpulseResponse([g]), 1.0, fire=True), x * math.copysign(1, g))


@pytest.mark.parametrize("samples", [[], [0.0, 0.0], [1.0, np.nan]])
def test_bad_impulse_responses(samples):
    with pytest.raises(InputError):
        DeviceImpulseResponse(samples)


def test_load_ir_directory(tmp_path):
    wavfile.write(tmp_path / "b.wav", 32000, np.array([0.5, 0.25], np.float32))
    wavfile.write(tmp_path / "a.wav", 32000, np.array([16384, 0, -8192], np.int16))
    irs = load_ir_directory(tmp_path)
    assert [ir.source_id for ir in irs] == ["a", "b"]
    np.testing.assert_allclose(irs[0].normalized(), [1.0, 0.0, -0.5])


def test_load_ir_directory_rejects_wrong_rate(tmp_path):
    wavfile.write(tmp_path / "x.wav", 16000, np.array([0.5, 0.25], np.float32))
    with pytest.raises(FormatError, match="16000"):
        load_ir_directory(tmp_path)


def test_load_ir_directory_rejects_stereo(tmp_path):
    wavfile.write(tmp_path / "x.wav", 32000, np.ones((4, 2), np.float32))
    with pytest.raises(FormatError, match="mono"):
        load_ir_directory(tmp_path)


def test_load_ir_directory_empty(tmp_path):
    with pytest.raises(InputError):
        load_ir_directory(tmp_path)


# ---------------------------------------------------------------------------
# Freq-MixStyle
# ---------------------------------------------------------------------------

def _stats_oracle(x):
    """Per-sample, per-frequency mean and std over time, by explicit loops."""
    b, f, t = x.shape
    mu = np.zeros((b, f))
    sd = np.zeros((b, f))
    for i in range(b):
        for j in range(f):
            row = [float(v) for v in x[i, j]]
            m = sum(row) / t
            mu[i, j] = m
            sd[i, j] = math.sqrt(sum((v - m) ** 2 for v in row) / t + 1e-6)
    return mu, sd


def test_p_zero_leaves_batch_unchanged():
    x = np.random.default_rng(0).standard_normal((4, 5, 6))
    np.testing.assert_array_equal(freq_mixstyle(x, 0.3, 0.0, np.random.default_rng(1)), x)


def test_lambda_one_identity_permutation_reconstructs():
    x = np.random.default_rng(0).standard_normal((3, 1, 5, 7)).astype(np.float32)
    y = freq_mixstyle(x, 0.3, 1.0, fire=True, lam=1.0, perm=np.arange(3))
    np.testing.assert_allclose(y, x, atol=1e-5)


def test_two_sample_swap_at_half_matches_oracle():
    x = np.random.default_rng(5).standard_normal((2, 4, 8)) * [[[1.0]], [[3.0]]] + [[[0.0]], [[2.0]]]
    y = freq_mixstyle(x, 0.4, 1.0, fire=True, lam=0.5, perm=np.array([1, 0]))
    mu, sd = _stats_oracle(x)
    mu_y, sd_y = _stats_oracle(y)
    expected_mu = (mu[0] + mu[1]) / 2
    np.testing.assert_allclose(mu_y[0], expected_mu, atol=1e-5)
    np.testing.assert_allclose(mu_y[1], expected_mu, atol=1e-5)
    # the mixed std is the average of the two, up to the epsilon inside the square root
    np.testing.assert_allclose(sd_y[0], (sd[0] + sd[1]) / 2, atol=1e-5)


def test_batch_of_one_rejected():
    with pytest.raises(InputError, match="at least 2"):
        freq_mixstyle(np.zeros((1, 3, 4)), 0.3, 0.5, np.random.default_rng(0))


def test_bad_rank_rejected():
    with pytest.raises(InputError, match="B, F, T"):
        freq_mixstyle(np.zeros((3, 4)), 0.3, 0.5, np.random.default_rng(0))


@given(seed=seeds)
def test_standardised_residuals_unchanged(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 3, 10)) * rng.uniform(0.5, 3, (4, 3, 1)) + rng.standard_normal((4, 3, 1))
    y = freq_mixstyle(x, 0.3, 1.0, rng)

    def z(a):
        return (a - a.mean(-1, keepdims=True)) / np.sqrt(a.var(-1, keepdims=True) + 1e-6)

    np.testing.assert_allclose(z(y), z(x), atol=1e-4)


@given(seed=seeds)
def test_deterministic_given_stream(seed):
    x = np.random.default_rng(0).standard_normal((4, 3, 10))
    a = freq_mixstyle(x, 0.4, 0.8, np.random.default_rng(seed))
    b = freq_mixstyle(x, 0.4, 0.8, np.random.default_rng(seed))
    np.testing.assert_array_equal(a, b)
