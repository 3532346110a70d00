"""Log-Mel front-ends for 32 kHz audio.

Periodic Hann window, center reflect padding of ``n_fft // 2``, power
spectrum, HTK mel scale (2595 * log10(1 + f / 700)) with triangles that are
linear in mel, natural log with a power floor.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, replace

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError

SAMPLE_RATE = 32000


@dataclass(frozen=True)
class FrontendConfig:
    n_fft: int
    win_length: int
    hop_length: int
    n_mels: int
    sample_rate_hz: int = SAMPLE_RATE
    f_min_hz: float = 0.0
    f_max_hz: float = SAMPLE_RATE / 2
    log_floor: float = 1e-5

    def validate(self) -> "FrontendConfig":
        if self.sample_rate_hz != SAMPLE_RATE:
            raise ConfigError(f"sample_rate_hz: must be {SAMPLE_RATE}, got {self.sample_rate_hz}")
        if self.n_fft < 2:
            raise ConfigError(f"n_fft: must be >= 2, got {self.n_fft}")
        if not 1 <= self.win_length <= self.n_fft:
            raise ConfigError(f"win_length: must lie in [1, n_fft={self.n_fft}], got {self.win_length}")
        if self.hop_length < 1:
            raise ConfigError(f"hop_length: must be >= 1, got {self.hop_length}")
        if self.n_mels < 1:
            raise ConfigError(f"n_mels: must be >= 1, got {self.n_mels}")
        if self.f_min_hz < 0:
            raise ConfigError(f"f_min_hz: must be >= 0, got {self.f_min_hz}")
        if not self.f_min_hz < self.f_max_hz:
            raise ConfigError(f"f_max_hz: must exceed f_min_hz={self.f_min_hz}, got {self.f_max_hz}")
        if self.f_max_hz > self.sample_rate_hz / 2:
            raise ConfigError(f"f_max_hz: must be <= {self.sample_rate_hz / 2}, got {self.f_max_hz}")
        if not self.log_floor > 0:
            raise ConfigError(f"log_floor: must be > 0, got {self.log_floor}")
        return self

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop_length

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, FrontendConfig] = {
    "passt1": FrontendConfig(n_fft=1024, win_length=800, hop_length=320, n_mels=128),
    "passt2": FrontendConfig(n_fft=4096, win_length=800, hop_length=320, n_mels=128),
    "cpresnet1": FrontendConfig(n_fft=4096, win_length=3072, hop_length=750, n_mels=256),
    "cpresnet2": FrontendConfig(n_fft=4096, win_length=3072, hop_length=500, n_mels=256),
    "cpmobile": FrontendConfig(n_fft=4096, win_length=3072, hop_length=500, n_mels=256),
}


def get_preset(key: str, **overrides) -> FrontendConfig:
    try:
        cfg = PRESETS[key.lower()]
    except KeyError:
        raise ConfigError(f"frontend preset: unknown key {key!r}, expected one of {sorted(PRESETS)}") from None
    return replace(cfg, **overrides).validate() if overrides else cfg


@dataclass
class LogMelSpectrogram:
    data: np.ndarray  # [n_mels, n_frames]
    config: FrontendConfig

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges_hz(cfg: FrontendConfig) -> np.ndarray:
    """n_mels + 2 frequencies: band k spans edges[k]..edges[k + 2] and peaks at edges[k + 1]."""
    m = np.linspace(hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz), cfg.n_mels + 2)
    return mel_to_hz(m)


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular filters, shape [n_mels, n_fft // 2 + 1], float64."""
    cfg.validate()
    return _filterbank(cfg).copy()


@functools.lru_cache(maxsize=32)
def _filterbank(cfg: FrontendConfig) -> np.ndarray:
    fft_mel = hz_to_mel(np.arange(cfg.n_bins) * cfg.sample_rate_hz / cfg.n_fft)
    edges = np.linspace(hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz), cfg.n_mels + 2)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (fft_mel[None, :] - lo) / (mid - lo)
    down = (hi - fft_mel[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise ConfigError(
            f"n_mels: {cfg.n_mels} bands too narrow for n_fft={cfg.n_fft}; band {int(empty[0])} covers no FFT bin"
        )
    fb.setflags(write=False)
    return fb


@functools.lru_cache(maxsize=32)
def _filterbank_t(cfg: FrontendConfig, dtype: str) -> np.ndarray:
    return np.ascontiguousarray(_filterbank(cfg).T.astype(dtype))


@functools.lru_cache(maxsize=32)
def _window(win_length: int, dtype: str) -> np.ndarray:
    n = np.arange(win_length)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_length)
    return w.astype(dtype)


def log_mel_batch(waves: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """[B, L] waveforms -> [B, n_mels, n_frames] log-Mel arrays.

    Computation stays in the input's float precision (float32 or float64).
    """
    waves = np.asarray(waves)
    if waves.ndim != 2:
        raise InputError(f"expected [B, L] waveforms, got shape {waves.shape}")
    if waves.shape[1] < 1:
        raise InputError("waveform is empty")
    if waves.dtype not in (np.float32, np.float64):
        waves = waves.astype(np.float64)
    dtype = waves.dtype.name
    pad = cfg.n_fft // 2
    xp = np.pad(waves, ((0, 0), (pad, pad)), mode="reflect")
    n_frames = cfg.n_frames(waves.shape[1])
    # only the win_length samples centred in each n_fft frame are non-zero after windowing;
    # the zero-padded remainder changes phase but not power
    off = (cfg.n_fft - cfg.win_length) // 2
    frames = sliding_window_view(xp[:, off:], cfg.win_length, axis=1)[:, :: cfg.hop_length][:, :n_frames]
    spec = scipy.fft.rfft(frames * _window(cfg.win_length, dtype), n=cfg.n_fft, axis=-1)
    v = spec.view(spec.real.dtype)
    np.multiply(v, v, out=v)
    power = v[..., 0::2] + v[..., 1::2]
    b = waves.shape[0]
    mel = (power.reshape(b * n_frames, cfg.n_bins) @ _filterbank_t(cfg, dtype))
    mel = mel.reshape(b, n_frames, cfg.n_mels).transpose(0, 2, 1)
    return np.log(np.maximum(mel, cfg.log_floor)).astype(dtype, copy=False)


def log_mel(waveform: np.ndarray, cfg: FrontendConfig) -> LogMelSpectrogram:
    waveform = np.asarray(waveform)
    if waveform.ndim != 1:
        raise InputError(f"expected a 1-D waveform, got shape {waveform.shape}")
    if waveform.size == 0:
        raise InputError("waveform is empty")
    cfg.validate()
    return LogMelSpectrogram(log_mel_batch(waveform[None, :], cfg)[0], cfg)
