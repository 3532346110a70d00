"""Waveform and spectrogram augmentations: time roll, device impulse responses, Freq-MixStyle."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve

from .errors import ConfigError, FormatError, InputError

SAMPLE_RATE = 32_000
MIXSTYLE_EPS = 1e-6


@dataclass(frozen=True)
class MixStyleConfig:
    alpha_mix: float
    p: float

    def validate(self) -> "MixStyleConfig":
        if not self.alpha_mix > 0:
            raise ConfigError(f"mixstyle.alpha_mix: must be > 0, got {self.alpha_mix}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"mixstyle.p: must lie in [0, 1], got {self.p}")
        return self


@dataclass(frozen=True)
class AugmentConfig:
    time_roll_max_samples: int = 0
    dir_prob: float = 0.0
    mixstyle: MixStyleConfig | None = None

    def validate(self) -> "AugmentConfig":
        if int(self.time_roll_max_samples) != self.time_roll_max_samples or self.time_roll_max_samples < 0:
            raise ConfigError(f"time_roll_max_samples: must be an integer >= 0, got {self.time_roll_max_samples}")
        if not 0.0 <= self.dir_prob <= 1.0:
            raise ConfigError(f"dir_prob: must lie in [0, 1], got {self.dir_prob}")
        if self.mixstyle is not None:
            self.mixstyle.validate()
        return self

    @property
    def time_roll_ms(self) -> float:
        return 1000.0 * self.time_roll_max_samples / SAMPLE_RATE

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        ms = d.get("mixstyle")
        if ms is not None:
            d["mixstyle"] = MixStyleConfig(**ms)
        return cls(**d).validate()


# Per-model settings. 312 ms is quoted as 10,000 samples and 125 ms as 4,000 samples at 32 kHz.
ROLL_LONG = 10_000
ROLL_SHORT = 4_000

AUGMENT_PRESETS: dict[str, AugmentConfig] = {
    "passt_surrogate1": AugmentConfig(ROLL_LONG, 0.6, MixStyleConfig(0.4, 0.4)),
    "passt_surrogate2": AugmentConfig(ROLL_SHORT, 0.4, MixStyleConfig(0.4, 0.8)),
    "cpresnet1": AugmentConfig(ROLL_SHORT, 0.4, MixStyleConfig(0.4, 0.8)),
    "cpresnet2": AugmentConfig(ROLL_SHORT, 0.6, MixStyleConfig(0.3, 0.4)),
    "student_micro": AugmentConfig(ROLL_LONG, 0.6, None),
}


def get_augment_preset(name: str) -> AugmentConfig:
    try:
        return AUGMENT_PRESETS[name]
    except KeyError:
        raise ConfigError(f"augment preset: unknown {name!r}, expected one of {sorted(AUGMENT_PRESETS)}") from None


@dataclass(frozen=True)
class DeviceImpulseResponse:
    samples: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64).ravel()
        if s.size == 0:
            raise InputError(f"impulse response {self.source_id!r} is empty")
        if not np.any(s):
            raise InputError(f"impulse response {self.source_id!r} is all zeros")
        if not np.all(np.isfinite(s)):
            raise InputError(f"impulse response {self.source_id!r} has non-finite samples")
        object.__setattr__(self, "samples", s)

    def normalized(self) -> np.ndarray:
        return self.samples / np.max(np.abs(self.samples))


def _need_rng(rng, what: str) -> np.random.Generator:
    if rng is None:
        raise InputError(f"{what}: pass a random generator or force the draw")
    return rng


def time_roll(waveform: np.ndarray, max_shift: int, rng: np.random.Generator | None = None, shift: int | None = None):
    """Circular shift by k ~ U{-max_shift..max_shift}; ``shift`` forces k."""
    x = np.asarray(waveform)
    if max_shift < 0:
        raise InputError(f"max_shift must be >= 0, got {max_shift}")
    if max_shift >= x.shape[-1]:
        raise InputError(f"max_shift {max_shift} must be shorter than the waveform ({x.shape[-1]} samples)")
    if shift is None:
        if max_shift == 0:
            return x.copy()
        shift = int(_need_rng(rng, "time_roll").integers(-max_shift, max_shift + 1))
    return np.roll(x, shift, axis=-1)


def dir_convolve(
    waveform: np.ndarray,
    ir: DeviceImpulseResponse,
    prob: float,
    rng: np.random.Generator | None = None,
    fire: bool | None = None,
) -> np.ndarray:
    """With probability ``prob``, convolve with the peak-normalised IR and keep the first len(x) samples."""
    x = np.asarray(waveform)
    if not 0.0 <= prob <= 1.0:
        raise InputError(f"prob must lie in [0, 1], got {prob}")
    if fire is None:
        fire = prob > 0 and _need_rng(rng, "dir_convolve").random() < prob
    if not fire:
        return x.copy()
    h = ir.normalized()
    if h.size == 1:
        y = x.astype(np.float64) * h[0]
    else:
        y = fftconvolve(x.astype(np.float64), h, mode="full")[: x.shape[-1]]
    return y.astype(x.dtype, copy=False)


def freq_mixstyle(
    batch: np.ndarray,
    alpha_mix: float,
    p: float,
    rng: np.random.Generator | None = None,
    fire: bool | None = None,
    lam: np.ndarray | float | None = None,
    perm: np.ndarray | None = None,
) -> np.ndarray:
    """Mix per-frequency statistics (taken over time) between batch members.

    ``batch`` is [B, F, T] or [B, 1, F, T]. One Bernoulli(p) draw and one
    permutation per batch; lambda is drawn per sample from Beta(alpha, alpha).
    ``fire``, ``lam`` and ``perm`` override the corresponding draws.
    """
    x = np.asarray(batch)
    if x.ndim not in (3, 4):
        raise InputError(f"freq_mixstyle expects [B, F, T] or [B, 1, F, T], got shape {x.shape}")
    if not alpha_mix > 0:
        raise InputError(f"alpha_mix must be > 0, got {alpha_mix}")
    if not 0.0 <= p <= 1.0:
        raise InputError(f"p must lie in [0, 1], got {p}")
    b = x.shape[0]
    if p > 0 and b < 2:
        raise InputError(f"freq_mixstyle needs a batch of at least 2 when p > 0, got {b}")
    if fire is None:
        fire = p > 0 and _need_rng(rng, "freq_mixstyle").random() < p
    if not fire:
        return x.copy()
    if lam is None:
        lam = _need_rng(rng, "freq_mixstyle").beta(alpha_mix, alpha_mix, size=b)
    if perm is None:
        perm = _need_rng(rng, "freq_mixstyle").permutation(b)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (b,)).reshape((b,) + (1,) * (x.ndim - 1))
    perm = np.asarray(perm)

    xd = x.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    sig = np.sqrt(xd.var(axis=-1, keepdims=True) + MIXSTYLE_EPS)
    mu_mix = lam * mu + (1.0 - lam) * mu[perm]
    sig_mix = lam * sig + (1.0 - lam) * sig[perm]
    return ((xd - mu) / sig * sig_mix + mu_mix).astype(x.dtype)


def load_ir_directory(path: str | Path, sample_rate: int = SAMPLE_RATE) -> list[DeviceImpulseResponse]:
    """Read every single-channel WAV in ``path`` (sorted by name) as an impulse response."""
    root = Path(path)
    if not root.is_dir():
        raise InputError(f"impulse response directory {root} does not exist")
    irs = []
    for f in sorted(root.glob("*.wav")):
        try:
            sr, data = wavfile.read(f)
        except ValueError as e:
            raise FormatError(f"{f}: unreadable WAV ({e})") from e
        if sr != sample_rate:
            raise FormatError(f"{f}: sample rate {sr}, expected {sample_rate}")
        if data.ndim != 1:
            raise FormatError(f"{f}: expected mono, got {data.shape[1]} channels")
        if np.issubdtype(data.dtype, np.integer):
            data = data.astype(np.float64) / np.iinfo(data.dtype).max
        irs.append(DeviceImpulseResponse(data.astype(np.float64), f.stem))
    if not irs:
        raise InputError(f"no .wav impulse responses in {root}")
    return irs


def synthetic_ir_bank(n: int = 8, seed: int = 0, length: int = 256) -> list[DeviceImpulseResponse]:
    """Decaying random FIR responses standing in for measured microphone IRs."""
    rng = np.random.default_rng([seed, 0x1D1])
    t = np.arange(length)
    bank = []
    for k in range(n):
        decay = np.exp(-t / rng.uniform(8, 64))
        h = rng.standard_normal(length) * decay
        h[0] = 1.0
        bank.append(DeviceImpulseResponse(h, f"synthetic_{k}"))
    return bank
