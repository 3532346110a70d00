"""Mel band geometry from the closed-form mel formula, evaluated in high precision.

Independent of the package: recomputes band edges, band centres, the FFT bin
nearest each centre, and the band a pure tone falls into.
"""

from mpmath import log10, mp, mpf

mp.dps = 40

PRESETS = {
    # name: (n_fft, n_mels, sample_rate, f_min, f_max)
    "cpmobile": (4096, 256, 32000, 0, 16000),
    "passt1": (1024, 128, 32000, 0, 16000),
}


def hz_to_mel(f):
    return 2595 * log10(1 + mpf(f) / 700)


def mel_to_hz(m):
    return 700 * (mpf(10) ** (mpf(m) / 2595) - 1)


def band_edges(n_mels, f_min, f_max):
    lo, hi = hz_to_mel(f_min), hz_to_mel(f_max)
    step = (hi - lo) / (n_mels + 1)
    return [mel_to_hz(lo + i * step) for i in range(n_mels + 2)]


def nearest_fft_bins(preset):
    n_fft, n_mels, sr, f_min, f_max = PRESETS[preset]
    edges = band_edges(n_mels, f_min, f_max)
    spacing = mpf(sr) / n_fft
    return [int(mp.nint(edges[k + 1] / spacing)) for k in range(n_mels)]


def tone_band(preset, f_hz):
    """Index of the band whose centre is closest to ``f_hz`` among the bands containing it."""
    n_fft, n_mels, sr, f_min, f_max = PRESETS[preset]
    edges = band_edges(n_mels, f_min, f_max)
    inside = [k for k in range(n_mels) if edges[k] <= f_hz <= edges[k + 2]]
    return min(inside, key=lambda k: abs(edges[k + 1] - f_hz))


if __name__ == "__main__":
    print("cpmobile 1 kHz band:", tone_band("cpmobile", 1000))
    e = band_edges(256, 0, 16000)
    k = tone_band("cpmobile", 1000)
    print("neighbouring centres:", [mp.nstr(e[i + 1], 12) for i in (k - 1, k, k + 1)])
    print("frames for 32000 samples at hop 500:", 1 + 32000 // 500)
