"""Dataset indices: a seeded synthetic scene generator and TAU-style metadata ingestion."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve, firwin2

from .errors import FormatError, InputError

log = logging.getLogger(__name__)

SAMPLE_RATE = 32_000
CLIP_SECONDS = 1.0
SCENE_LABELS = (
    "airport",
    "bus",
    "metro",
    "metro_station",
    "park",
    "public_square",
    "shopping_mall",
    "street_pedestrian",
    "street_traffic",
    "tram",
)
SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class DataItem:
    source: str
    label: int
    device: str
    split: str


@dataclass
class DatasetIndex:
    items: list[DataItem]
    waveforms: np.ndarray | None = None
    audio_root: Path | None = None
    unmatched: list[str] = field(default_factory=list)

    def __post_init__(self):
        for it in self.items:
            if not 0 <= it.label < len(SCENE_LABELS):
                raise InputError(f"{it.source}: label {it.label} out of range")
            if it.split not in SPLITS:
                raise InputError(f"{it.source}: unknown split {it.split!r}")
        if self.waveforms is not None and len(self.waveforms) != len(self.items):
            raise InputError(f"{len(self.waveforms)} waveforms for {len(self.items)} items")

    def __len__(self) -> int:
        return len(self.items)

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, it in enumerate(self.items) if it.split == split], dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    @property
    def devices(self) -> np.ndarray:
        return np.array([it.device for it in self.items])

    def audio(self, idx) -> np.ndarray:
        """Waveforms for the given item indices as a [len(idx), n_samples] float32 array."""
        idx = np.asarray(idx, dtype=np.int64)
        if self.waveforms is not None:
            return self.waveforms[idx]
        return np.stack([_read_clip(self._path(self.items[i].source)) for i in idx])

    def _path(self, source: str) -> Path:
        p = Path(source)
        return p if p.is_absolute() or self.audio_root is None else self.audio_root / p


def _read_clip(path: Path, n_samples: int = int(SAMPLE_RATE * CLIP_SECONDS)) -> np.ndarray:
    sr, data = wavfile.read(path)
    if sr != SAMPLE_RATE:
        raise FormatError(f"{path}: sample rate {sr}, expected {SAMPLE_RATE}")
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / np.iinfo(data.dtype).max
    out = np.zeros(n_samples, dtype=np.float32)
    out[: min(n_samples, data.size)] = data[:n_samples]
    return out


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneRecipe:
    tone_hz: float
    noise_band_hz: tuple[float, float]
    am_rate_hz: float


# Tones sit on a geometric ladder so neighbouring classes are close in mel;
# noise bands overlap between neighbours to keep the task from being trivial.
RECIPES = tuple(
    SceneRecipe(
        tone_hz=320.0 * 1.32**k,
        noise_band_hz=(250.0 * 1.3 ** (k % 5), 250.0 * 1.3 ** (k % 5) * 6.0),
        am_rate_hz=(2.0, 4.5, 7.0, 10.0)[k % 4],
    )
    for k in range(len(SCENE_LABELS))
)

DEVICES = ("a", "b", "c", "d")
HELD_OUT_DEVICE = "d"
# (frequency breakpoints, gains) for each simulated recording device
_DEVICE_RESPONSES = {
    "a": ([0, 0.1, 0.5, 1.0], [1.0, 1.0, 0.9, 0.8]),
    "b": ([0, 0.05, 0.2, 0.5, 1.0], [0.2, 0.6, 1.0, 0.7, 0.4]),
    "c": ([0, 0.2, 0.4, 0.7, 1.0], [1.0, 0.9, 0.5, 0.2, 0.1]),
    "d": ([0, 0.03, 0.1, 0.3, 0.6, 1.0], [0.1, 0.4, 1.3, 0.6, 1.2, 0.3]),
}
DEVICE_TAPS = 63


def device_filter(device: str) -> np.ndarray:
    freqs, gains = _DEVICE_RESPONSES[device]
    return firwin2(DEVICE_TAPS, freqs, gains)


def _band_noise(rng, n: int, lo: float, hi: float) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spec[(f < lo) | (f > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    return x / (np.std(x) + 1e-12)


def render_scene(label: int, rng: np.random.Generator, n: int = int(SAMPLE_RATE * CLIP_SECONDS), jitter: bool = True):
    """One clip of class ``label`` before any device coloration."""
    r = RECIPES[label]
    t = np.arange(n) / SAMPLE_RATE
    j = rng.uniform(-0.16, 0.16) if jitter else 0.0
    f0 = r.tone_hz * np.exp(j)
    am = 1.0 + 0.6 * np.sin(2 * np.pi * r.am_rate_hz * t + rng.uniform(0, 2 * np.pi))
    tone = np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi)) + 0.4 * np.sin(2 * np.pi * 2 * f0 * t)
    lo, hi = r.noise_band_hz
    noise = _band_noise(rng, n, lo, hi) * am
    x = rng.uniform(0.3, 1.2) * tone + rng.uniform(0.4, 1.0) * noise
    if jitter:
        # distractor tone from a random other class, plus broadband background
        other = RECIPES[(label + rng.integers(1, len(RECIPES))) % len(RECIPES)]
        x += rng.uniform(0.0, 1.2) * np.sin(2 * np.pi * other.tone_hz * np.exp(rng.uniform(-0.16, 0.16)) * t)
        x += rng.uniform(0.5, 2.5) * rng.standard_normal(n)
    return x


def synth_dataset(n_per_class: int, seed: int = 0, split_fractions=(0.6, 0.2, 0.2)) -> DatasetIndex:
    """Balanced 10-class synthetic scenes, 1 s at 32 kHz, each clip coloured by one of four devices.

    Device ``d`` never appears in train or valid, only in test.
    """
    if n_per_class < 1:
        raise InputError(f"n_per_class must be >= 1, got {n_per_class}")
    n_train = int(round(split_fractions[0] * n_per_class))
    n_valid = int(round(split_fractions[1] * n_per_class))
    filters = {d: device_filter(d) for d in DEVICES}
    seen = [d for d in DEVICES if d != HELD_OUT_DEVICE]
    n = int(SAMPLE_RATE * CLIP_SECONDS)
    items, waves = [], []
    for label in range(len(SCENE_LABELS)):
        for k in range(n_per_class):
            rng = np.random.default_rng([seed, label, k])
            split = "train" if k < n_train else "valid" if k < n_train + n_valid else "test"
            device = seen[k % len(seen)] if split != "test" else DEVICES[(k - n_train - n_valid + label) % len(DEVICES)]
            x = fftconvolve(render_scene(label, rng, n), filters[device], mode="same")
            x = 0.1 * x / (np.sqrt(np.mean(x**2)) + 1e-12)
            waves.append(x.astype(np.float32))
            items.append(DataItem(f"synth:{seed}:{label}:{k}", label, device, split))
    return DatasetIndex(items, np.stack(waves))


# ---------------------------------------------------------------------------
# TAU-format metadata
# ---------------------------------------------------------------------------

_DEVICE_COLUMNS = ("source", "source_label")


def _read_tsv(path: Path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f, delimiter="\t")
        if reader.fieldnames is None:
            raise FormatError(f"{path}: missing header row")
        return list(reader.fieldnames), list(reader)


def load_tau_index(meta_path: str | Path, split_path: str | Path | None = None, audio_root: str | Path | None = None):
    """Parse tab-separated metadata (``filename``, ``scene_label``, ``source``) and an optional subset list.

    The subset file is tab-separated with a ``filename`` column; an optional
    ``split`` column assigns train/valid/test, otherwise items default to train.
    """
    meta_path = Path(meta_path)
    cols, rows = _read_tsv(meta_path)
    dev_col = next((c for c in _DEVICE_COLUMNS if c in cols), None)
    missing = [c for c in ("filename", "scene_label") if c not in cols] + ([] if dev_col else ["source"])
    if missing:
        raise FormatError(f"{meta_path}: missing columns {missing}; found {cols}")
    label_of = {name: i for i, name in enumerate(SCENE_LABELS)}

    wanted: dict[str, str] | None = None
    if split_path is not None:
        scols, srows = _read_tsv(Path(split_path))
        if "filename" not in scols:
            raise FormatError(f"{split_path}: missing columns ['filename']; found {scols}")
        wanted = {r["filename"]: (r.get("split") or "train") for r in srows}

    items, present = [], set()
    for r in rows:
        name = r["filename"]
        scene = r["scene_label"]
        if scene not in label_of:
            raise FormatError(f"{meta_path}: unknown scene label {scene!r} for {name}")
        if wanted is not None and name not in wanted:
            continue
        present.add(name)
        split = wanted[name] if wanted is not None else (r.get("split") or "train")
        items.append(DataItem(name, label_of[scene], r[dev_col], split))
    unmatched = sorted(set(wanted) - present) if wanted is not None else []
    if unmatched:
        log.warning("%d subset entries not found in %s", len(unmatched), meta_path)
    if not items:
        raise InputError(f"no items left after intersecting {meta_path} with {split_path}")
    return DatasetIndex(items, audio_root=Path(audio_root) if audio_root else meta_path.parent, unmatched=unmatched)
