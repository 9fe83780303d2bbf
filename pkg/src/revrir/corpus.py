"""Source signals, reverberation and train/validation dataset assembly."""

from __future__ import annotations

import json
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .catalog import Catalog
from .dsp import Signal, convolve_arrays
from .errors import ConfigError, FormatError, ValidationError
from .simulate import Rir, item_rng

SAMPLE_RATE = 8000
MIN_DURATION = 0.5
MAX_DURATION = 10.0
MANIFEST_FORMAT = "revrir-dataset v1"


@dataclass(frozen=True, eq=False)
class Utterance:
    signal: Signal
    source_id: str
    seed: tuple[int, int] | None = None  # (pool seed, index), when synthetic
    path: str | None = None  # origin file, when ingested

    def __post_init__(self):
        if self.signal.sample_rate != SAMPLE_RATE:
            raise ValidationError(f"utterances must be {SAMPLE_RATE} Hz, got {self.signal.sample_rate}")
        dur = self.signal.duration
        if not MIN_DURATION - 1e-12 <= dur <= MAX_DURATION + 1e-12:
            raise ValidationError(f"utterance duration {dur:.3f} s outside [{MIN_DURATION}, {MAX_DURATION}]")


@dataclass(frozen=True, eq=False)
class ReverberantClip:
    signal: Signal
    class_id: int
    rir_index: int
    source_id: str
    gain: float = 1.0


@dataclass(frozen=True)
class SynthConfig:
    sample_rate: int = SAMPLE_RATE
    tilt: bool = True
    tilt_corner_hz: float = 500.0
    syllable_rate_hz: float = 4.0
    gap_range: tuple[float, float] = (0.1, 0.4)
    peak: float = 0.5


def _syllabic_envelope(rng: np.random.Generator, n: int, fs: int, rate: float) -> np.ndarray:
    env = np.zeros(n)
    pos = 0
    while pos < n:
        # gamma(4) lengths: mean 1/rate, rarely very short
        length = max(8, int(rng.gamma(4.0, 1.0 / (4.0 * rate)) * fs))
        amp = rng.uniform(0.3, 1.0)
        seg = amp * np.sin(np.pi * (np.arange(length) + 0.5) / length) ** 2
        take = min(length, n - pos)
        env[pos : pos + take] = seg[:take]
        pos += length
    return env


def _gap_mask(rng: np.random.Generator, duration: float, fs: int, gap_range: tuple[float, float]) -> np.ndarray:
    n = int(round(duration * fs))
    n_gaps = max(1, math.ceil(duration - 1e-9))
    hi = min(gap_range[1], 0.5 * duration / n_gaps)
    lo = min(gap_range[0], hi)
    gaps = [int(round(rng.uniform(lo, hi) * fs)) for _ in range(n_gaps)]
    speech = n - sum(gaps)
    cuts = np.sort(rng.integers(0, speech + 1, size=n_gaps))
    mask = np.ones(n)
    offset = 0
    for cut, gap in zip(cuts, gaps):
        start = int(cut) + offset
        mask[start : start + gap] = 0.0
        offset += gap
    return mask


def tilt_response(freqs: np.ndarray, corner_hz: float) -> np.ndarray:
    """First-order magnitude roll-off: flat below the corner, -6 dB/octave above."""
    return 1.0 / np.sqrt(1.0 + (freqs / corner_hz) ** 2)


def synth_utterance(
    rng: np.random.Generator,
    duration: float,
    config: SynthConfig = SynthConfig(),
    source_id: str = "synthetic",
    seed: tuple[int, int] | None = None,
) -> Utterance:
    """Speech-shaped noise: tilted white noise under a syllabic envelope with silent gaps."""
    if not MIN_DURATION <= duration <= MAX_DURATION:
        raise ValidationError(f"duration {duration} s outside [{MIN_DURATION}, {MAX_DURATION}]")
    fs = config.sample_rate
    n = int(round(duration * fs))
    noise = rng.standard_normal(n)
    env = _syllabic_envelope(rng, n, fs, config.syllable_rate_hz)
    env *= _gap_mask(rng, duration, fs, config.gap_range)
    if config.tilt:
        spec = np.fft.rfft(noise)
        spec *= tilt_response(np.fft.rfftfreq(n, 1.0 / fs), config.tilt_corner_hz)
        noise = np.fft.irfft(spec, n)
    x = noise * env
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= config.peak / peak
    return Utterance(Signal(x, fs), source_id, seed=seed)


def synth_pool(count: int, duration: float, seed: int, config: SynthConfig = SynthConfig()) -> list[Utterance]:
    """``count`` synthetic utterances, each from its own derived seed."""
    out = []
    for k in range(count):
        out.append(synth_utterance(item_rng(seed, 0x5EED, k), duration, config, source_id=f"syn-{k:05d}", seed=(seed, k)))
    return out


# --- WAV ---------------------------------------------------------------------


def save_wav(clip, path: str | Path) -> None:
    """Write a 16-bit mono PCM WAV from a Signal, Utterance or ReverberantClip."""
    signal = getattr(clip, "signal", clip)
    pcm = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(signal.sample_rate))
        fh.writeframes(pcm.tobytes())


def load_wav(path: str | Path, source_id: str | None = None) -> Utterance:
    path = Path(path)
    try:
        fh = wave.open(str(path), "rb")
    except wave.Error as exc:
        raise FormatError(f"{path}: format: not 16-bit PCM ({exc})") from exc
    with fh:
        if fh.getnchannels() != 1:
            raise FormatError(f"{path}: channels: expected mono, found {fh.getnchannels()}")
        if fh.getsampwidth() != 2:
            raise FormatError(f"{path}: sample width: expected 16-bit, found {8 * fh.getsampwidth()}-bit")
        if fh.getframerate() != SAMPLE_RATE:
            raise FormatError(f"{path}: sample rate: expected {SAMPLE_RATE} Hz, found {fh.getframerate()} Hz")
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Utterance(Signal(samples, SAMPLE_RATE), source_id or path.stem, path=str(path))


def load_wav_dir(directory: str | Path) -> list[Utterance]:
    return [load_wav(p) for p in sorted(Path(directory).glob("*.wav"))]


# --- reverberation -------------------------------------------------------------


def reverberate(s: Utterance, h: Rir, rir_index: int = -1, peak: float | None = 0.9) -> ReverberantClip:
    """``x = s * h`` truncated to ``len(s)``; peak-normalised to ``peak`` unless None."""
    if s.signal.sample_rate != h.sample_rate:
        raise ValidationError(f"sample-rate mismatch: utterance {s.signal.sample_rate}, RIR {h.sample_rate}")
    x = convolve_arrays(s.signal.samples, h.samples)[: len(s.signal)]
    gain = 1.0
    if peak is not None:
        top = np.max(np.abs(x))
        if top > 0:
            gain = peak / top
            x = x * gain
    return ReverberantClip(Signal(x, h.sample_rate), h.class_id, rir_index, s.source_id, gain)


# --- dataset assembly ------------------------------------------------------------


@dataclass(frozen=True)
class SplitPolicy:
    val_rir_fraction: float = 0.2
    val_source_fraction: float = 0.2
    pair_mode: str = "same"  # "same": paired RIR is the one convolved; "class": any same-class RIR

    def __post_init__(self):
        for name in ("val_rir_fraction", "val_source_fraction"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie strictly between 0 and 1")
        if self.pair_mode not in ("same", "class"):
            raise ConfigError(f"unknown pair_mode {self.pair_mode!r}")


@dataclass(frozen=True)
class DatasetItem:
    class_id: int
    clip_rir_index: int
    pair_rir_index: int
    source_id: str


@dataclass(eq=False)
class Dataset:
    """One split. Clips are rendered on access; nothing heavy is stored."""

    name: str
    items: list[DatasetItem]
    bank: Sequence[Rir]
    sources: dict[str, Utterance]
    rir_indices: dict[int, list[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.items)

    def clip(self, i: int) -> ReverberantClip:
        item = self.items[i]
        return reverberate(self.sources[item.source_id], self.bank[item.clip_rir_index], item.clip_rir_index)

    def __getitem__(self, i: int) -> tuple[ReverberantClip, Rir, int]:
        item = self.items[i]
        return self.clip(i), self.bank[item.pair_rir_index], item.class_id

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.class_id for it in self.items], dtype=np.int64)

    def distinct_rirs(self) -> list[int]:
        """Sorted bank indices of every RIR reserved for this split."""
        return sorted(i for idx in self.rir_indices.values() for i in idx)


def canonical_bank(bank: Sequence[Rir]) -> list[Rir]:
    """Bank sorted by (class, beta, placement); makes indices independent of input order."""
    return sorted(bank, key=Rir.sort_key)


def _split(ids: list, fraction: float, rng: np.random.Generator) -> tuple[list, list]:
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_val = max(1, int(round(fraction * len(ids))))
    return sorted(order[n_val:]), sorted(order[:n_val])


def build_dataset(
    catalog: Catalog,
    bank: Sequence[Rir],
    pool: Sequence[Utterance],
    policy: SplitPolicy,
    pairs_per_class: int,
    seed: int,
) -> tuple[Dataset, Dataset]:
    """Balanced train/validation splits with disjoint RIRs and disjoint sources."""
    if pairs_per_class < 1:
        raise ConfigError("pairs_per_class must be at least 1")
    bank = canonical_bank(bank)
    by_class: dict[int, list[int]] = {room.class_id: [] for room in catalog}
    for i, rir in enumerate(bank):
        if rir.class_id not in by_class:
            raise ConfigError(f"bank holds class {rir.class_id}, which the catalog does not define")
        by_class[rir.class_id].append(i)

    rir_split: dict[str, dict[int, list[int]]] = {"train": {}, "val": {}}
    for class_id, idx in by_class.items():
        if len(idx) < 2:
            raise ConfigError(f"class {class_id} has {len(idx)} RIRs; both splits need at least one")
        train, val = _split(idx, policy.val_rir_fraction, item_rng(seed, 1, class_id))
        rir_split["train"][class_id], rir_split["val"][class_id] = train, val

    sources = {u.source_id: u for u in pool}
    if len(sources) != len(pool):
        raise ConfigError("utterance pool has duplicate source ids")
    if len(sources) < 2:
        raise ConfigError("need at least two sources to split")
    src_train, src_val = _split(sorted(sources), policy.val_source_fraction, item_rng(seed, 2))
    src_split = {"train": src_train, "val": src_val}

    out = []
    for code, split in enumerate(("train", "val")):
        items = []
        for class_id in sorted(by_class):
            idx = rir_split[split][class_id]
            rng = item_rng(seed, 3, code, class_id)
            order = np.concatenate([rng.permutation(idx) for _ in range(-(-pairs_per_class // len(idx)))])
            for j in range(pairs_per_class):
                clip_rir = int(order[j])
                pair_rir = clip_rir if policy.pair_mode == "same" else int(rng.choice(idx))
                source = src_split[split][int(rng.integers(len(src_split[split])))]
                items.append(DatasetItem(class_id, clip_rir, pair_rir, source))
        out.append(
            Dataset(split, items, bank, {s: sources[s] for s in src_split[split]}, rir_split[split])
        )
    train, val = out
    check_leakage(train, val)
    return train, val


def check_leakage(train: Dataset, val: Dataset) -> None:
    train_rirs = {i for it in train.items for i in (it.clip_rir_index, it.pair_rir_index)}
    val_rirs = {i for it in val.items for i in (it.clip_rir_index, it.pair_rir_index)}
    if train_rirs & val_rirs:
        raise ConfigError(f"RIRs shared between splits: {sorted(train_rirs & val_rirs)[:5]}")
    shared = {it.source_id for it in train.items} & {it.source_id for it in val.items}
    if shared:
        raise ConfigError(f"sources shared between splits: {sorted(shared)[:5]}")
    for ds in (train, val):
        missing = set(ds.rir_indices) - {it.class_id for it in ds.items}
        if missing:
            raise ConfigError(f"{ds.name} split lacks classes {sorted(missing)}")


def manifest_dict(train: Dataset, val: Dataset, config_hash: str | None = None) -> dict:
    sources = {**train.sources, **val.sources}

    def origin(source_id):
        u = sources[source_id]
        if u.path is not None:
            return {"path": u.path}
        return {"seed": list(u.seed), "duration": u.signal.duration}

    rows = []
    for ds in (train, val):
        for it in ds.items:
            rows.append(
                {
                    "split": ds.name,
                    "class_id": it.class_id,
                    "clip_rir_index": it.clip_rir_index,
                    "pair_rir_index": it.pair_rir_index,
                    "source_id": it.source_id,
                    "source": origin(it.source_id),
                }
            )
    return {
        "format": MANIFEST_FORMAT,
        "config_hash": config_hash,
        "rir_split": {ds.name: {str(k): v for k, v in ds.rir_indices.items()} for ds in (train, val)},
        "items": rows,
    }


def write_manifest(path: str | Path, train: Dataset, val: Dataset, config_hash: str | None = None) -> None:
    Path(path).write_text(json.dumps(manifest_dict(train, val, config_hash), indent=1, sort_keys=True) + "\n")


def read_manifest(
    path: str | Path,
    bank: Sequence[Rir],
    synth: SynthConfig = SynthConfig(),
) -> tuple[Dataset, Dataset, str | None]:
    """Rebuild both splits from a manifest plus the (canonicalised) RIR bank."""
    raw = json.loads(Path(path).read_text())
    if raw.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    bank = canonical_bank(bank)
    sources: dict[str, Utterance] = {}
    splits: dict[str, list[DatasetItem]] = {"train": [], "val": []}
    for row in raw["items"]:
        sid = row["source_id"]
        if sid not in sources:
            origin = row["source"]
            if "path" in origin:
                sources[sid] = load_wav(origin["path"], source_id=sid)
            else:
                pool_seed, k = origin["seed"]
                rng = item_rng(pool_seed, 0x5EED, k)
                sources[sid] = synth_utterance(rng, origin["duration"], synth, source_id=sid, seed=(pool_seed, k))
        splits[row["split"]].append(
            DatasetItem(row["class_id"], row["clip_rir_index"], row["pair_rir_index"], sid)
        )
    out = []
    for name in ("train", "val"):
        used = {it.source_id for it in splits[name]}
        rir_idx = {int(k): v for k, v in raw["rir_split"][name].items()}
        out.append(Dataset(name, splits[name], bank, {s: sources[s] for s in used}, rir_idx))
    check_leakage(*out)
    return out[0], out[1], raw.get("config_hash")
