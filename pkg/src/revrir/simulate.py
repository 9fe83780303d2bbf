"""Shoebox room impulse responses by the image-source method.

Each image contributes ``prod(beta**reflections) / (4 pi d)`` at delay
``d / c``, spread onto the sample grid with an 81-tap Hann-windowed sinc.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numba
import numpy as np

from .catalog import Catalog, RoomSpec
from .errors import FormatError, GeometryError, SamplingError, ValidationError

FD_TAPS = 81
FD_HALF = FD_TAPS // 2


@dataclass(frozen=True)
class AcousticConfig:
    speed_of_sound: float = 343.0
    sample_rate: float = 8000.0
    beta: float | tuple[float, ...] | None = None  # None: draw per RIR from beta_range
    beta_range: tuple[float, float] = (0.88, 0.9)
    rir_length: int = 4096
    min_wall_distance: float = 0.5
    min_src_mic_distance: float = 0.5
    max_image_order: int | str = "auto"
    max_tries: int = 10_000

    def __post_init__(self):
        if not self.sample_rate > 0 or not self.speed_of_sound > 0:
            raise ValidationError("sample_rate and speed_of_sound must be positive")
        if self.rir_length <= 0:
            raise ValidationError("rir_length must be positive")
        if self.min_wall_distance < 0 or self.min_src_mic_distance < 0:
            raise ValidationError("distances must be non-negative")
        lo, hi = self.beta_range
        if not 0 <= lo <= hi < 1:
            raise ValidationError(f"beta_range {self.beta_range} must lie in [0, 1)")
        if self.beta is not None:
            _facet_betas(self.beta)
        if self.max_image_order != "auto" and (
            not isinstance(self.max_image_order, int) or self.max_image_order < 0
        ):
            raise ValidationError("max_image_order must be 'auto' or a non-negative integer")


def _facet_betas(beta) -> tuple[float, ...]:
    b = np.broadcast_to(np.asarray(beta, dtype=np.float64), (6,))
    if np.any(b < 0) or np.any(b >= 1):
        raise ValidationError(f"reflection coefficients must lie in [0, 1), got {beta}")
    return tuple(float(v) for v in b)


@dataclass(frozen=True)
class Placement:
    source: tuple[float, float, float]
    microphone: tuple[float, float, float]

    @property
    def distance(self) -> float:
        return math.dist(self.source, self.microphone)

    def swapped(self) -> "Placement":
        return Placement(self.microphone, self.source)

    def as_array(self) -> np.ndarray:
        return np.array(self.source + self.microphone, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Rir:
    samples: np.ndarray
    sample_rate: float
    class_id: int
    placement: Placement
    beta: tuple[float, ...] = field(default=(0.0,) * 6)

    def __len__(self) -> int:
        return self.samples.shape[0]

    def sort_key(self) -> tuple:
        return (self.class_id, self.beta, self.placement.source, self.placement.microphone)


def sample_placement(room: RoomSpec, rng: np.random.Generator, config: AcousticConfig = AcousticConfig()) -> Placement:
    """Draw source and microphone uniformly from the admissible region.

    Both points are drawn from the box shrunk by ``min_wall_distance`` and
    the pair is rejected until their separation is large enough.
    """
    dims = np.array(room.dims)
    margin = config.min_wall_distance
    span = dims - 2 * margin
    if np.any(span < 0) or (np.any(span <= 0) and margin > 0):
        raise GeometryError(f"{room.name}: no interior point is {margin} m from every wall")
    if float(np.linalg.norm(span)) < config.min_src_mic_distance:
        raise GeometryError(
            f"{room.name}: largest feasible separation {np.linalg.norm(span):.3f} m "
            f"is below {config.min_src_mic_distance} m"
        )
    for _ in range(config.max_tries):
        src = margin + span * rng.random(3)
        mic = margin + span * rng.random(3)
        if np.linalg.norm(src - mic) >= config.min_src_mic_distance:
            return Placement(tuple(float(v) for v in src), tuple(float(v) for v in mic))
    raise SamplingError(f"{room.name}: no valid placement after {config.max_tries} draws")


def fractional_delay_taps(delay: float) -> tuple[int, np.ndarray]:
    """Kernel for an arrival at fractional sample ``delay``.

    Returns the index of the first tap and the 81 tap values
    ``hann(k - frac) * sinc(k - frac)`` for ``k = -40..40`` around ``floor(delay)``.
    """
    base = math.floor(delay)
    x = np.arange(-FD_HALF, FD_HALF + 1) - (delay - base)
    window = 0.5 * (1.0 + np.cos(np.pi * x / (FD_HALF + 1)))
    return base - FD_HALF, window * np.sinc(x)


_K = np.arange(-FD_HALF, FD_HALF + 1)
# sin(pi (k - frac)) = -(-1)**k sin(pi frac); folded into the window tables
_SIGN = np.where(_K % 2 == 0, -1.0, 1.0)
_COS_K = _SIGN * np.cos(np.pi * _K / (FD_HALF + 1))
_SIN_K = _SIGN * np.sin(np.pi * _K / (FD_HALF + 1))
_K_FLOAT = _K.astype(np.float64)


@numba.njit(cache=True)
def _powers(beta, count):  # pragma: no cover - jitted
    out = np.empty(count)
    acc = 1.0
    for i in range(count):
        out[i] = acc
        acc *= beta
    return out


@numba.njit(cache=True, fastmath=True)
def _image_sum(out, src, mic, dims, betas, fs, c, max_order, sign, cos_k, sin_k, k_float):  # pragma: no cover - jitted
    n_len = out.shape[0]
    half = (sign.shape[0] - 1) // 2
    width = half + 1.0
    max_dist = (n_len + half + 1) * c / fs
    n_max = np.empty(3, np.int64)
    for a in range(3):
        n_max[a] = int(math.ceil(max_dist / (2.0 * dims[a]))) + 1
    top = 2 * max(n_max[0], max(n_max[1], n_max[2])) + 2
    pw = np.empty((6, top))
    for f in range(6):
        pw[f] = _powers(betas[f], top)
    for nx in range(-n_max[0], n_max[0] + 1):
        for qx in range(2):
            dx = (1 - 2 * qx) * src[0] + 2 * nx * dims[0] - mic[0]
            ox = abs(nx - qx) + abs(nx)
            if max_order >= 0 and ox > max_order:
                continue
            ax = pw[0, abs(nx - qx)] * pw[1, abs(nx)]
            for ny in range(-n_max[1], n_max[1] + 1):
                for qy in range(2):
                    dy = (1 - 2 * qy) * src[1] + 2 * ny * dims[1] - mic[1]
                    oy = abs(ny - qy) + abs(ny)
                    if max_order >= 0 and ox + oy > max_order:
                        continue
                    dxy2 = dx * dx + dy * dy
                    if dxy2 > max_dist * max_dist:
                        continue
                    axy = ax * pw[2, abs(ny - qy)] * pw[3, abs(ny)]
                    for nz in range(-n_max[2], n_max[2] + 1):
                        for qz in range(2):
                            oz = abs(nz - qz) + abs(nz)
                            if max_order >= 0 and ox + oy + oz > max_order:
                                continue
                            dz = (1 - 2 * qz) * src[2] + 2 * nz * dims[2] - mic[2]
                            d = math.sqrt(dxy2 + dz * dz)
                            t = d * fs / c
                            base = int(math.floor(t))
                            if base - half >= n_len:
                                continue
                            amp = axy * pw[4, abs(nz - qz)] * pw[5, abs(nz)] / (4.0 * math.pi * d)
                            if amp == 0.0:
                                continue
                            frac = t - base
                            if frac == 0.0:
                                # on-grid arrival: sinc vanishes at every other tap
                                if base < n_len:
                                    out[base] += amp
                                continue
                            # hann(x) * sinc(x) at x = k - frac with the window cosine
                            # expanded so only per-tap tables remain
                            scale = 0.5 * amp * math.sin(math.pi * frac) / math.pi
                            cf = math.cos(math.pi * frac / width)
                            sf = math.sin(math.pi * frac / width)
                            if base - half >= 0 and base + half < n_len:
                                # fixed trip count over contiguous memory: the common case
                                seg = out[base - half : base + half + 1]
                                for j in range(seg.shape[0]):
                                    seg[j] += scale * (sign[j] + cos_k[j] * cf + sin_k[j] * sf) / (k_float[j] - frac)
                                continue
                            lo = -half if base - half >= 0 else -base
                            hi = half if base + half < n_len else n_len - 1 - base
                            for k in range(lo, hi + 1):
                                j = k + half
                                out[base + k] += scale * (sign[j] + cos_k[j] * cf + sin_k[j] * sf) / (k_float[j] - frac)


def _check_inside(room: RoomSpec, placement: Placement) -> None:
    dims = room.dims
    for label, p in (("source", placement.source), ("microphone", placement.microphone)):
        if not all(0.0 < p[a] < dims[a] for a in range(3)):
            raise GeometryError(f"{label} {p} is not strictly inside {room.name}")
    if placement.distance <= 0.0:
        raise GeometryError("source and microphone coincide")


def generate_rir(
    room: RoomSpec,
    placement: Placement,
    config: AcousticConfig = AcousticConfig(),
    beta=None,
) -> Rir:
    """Image-source RIR for one placement.

    ``beta`` overrides ``config.beta``; one of them must be set (bank
    generation draws it per RIR).
    """
    beta = config.beta if beta is None else beta
    if beta is None:
        raise ValidationError("no reflection coefficient given; set config.beta or pass beta")
    betas = _facet_betas(beta)
    _check_inside(room, placement)
    direct = config.sample_rate * placement.distance / config.speed_of_sound
    if round(direct) >= config.rir_length:
        raise ValidationError(
            f"rir_length {config.rir_length} cannot hold the direct path at sample {direct:.1f}"
        )
    order = -1 if config.max_image_order == "auto" else int(config.max_image_order)
    out = np.zeros(config.rir_length)
    _image_sum(
        out,
        np.array(placement.source, dtype=np.float64),
        np.array(placement.microphone, dtype=np.float64),
        np.array(room.dims, dtype=np.float64),
        np.array(betas),
        float(config.sample_rate),
        float(config.speed_of_sound),
        order,
        _SIGN,
        _COS_K,
        _SIN_K,
        _K_FLOAT,
    )
    return Rir(out, config.sample_rate, room.class_id, placement, betas)


def item_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent stream for one work item, identical in serial and parallel runs."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


def _bank_item(args) -> Rir:
    room, index, seed, config = args
    rng = item_rng(seed, room.class_id, index)
    beta = config.beta if config.beta is not None else float(rng.uniform(*config.beta_range))
    try:
        placement = sample_placement(room, rng, config)
        return generate_rir(room, placement, config, beta=beta)
    except (GeometryError, SamplingError) as exc:
        raise type(exc)(f"class {room.class_id} item {index}: {exc}") from exc


def generate_rir_bank(
    catalog: Catalog,
    per_class_count: int,
    seed: int,
    config: AcousticConfig = AcousticConfig(),
    jobs: int = 1,
) -> list[Rir]:
    """``per_class_count`` RIRs per class, class-major order.

    Every item has its own seed derived from ``(seed, class_id, index)`` so
    ``jobs > 1`` yields exactly the serial bank.
    """
    if per_class_count < 1:
        raise ValidationError("per_class_count must be at least 1")
    work = [(room, i, seed, config) for room in catalog.rooms for i in range(per_class_count)]
    if jobs <= 1:
        return [_bank_item(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_bank_item, work, chunksize=8))


# --- bank file -----------------------------------------------------------

BANK_MAGIC = b"RVRB"
BANK_VERSION = 1
_BANK_HEADER = struct.Struct("<4sIdIQ32s")
_RECORD_HEAD = struct.Struct("<i6dd")


def _hash_bytes(config_hash: str | None) -> bytes:
    return bytes.fromhex(config_hash) if config_hash else bytes(32)


def write_bank(path: str | Path, bank: Sequence[Rir], config_hash: str | None = None) -> None:
    if not bank:
        raise ValidationError("refusing to write an empty bank")
    rate = bank[0].sample_rate
    length = len(bank[0])
    with open(path, "wb") as fh:
        fh.write(_BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, rate, length, len(bank), _hash_bytes(config_hash)))
        for rir in bank:
            if len(rir) != length or rir.sample_rate != rate:
                raise ValidationError("bank mixes RIR lengths or sample rates")
            if len(set(rir.beta)) != 1:
                raise ValidationError("bank format stores one reflection coefficient per RIR")
            fh.write(_RECORD_HEAD.pack(rir.class_id, *rir.placement.source, *rir.placement.microphone, rir.beta[0]))
            fh.write(np.asarray(rir.samples, dtype="<f4").tobytes())


def read_bank_header(fh: BinaryIO) -> tuple[float, int, int, str | None]:
    raw = fh.read(_BANK_HEADER.size)
    if len(raw) != _BANK_HEADER.size:
        raise FormatError("truncated bank header")
    magic, version, rate, length, count, digest = _BANK_HEADER.unpack(raw)
    if magic != BANK_MAGIC:
        raise FormatError(f"bad bank magic {magic!r}")
    if version != BANK_VERSION:
        raise FormatError(f"unsupported bank version {version}")
    return rate, length, count, (digest.hex() if any(digest) else None)


def read_bank(path: str | Path) -> tuple[list[Rir], str | None]:
    with open(path, "rb") as fh:
        rate, length, count, config_hash = read_bank_header(fh)
        bank = []
        for i in range(count):
            head = fh.read(_RECORD_HEAD.size)
            body = fh.read(4 * length)
            if len(head) != _RECORD_HEAD.size or len(body) != 4 * length:
                raise FormatError(f"bank truncated at record {i}")
            class_id, *xyz, beta = _RECORD_HEAD.unpack(head)
            samples = np.frombuffer(body, dtype="<f4").astype(np.float64)
            placement = Placement(tuple(xyz[:3]), tuple(xyz[3:]))
            bank.append(Rir(samples, rate, class_id, placement, (beta,) * 6))
        if fh.read(1):
            raise FormatError("trailing bytes after last bank record")
    return bank, config_hash


def quantize_bank(bank: Iterable[Rir]) -> list[Rir]:
    """Round samples through float32, matching what :func:`read_bank` returns."""
    return [
        Rir(r.samples.astype(np.float32).astype(np.float64), r.sample_rate, r.class_id, r.placement, r.beta)
        for r in bank
    ]
