"""Room-class universe: shoebox geometries enumerated from per-type grids.

Dimensions are held as integer millimetres so that grid membership and
catalog equality are exact.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import FormatError, LookupFailure, ValidationError

CATALOG_MAGIC = "# revrir-catalog v1"
_TOL = 1e-9


class RoomType(str, enum.Enum):
    SMALL = "Small"
    LARGE = "Large"
    HALL = "Hall"


ROOM_TYPES = (RoomType.SMALL, RoomType.LARGE, RoomType.HALL)


def to_mm(meters: float) -> int:
    mm = round(meters * 1000.0)
    if abs(mm - meters * 1000.0) > 1e-6:
        raise ValidationError(f"{meters!r} m is not representable at millimetre resolution")
    return int(mm)


@dataclass(frozen=True)
class DimensionRange:
    """Inclusive ``[min, max, hop]`` grid along one axis, in metres."""

    min: float
    max: float
    hop: float

    def __post_init__(self):
        if not self.hop > 0:
            raise ValidationError(f"hop must be positive, got {self.hop}")
        if self.min > self.max:
            raise ValidationError(f"min {self.min} exceeds max {self.max}")
        if self.min <= 0:
            raise ValidationError(f"room dimensions must be positive, got min {self.min}")
        steps = (self.max - self.min) / self.hop
        if abs(steps - round(steps)) > _TOL * max(1.0, abs(steps)):
            raise ValidationError(
                f"range [{self.min}, {self.max}] is not a whole number of {self.hop} hops"
            )

    @classmethod
    def single(cls, value: float) -> "DimensionRange":
        return cls(value, value, 1.0)

    def as_list(self) -> list[float]:
        return [self.min, self.max, self.hop]


def expand_range(r: DimensionRange) -> list[float]:
    """Return ``min, min + hop, ..., max`` (inclusive, ascending)."""
    lo, hi, hop = to_mm(r.min), to_mm(r.max), to_mm(r.hop)
    if hop <= 0:
        raise ValidationError("hop rounds to zero millimetres")
    if (hi - lo) % hop:
        raise ValidationError(f"range {r.as_list()} is not aligned to its hop")
    return [mm / 1000.0 for mm in range(lo, hi + 1, hop)]


@dataclass(frozen=True)
class TypeRanges:
    width: DimensionRange
    depth: DimensionRange
    height: DimensionRange

    def axes(self) -> tuple[DimensionRange, DimensionRange, DimensionRange]:
        return (self.width, self.depth, self.height)


@dataclass(frozen=True, order=True)
class RoomSpec:
    class_id: int
    room_type: RoomType
    width_mm: int
    depth_mm: int
    height_mm: int

    def __post_init__(self):
        if self.class_id < 0:
            raise ValidationError("class_id must be non-negative")
        if min(self.width_mm, self.depth_mm, self.height_mm) <= 0:
            raise ValidationError("room dimensions must be positive")

    @property
    def width(self) -> float:
        return self.width_mm / 1000.0

    @property
    def depth(self) -> float:
        return self.depth_mm / 1000.0

    @property
    def height(self) -> float:
        return self.height_mm / 1000.0

    @property
    def dims(self) -> tuple[float, float, float]:
        return (self.width, self.depth, self.height)

    @property
    def volume(self) -> float:
        return self.width * self.depth * self.height

    @property
    def key(self) -> tuple[str, int, int, int]:
        return (self.room_type.value, self.width_mm, self.depth_mm, self.height_mm)

    @property
    def name(self) -> str:
        return f"{self.room_type.value}-{self.width:g}x{self.depth:g}x{self.height:g}"


@dataclass(frozen=True)
class Catalog:
    rooms: tuple[RoomSpec, ...]
    type_ranges: Mapping[RoomType, TypeRanges] = field(default_factory=dict, hash=False)

    def __post_init__(self):
        ids = [r.class_id for r in self.rooms]
        if ids != list(range(len(ids))):
            raise ValidationError("class ids must be consecutive from 0")
        keys = [r.key for r in self.rooms]
        if len(set(keys)) != len(keys):
            raise ValidationError("duplicate room geometry in catalog")

    def __len__(self) -> int:
        return len(self.rooms)

    def __iter__(self):
        return iter(self.rooms)

    def __getitem__(self, class_id: int) -> RoomSpec:
        if not 0 <= class_id < len(self.rooms):
            raise LookupFailure(f"class id {class_id} outside [0, {len(self.rooms)})")
        return self.rooms[class_id]

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.rooms]

    def type_counts(self) -> dict[RoomType, int]:
        counts = {t: 0 for t in ROOM_TYPES}
        for r in self.rooms:
            counts[r.room_type] += 1
        return counts


def enumerate_rooms(
    ranges: Mapping[RoomType, TypeRanges],
    exclude: Iterable[tuple[str, float, float, float]] = (),
) -> Catalog:
    """Cartesian product of each type's grid, concatenated Small, Large, Hall.

    ``exclude`` removes explicit ``(type, width, depth, height)`` points
    before class ids are assigned. Every excluded point must lie on its
    type's grid.
    """
    excluded = {(RoomType(t).value, to_mm(w), to_mm(d), to_mm(h)) for t, w, d, h in exclude}
    rooms: list[RoomSpec] = []
    seen: set[tuple[str, int, int, int]] = set()
    for rtype in ROOM_TYPES:
        if rtype not in ranges:
            continue
        axes = [expand_range(a) for a in ranges[rtype].axes()]
        if not all(axes):
            raise ValidationError(f"{rtype.value} grid expands to nothing")
        for w, d, h in itertools.product(*axes):
            key = (rtype.value, to_mm(w), to_mm(d), to_mm(h))
            seen.add(key)
            if key in excluded:
                continue
            rooms.append(RoomSpec(len(rooms), rtype, *key[1:]))
    stray = excluded - seen
    if stray:
        raise ValidationError(f"excluded rooms not on any grid: {sorted(stray)}")
    if not rooms:
        raise ValidationError("catalog is empty")
    return Catalog(tuple(rooms), dict(ranges))


def room_type_of(catalog: Catalog, class_id: int) -> RoomType:
    return catalog[class_id].room_type


def _r(lo, hi, hop) -> DimensionRange:
    return DimensionRange(lo, hi, hop)


# Published room grids (naive product: 18 / 64 / 42 rooms).
PAPER_RANGES = {
    RoomType.SMALL: TypeRanges(_r(1.5, 3.5, 1.0), _r(2.5, 4.5, 1.0), _r(2.5, 3.0, 0.5)),
    RoomType.LARGE: TypeRanges(_r(6.0, 13.0, 1.0), _r(6.0, 12.0, 2.0), _r(2.5, 3.5, 1.0)),
    RoomType.HALL: TypeRanges(_r(1.0, 3.0, 1.0), _r(7.0, 13.0, 1.0), _r(2.5, 3.5, 1.0)),
}

# Illustrative exclusion list that brings the full grid down to 16 / 52 / 42.
# The published counts come without a rule; this list drops the most
# elongated floor plans (ties broken by enumeration order) and is a local
# choice, not a reproduction.
PAPER110_EXCLUDE = tuple(
    [("Small", 1.5, 4.5, h) for h in (2.5, 3.0)]
    + [
        ("Large", w, d, h)
        for (w, d) in ((13.0, 6.0), (12.0, 6.0), (6.0, 12.0), (11.0, 6.0), (7.0, 12.0), (6.0, 10.0))
        for h in (2.5, 3.5)
    ]
)

# Two rooms per type, one axis varied per type.
DESK_RANGES = {
    RoomType.SMALL: TypeRanges(_r(2.5, 2.5, 1.0), _r(2.5, 4.5, 2.0), _r(3.0, 3.0, 0.5)),
    RoomType.LARGE: TypeRanges(_r(6.0, 12.0, 6.0), _r(8.0, 8.0, 2.0), _r(3.5, 3.5, 1.0)),
    RoomType.HALL: TypeRanges(_r(2.0, 2.0, 1.0), _r(7.0, 13.0, 6.0), _r(3.0, 3.0, 1.0)),
}


def ranges_from_dict(raw: Mapping[str, Mapping[str, Sequence[float]]]) -> dict[RoomType, TypeRanges]:
    out = {}
    for tname, axes in raw.items():
        out[RoomType(tname)] = TypeRanges(*(DimensionRange(*axes[a]) for a in ("width", "depth", "height")))
    return out


def ranges_to_dict(ranges: Mapping[RoomType, TypeRanges]) -> dict[str, dict[str, list[float]]]:
    return {
        t.value: {"width": tr.width.as_list(), "depth": tr.depth.as_list(), "height": tr.height.as_list()}
        for t, tr in ranges.items()
    }


def format_catalog(catalog: Catalog, config_hash: str | None = None) -> str:
    lines = [CATALOG_MAGIC]
    if config_hash:
        lines.append(f"# config-hash {config_hash}")
    for rtype, tr in catalog.type_ranges.items():
        vals = " ".join(f"{v:.3f}" for a in tr.axes() for v in a.as_list())
        lines.append(f"# range {rtype.value} {vals}")
    lines.append("# class_id type width_m depth_m height_m")
    for r in catalog.rooms:
        lines.append(f"{r.class_id} {r.room_type.value} {r.width:.3f} {r.depth:.3f} {r.height:.3f}")
    return "\n".join(lines) + "\n"


def parse_catalog(text: str) -> tuple[Catalog, str | None]:
    """Inverse of :func:`format_catalog`; returns the catalog and its config hash."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != CATALOG_MAGIC:
        raise FormatError(f"catalog header must be {CATALOG_MAGIC!r}")
    config_hash = None
    ranges: dict[RoomType, TypeRanges] = {}
    rooms = []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if line.startswith("# config-hash"):
            config_hash = parts[2]
        elif line.startswith("# range"):
            v = [float(x) for x in parts[3:]]
            if len(v) != 9:
                raise FormatError(f"line {lineno}: range record needs 9 numbers")
            ranges[RoomType(parts[2])] = TypeRanges(
                DimensionRange(*v[0:3]), DimensionRange(*v[3:6]), DimensionRange(*v[6:9])
            )
        elif line.startswith("#"):
            continue
        else:
            if len(parts) != 5:
                raise FormatError(f"line {lineno}: expected 5 fields, got {len(parts)}")
            try:
                rooms.append(
                    RoomSpec(int(parts[0]), RoomType(parts[1]), *(to_mm(float(x)) for x in parts[2:]))
                )
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from exc
    return Catalog(tuple(rooms), ranges), config_hash


def save_catalog(catalog: Catalog, path: str | Path, config_hash: str | None = None) -> None:
    Path(path).write_text(format_catalog(catalog, config_hash))


def load_catalog(path: str | Path) -> tuple[Catalog, str | None]:
    return parse_catalog(Path(path).read_text())
