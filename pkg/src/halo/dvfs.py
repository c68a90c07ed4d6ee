"""Voltage/frequency level selection and class-grouped DVFS schedules."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .errors import NoFeasibleLevelError, ScheduleError
from .mac import WeightProfile

DEFAULT_TRANSITION_S = 1e-6


@dataclass(frozen=True, order=True)
class DvfsLevel:
    freq_ghz: float
    voltage_v: float

    def __post_init__(self):
        if self.freq_ghz <= 0 or self.voltage_v <= 0:
            raise ValueError("DVFS levels need positive voltage and frequency")

    @property
    def period_ps(self) -> float:
        return 1000.0 / self.freq_ghz

    def feasible(self, critical_path_ps: float) -> bool:
        return self.period_ps >= critical_path_ps

    def to_json(self) -> dict:
        return {"v": self.voltage_v, "f_ghz": self.freq_ghz}

    @classmethod
    def from_json(cls, d: Mapping) -> "DvfsLevel":
        return cls(freq_ghz=float(d["f_ghz"]), voltage_v=float(d["v"]))


LEVEL_TABLES: dict[str, tuple[DvfsLevel, ...]] = {
    "tpu": (DvfsLevel(1.9, 1.0), DvfsLevel(2.4, 1.1), DvfsLevel(3.7, 1.2)),
    "gpu": (DvfsLevel(1.5, 0.9), DvfsLevel(2.0, 1.0), DvfsLevel(2.8, 1.1)),
}


def check_table(levels: Sequence[DvfsLevel]) -> tuple[DvfsLevel, ...]:
    levels = tuple(levels)
    if not levels:
        raise ValueError("empty DVFS level table")
    for lo, hi in zip(levels, levels[1:]):
        if not (lo.freq_ghz < hi.freq_ghz and lo.voltage_v <= hi.voltage_v):
            raise ValueError("levels must be sorted by frequency with nondecreasing voltage")
    return levels


def load_levels(path: str | os.PathLike) -> tuple[str, tuple[DvfsLevel, ...]]:
    doc = json.loads(Path(path).read_text())
    levels = sorted(DvfsLevel.from_json(d) for d in doc["levels"])
    return str(doc.get("target", "custom")), check_table(levels)


def save_levels(target: str, levels: Sequence[DvfsLevel], path: str | os.PathLike) -> None:
    doc = {"target": target, "levels": [lv.to_json() for lv in levels]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def cv2_energy(level: DvfsLevel) -> float:
    """Dynamic energy per unit of work, proportional to V**2."""
    return level.voltage_v ** 2


class LevelMode(str, Enum):
    MIN_ENERGY = "min_energy"
    MAX_FREQ = "max_freq"


def select_level(levels: Iterable[DvfsLevel], critical_path_ps: float,
                 energy_model: Callable[[DvfsLevel], float] = cv2_energy) -> DvfsLevel:
    """Cheapest level whose clock period covers the critical path.

    Ties on energy go to the lower voltage, then the lower frequency.
    """
    feasible = [lv for lv in levels if lv.feasible(critical_path_ps)]
    if not feasible:
        raise NoFeasibleLevelError(f"critical path {critical_path_ps} ps exceeds every level's period")
    return min(feasible, key=lambda lv: (energy_model(lv), lv.voltage_v, lv.freq_ghz))


def max_freq_level(levels: Iterable[DvfsLevel], critical_path_ps: float) -> DvfsLevel:
    feasible = [lv for lv in levels if lv.feasible(critical_path_ps)]
    if not feasible:
        raise NoFeasibleLevelError(f"critical path {critical_path_ps} ps exceeds every level's period")
    return max(feasible, key=lambda lv: (lv.freq_ghz, -lv.voltage_v))


def class_critical_path(codebook: Iterable[int], profile: WeightProfile) -> int:
    return max(profile.worst_delay(v) for v in codebook)


def level_for_class(levels: Sequence[DvfsLevel], codebook: Iterable[int], profile: WeightProfile,
                    mode: LevelMode | str = LevelMode.MAX_FREQ,
                    energy_model: Callable[[DvfsLevel], float] = cv2_energy) -> DvfsLevel:
    """Level for a frequency class, bounded by its slowest codebook value."""
    cp = class_critical_path(codebook, profile)
    if LevelMode(mode) is LevelMode.MAX_FREQ:
        return max_freq_level(levels, cp)
    return select_level(levels, cp, energy_model)


@dataclass
class ScheduleGroup:
    level: DvfsLevel
    class_ids: tuple[int, ...]
    tile_ids: list[int]
    includes_overlay: bool = False

    def to_json(self) -> dict:
        return {"level": self.level.to_json(), "class_ids": list(self.class_ids),
                "tile_ids": self.tile_ids, "includes_overlay": self.includes_overlay}


@dataclass
class DvfsSchedule:
    groups: list[ScheduleGroup]
    transition_time_s: float = DEFAULT_TRANSITION_S
    class_levels: dict[int, DvfsLevel] = field(default_factory=dict)

    @property
    def transition_count(self) -> int:
        return len(self.groups)

    @property
    def transition_overhead_s(self) -> float:
        return self.transition_count * self.transition_time_s

    def tile_order(self) -> list[int]:
        return [t for g in self.groups for t in g.tile_ids]

    def to_json(self) -> dict:
        return {
            "schema": "halo-schedule-v1",
            "transition_time_s": self.transition_time_s,
            "transition_count": self.transition_count,
            "transition_overhead_s": self.transition_overhead_s,
            "class_levels": {str(k): v.to_json() for k, v in sorted(self.class_levels.items())},
            "groups": [g.to_json() for g in self.groups],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "DvfsSchedule":
        groups = [ScheduleGroup(DvfsLevel.from_json(g["level"]), tuple(g["class_ids"]),
                                [int(t) for t in g["tile_ids"]], bool(g.get("includes_overlay", False)))
                  for g in doc["groups"]]
        class_levels = {int(k): DvfsLevel.from_json(v) for k, v in doc.get("class_levels", {}).items()}
        return cls(groups, float(doc["transition_time_s"]), class_levels)


def build_schedule(tile_classes: Sequence[int], class_levels: Mapping[int, DvfsLevel],
                   transition_time_s: float = DEFAULT_TRANSITION_S,
                   overlay_class: int | None = None) -> DvfsSchedule:
    """Group tiles by DVFS level so each level is entered exactly once.

    Groups run fastest level first; tiles keep their original order inside a
    group. ``overlay_class`` adds the sparse overlay as a member of the group
    for that class's level.
    """
    by_level: dict[DvfsLevel, ScheduleGroup] = {}

    def group_for(cid: int) -> ScheduleGroup:
        try:
            level = class_levels[cid]
        except KeyError:
            raise ScheduleError(f"class {cid} has no DVFS level") from None
        g = by_level.setdefault(level, ScheduleGroup(level, (), []))
        if cid not in g.class_ids:
            g.class_ids = tuple(sorted(g.class_ids + (cid,)))
        return g

    for t, cid in enumerate(tile_classes):
        group_for(int(cid)).tile_ids.append(t)
    if overlay_class is not None:
        group_for(overlay_class).includes_overlay = True
    groups = sorted(by_level.values(), key=lambda g: (-g.level.freq_ghz, g.level.voltage_v))
    used = {c for g in groups for c in g.class_ids}
    return DvfsSchedule(groups, transition_time_s, {c: class_levels[c] for c in used})
