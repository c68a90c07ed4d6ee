"""Per-weight timing and switching-energy profile of the MAC unit.

For every signed 8-bit weight value the MAC netlist is simulated over a set
of activation transitions with the accumulator input pinned. The worst
output settling time bounds the clock period at which that weight can be
used, and the mean toggle count stands in for dynamic energy.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ProfileError
from .netlist import GateNetlist, build_default_mac_netlist
from .timing import simulate_transitions

PROFILE_SCHEMA = "halo-profile-v1"
DEFAULT_ACC_PATTERN = 0x55555555
WEIGHT_VALUES = np.arange(-128, 128)


@dataclass(frozen=True)
class Exhaustive:
    """All 256 x 256 ordered activation pairs (a_prev -> a_next)."""

    def pairs(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        return np.repeat(WEIGHT_VALUES, 256), np.tile(WEIGHT_VALUES, 256)


@dataclass(frozen=True)
class RandomSamples:
    """``n`` uniformly drawn activation pairs, reproducible from ``seed``.

    The same pairs are used for every weight value.
    """

    n: int
    seed: int = 0

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError(f"RandomSamples needs n > 0, got {self.n}")

    def pairs(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        ab = rng.integers(-128, 128, size=(2, self.n))
        return ab[0], ab[1]


Sampling = Exhaustive | RandomSamples


@dataclass
class WeightProfile:
    """Worst-case delay and mean switching energy for each int8 weight value.

    Arrays are indexed by ``v + 128``.
    """

    delay_ps: np.ndarray
    energy: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.delay_ps = np.asarray(self.delay_ps, dtype=np.int64)
        self.energy = np.asarray(self.energy, dtype=np.float64)
        if self.delay_ps.shape != (256,) or self.energy.shape != (256,):
            raise ProfileError("incomplete profile: need 256 entries")
        if (self.delay_ps <= 0).any():
            raise ProfileError("profile delays must be positive")
        if not np.isfinite(self.energy).all() or (self.energy < 0).any():
            raise ProfileError("profile energies must be finite and nonnegative")

    @property
    def max_freq_ghz(self) -> np.ndarray:
        return 1000.0 / self.delay_ps

    def worst_delay(self, v: int) -> int:
        return int(self.delay_ps[_index(v)])

    def max_freq(self, v: int) -> float:
        return 1000.0 / self.worst_delay(v)

    def switch_energy(self, v: int) -> float:
        return float(self.energy[_index(v)])

    @property
    def global_worst_delay(self) -> int:
        return int(self.delay_ps.max())

    def to_json(self) -> dict:
        doc = {
            "schema": PROFILE_SCHEMA,
            "entries": [
                {"value": int(v), "delay_ps": int(d), "energy": float(e)}
                for v, d, e in zip(WEIGHT_VALUES, self.delay_ps, self.energy)
            ],
        }
        if self.meta:
            doc["meta"] = self.meta
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "WeightProfile":
        if not isinstance(doc, dict) or doc.get("schema") != PROFILE_SCHEMA:
            raise ProfileError(f"not a {PROFILE_SCHEMA} document")
        entries = doc.get("entries")
        if not isinstance(entries, list):
            raise ProfileError("profile has no entry list")
        delay = np.zeros(256, dtype=np.int64)
        energy = np.zeros(256)
        seen = set()
        for e in entries:
            try:
                v, d, en = int(e["value"]), e["delay_ps"], float(e["energy"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ProfileError(f"malformed profile entry {e!r}") from exc
            if not -128 <= v <= 127 or v in seen:
                raise ProfileError(f"bad or duplicate weight value {v}")
            if not isinstance(d, int) or isinstance(d, bool) or d <= 0:
                raise ProfileError(f"delay for {v} must be a positive integer, got {d!r}")
            seen.add(v)
            delay[v + 128] = d
            energy[v + 128] = en
        if len(seen) != 256:
            raise ProfileError(f"incomplete profile: {len(seen)} of 256 entries")
        return cls(delay, energy, dict(doc.get("meta", {})))

    def digest(self) -> str:
        """Content hash of delays and energies (metadata excluded)."""
        h = hashlib.sha256()
        h.update(self.delay_ps.astype("<i8").tobytes())
        h.update(self.energy.astype("<f8").tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, WeightProfile):
            return NotImplemented
        return (np.array_equal(self.delay_ps, other.delay_ps)
                and np.array_equal(self.energy, other.energy))


def _index(v: int) -> int:
    if not -128 <= v <= 127:
        raise ValueError(f"weight value {v} outside int8 range")
    return int(v) + 128


def _run(netlist: GateNetlist, v: int, sampling: Sampling, acc: int):
    prev, nxt = sampling.pairs(v)
    batch = simulate_transitions(netlist, v, prev, nxt, acc)
    # a weight whose outputs never move still needs one gate delay of slack
    floor = min(g.delay for g in netlist.gates)
    return max(batch.worst_delay, floor), batch.toggle_energy / batch.n


def worst_delay_for_weight(netlist: GateNetlist, v: int, sampling: Sampling = Exhaustive(),
                           acc: int = DEFAULT_ACC_PATTERN) -> int:
    """Maximum output settling time (ps) over the sampled activation transitions."""
    return _run(netlist, _index(v) - 128, sampling, acc)[0]


def switching_energy_for_weight(netlist: GateNetlist, v: int, sampling: Sampling = Exhaustive(),
                                acc: int = DEFAULT_ACC_PATTERN) -> float:
    """Mean energy-weighted toggle count per MAC operation."""
    return _run(netlist, _index(v) - 128, sampling, acc)[1]


def _run_star(args):
    return _run(*args)


def characterize(netlist: GateNetlist | None = None, sampling: Sampling = Exhaustive(),
                 acc: int = DEFAULT_ACC_PATTERN, workers: int = 1) -> WeightProfile:
    """Simulate every weight value and collect a :class:`WeightProfile`.

    Delays are in the netlist's own picosecond units; see
    :func:`calibrate_profile` for mapping onto a target clock table.
    """
    netlist = netlist or build_default_mac_netlist()
    jobs = [(netlist, int(v), sampling, acc) for v in WEIGHT_VALUES]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_star, jobs, chunksize=8))
    else:
        results = [_run_star(j) for j in jobs]
    delay = [r[0] for r in results]
    energy = [r[1] for r in results]
    meta = {"acc_pattern": acc, "sampling": _describe(sampling), "delay_scale": 1.0}
    return WeightProfile(delay, energy, meta)


def _describe(sampling: Sampling) -> dict:
    if isinstance(sampling, RandomSamples):
        return {"kind": "random", "n": sampling.n, "seed": sampling.seed}
    return {"kind": "exhaustive"}


def scale_profile(profile: WeightProfile, factor: float) -> WeightProfile:
    """Multiply every delay by ``factor`` (floored to whole picoseconds)."""
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    delay = np.maximum(np.floor(profile.delay_ps * factor + 1e-9).astype(np.int64), 1)
    meta = dict(profile.meta)
    meta["delay_scale"] = meta.get("delay_scale", 1.0) * factor
    return WeightProfile(delay, profile.energy.copy(), meta)


def fastest_values(profile: WeightProfile, count: int) -> list[int]:
    """The ``count`` weight values with the highest achievable frequency.

    Ties go to the smaller magnitude, then to the positive value.
    """
    order = sorted(WEIGHT_VALUES.tolist(),
                   key=lambda v: (profile.delay_ps[v + 128], abs(v), v < 0))
    return order[:count]


def calibrate_profile(profile: WeightProfile, count: int = 9, freq_ghz: float = 3.7) -> WeightProfile:
    """Rescale delays so the ``count`` fastest values just meet ``freq_ghz``.

    The gate model's picosecond scale is arbitrary; this pins the fast
    class to the top level of the clock table while preserving every
    relative delay.
    """
    anchor = max(profile.worst_delay(v) for v in fastest_values(profile, count))
    return scale_profile(profile, (1000.0 / freq_ghz) / anchor)


def save_profile(profile: WeightProfile, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(profile.to_json(), indent=1) + "\n")


def load_profile(path: str | os.PathLike) -> WeightProfile:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{path}: malformed profile JSON ({exc})") from exc
    try:
        return WeightProfile.from_json(doc)
    except ProfileError as exc:
        raise ProfileError(f"{path}: {exc}") from exc


def default_profile() -> WeightProfile:
    """The calibrated exhaustive profile of the default netlist, shipped as data."""
    return load_profile(Path(__file__).with_name("data") / "default_profile.json")
