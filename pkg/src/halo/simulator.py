"""Analytical weight-stationary systolic array and SpMV engine model.

Time is closed-form: each tile costs a weight load, an activation stream and
a pipeline fill/drain, clocked at its group's DVFS level. Energy splits into
static (power x time), core dynamic (profile toggle energy per MAC scaled by
(V / V_ref)**2), on-chip buffer traffic and DRAM traffic.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dvfs import DvfsLevel, DvfsSchedule, build_schedule, max_freq_level
from .errors import ScheduleError, TimingViolationError
from .mac import WeightProfile
from .quantizer import OVERLAY_CLASS, FrequencyClass, QuantizedModel, SparseOverlay, tile_scale
from .sensitivity import pad_to_tiles, to_tiles

UNIFORM_CLASS = 3
ACT_BYTES = 1
PSUM_BYTES = 4


@dataclass
class ArrayConfig:
    array_rows: int = 128
    array_cols: int = 128
    batch_cols: int = 128
    fill_drain_model: str = "weight_stationary"
    static_power_units: float = 2.0e14  # energy units per second
    buffer_energy_per_byte: float = 150.0
    dram_energy_per_byte: float = 1000.0
    v_ref: float = 1.0
    spmv_lanes: int = 1024
    pack_tiles: bool = True  # tiles smaller than the array share one pass

    def __post_init__(self):
        for name in ("array_rows", "array_cols", "batch_cols", "spmv_lanes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("static_power_units", "buffer_energy_per_byte", "dram_energy_per_byte", "v_ref"):
            if getattr(self, name) < 0 or (name == "v_ref" and self.v_ref == 0):
                raise ValueError(f"{name} must be positive")
        if self.fill_drain_model != "weight_stationary":
            raise ValueError(f"unsupported fill/drain model {self.fill_drain_model!r}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EnergyBreakdown:
    static: float = 0.0
    core_dynamic: float = 0.0
    buffer: float = 0.0
    memory: float = 0.0

    @property
    def total(self) -> float:
        return self.static + self.core_dynamic + self.buffer + self.memory

    def to_json(self) -> dict:
        return {"static": self.static, "core_dynamic": self.core_dynamic,
                "buffer": self.buffer, "memory": self.memory, "total": self.total}


@dataclass
class GroupReport:
    freq_ghz: float
    voltage_v: float
    tiles: int
    cycles: int
    time_s: float
    core_dynamic: float
    spmv_time_s: float = 0.0
    spmv_energy: float = 0.0


@dataclass
class SimReport:
    exec_time_s: float
    compute_time_s: float
    energy: EnergyBreakdown
    transitions: int
    transition_overhead_s: float
    mac_ops: int
    padding_ops: int
    groups: list[GroupReport] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "exec_time_s": self.exec_time_s,
            "compute_time_s": self.compute_time_s,
            "transition_overhead_s": self.transition_overhead_s,
            "transitions": self.transitions,
            "mac_ops": self.mac_ops,
            "padding_ops": self.padding_ops,
            "energy": self.energy.to_json(),
            "groups": [asdict(g) for g in self.groups],
        }


def combine_reports(reports: list[SimReport]) -> SimReport:
    """Sum layer reports run back to back."""
    energy = EnergyBreakdown(
        static=sum(r.energy.static for r in reports),
        core_dynamic=sum(r.energy.core_dynamic for r in reports),
        buffer=sum(r.energy.buffer for r in reports),
        memory=sum(r.energy.memory for r in reports),
    )
    return SimReport(
        exec_time_s=sum(r.exec_time_s for r in reports),
        compute_time_s=sum(r.compute_time_s for r in reports),
        energy=energy,
        transitions=sum(r.transitions for r in reports),
        transition_overhead_s=sum(r.transition_overhead_s for r in reports),
        mac_ops=sum(r.mac_ops for r in reports),
        padding_ops=sum(r.padding_ops for r in reports),
        groups=[g for r in reports for g in r.groups],
    )


def tile_cycles(tile_dims: tuple[int, int], array: ArrayConfig) -> int:
    """Weight load + activation stream + fill/drain for one tile."""
    rows, cols = tile_dims
    if rows > array.array_rows or cols > array.array_cols:
        raise ValueError(f"tile {rows}x{cols} does not fit a {array.array_rows}x{array.array_cols} array")
    if rows <= 0 or cols <= 0:
        raise ValueError("tile dimensions must be positive")
    return rows + array.batch_cols + rows + cols - 2


def pass_layout(tile_dims: tuple[int, int], array: ArrayConfig) -> tuple[int, int]:
    """``(tiles per array pass, cycles per pass)``.

    With packing, small tiles of one group are laid side by side until the
    array is full and the pass costs the cycles of the occupied block.
    """
    rows, cols = tile_dims
    tile_cycles(tile_dims, array)
    if not array.pack_tiles:
        return 1, tile_cycles(tile_dims, array)
    nr, nc = array.array_rows // rows, array.array_cols // cols
    return nr * nc, tile_cycles((nr * rows, nc * cols), array)


@dataclass
class SpmvResult:
    result: np.ndarray
    time_s: float
    energy: float
    cycles: int


def simulate_spmv(overlay: SparseOverlay, b, level: DvfsLevel, profile: WeightProfile,
                  lanes: int = 1, v_ref: float = 1.0) -> SpmvResult:
    """CSR matrix-vector product of the dequantized overlay with ``b``.

    Each lane retires one nonzero per cycle; every op is charged the
    worst-case per-op energy of the profile since overlay values span int8.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (overlay.shape[1],):
        raise ValueError(f"vector length {b.shape} does not match {overlay.shape[1]} columns")
    if overlay.nnz and (overlay.col_idx.min() < 0 or overlay.col_idx.max() >= b.size):
        raise IndexError("overlay column index out of bounds")
    prods = overlay.values.astype(np.float64) * b[overlay.col_idx]
    res = np.zeros(overlay.shape[0])
    for r in range(overlay.shape[0]):
        lo, hi = overlay.row_ptr[r], overlay.row_ptr[r + 1]
        if hi > lo:
            res[r] = math.fsum(prods[lo:hi]) * float(overlay.channel_scales[r])
    cycles = -(-overlay.nnz // lanes)
    vscale = (level.voltage_v / v_ref) ** 2
    energy = overlay.nnz * float(profile.energy.max()) * vscale
    return SpmvResult(res, cycles / (level.freq_ghz * 1e9), energy, cycles)


def _weight_bits(cls: FrequencyClass) -> int:
    return max(1, math.ceil(math.log2(len(cls.codebook))))


def _check_coverage(model: QuantizedModel, schedule: DvfsSchedule) -> None:
    ids = sorted(schedule.tile_order())
    if ids != list(range(model.num_tiles)):
        raise ScheduleError("schedule must list every tile exactly once")
    if model.overlay.nnz and not any(g.includes_overlay for g in schedule.groups):
        raise ScheduleError("model has an overlay but no group runs it")


def simulate(model: QuantizedModel, schedule: DvfsSchedule, array: ArrayConfig,
             profile: WeightProfile, activations=None) -> SimReport:
    """Execution time and energy of one quantized layer under a DVFS schedule.

    ``activations`` (int8, ``cols x batch``) only fixes the batch width;
    energy does not depend on activation values.
    """
    _check_coverage(model, schedule)
    batch = array.batch_cols
    if activations is not None:
        act = np.asarray(activations)
        if act.ndim != 2 or act.shape[0] != model.shape[1]:
            raise ValueError(f"activations must be {model.shape[1]} x batch, got {act.shape}")
        if act.size and (act.min() < -128 or act.max() > 127):
            raise ValueError("activations must be int8")
        if act.shape[1] != batch:
            array = ArrayConfig(**{**array.to_json(), "batch_cols": act.shape[1]})
            batch = act.shape[1]

    tr, tc = model.tile_shape
    per_pass, pass_cycles = pass_layout((tr, tc), array)
    energy_lut = profile.energy
    delay_lut = profile.delay_ps
    tile_bits = {c.id: _weight_bits(c) for c in model.classes}
    global_worst = profile.global_worst_delay

    energy = EnergyBreakdown()
    groups: list[GroupReport] = []
    compute_time = 0.0
    for g in schedule.groups:
        lv = g.level
        vscale = (lv.voltage_v / array.v_ref) ** 2
        tiles = list(g.tile_ids)
        core = 0.0
        for t in tiles:
            counts = np.bincount(model.tile_values(t).astype(np.int64).ravel() + 128, minlength=256)
            worst = delay_lut[counts > 0].max()
            if worst > lv.period_ps:
                raise TimingViolationError(
                    f"tile {t}: critical path {worst} ps exceeds {lv.period_ps:.1f} ps at {lv.freq_ghz} GHz")
            core += float(counts @ energy_lut) * batch * vscale
            bits = tile_bits[int(model.tile_class[t])]
            energy.buffer += array.buffer_energy_per_byte * (
                tr * tc * bits / 8 + tc * batch * ACT_BYTES + tr * batch * PSUM_BYTES)
            energy.memory += array.dram_energy_per_byte * tr * tc * bits / 8
        cycles = -(-len(tiles) // per_pass) * pass_cycles
        time = cycles / (lv.freq_ghz * 1e9)
        rep = GroupReport(lv.freq_ghz, lv.voltage_v, len(tiles), cycles, time, core)
        if g.includes_overlay and model.overlay.nnz:
            if global_worst > lv.period_ps:
                raise TimingViolationError(
                    f"overlay needs {global_worst} ps but runs at {lv.period_ps:.1f} ps")
            ov = model.overlay
            sp_cycles = -(-ov.nnz * batch // array.spmv_lanes)
            rep.spmv_time_s = sp_cycles / (lv.freq_ghz * 1e9)
            rep.spmv_energy = ov.nnz * batch * float(energy_lut.max()) * vscale
            rep.cycles += sp_cycles
            rep.time_s += rep.spmv_time_s
            rep.core_dynamic += rep.spmv_energy
            sparse_bytes = ov.nnz * (1 + 4) + 4 * (ov.shape[0] + 1)
            energy.buffer += array.buffer_energy_per_byte * sparse_bytes
            energy.memory += array.dram_energy_per_byte * sparse_bytes
        energy.core_dynamic += rep.core_dynamic
        compute_time += rep.time_s
        groups.append(rep)

    gr, gc = model.grid
    energy.memory += array.dram_energy_per_byte * (
        gc * tc * batch * ACT_BYTES + model.shape[0] * batch * PSUM_BYTES)
    exec_time = compute_time + schedule.transition_overhead_s
    energy.static = array.static_power_units * exec_time
    mac_ops = model.shape[0] * model.shape[1] * batch
    return SimReport(
        exec_time_s=exec_time, compute_time_s=compute_time, energy=energy,
        transitions=schedule.transition_count,
        transition_overhead_s=schedule.transition_overhead_s,
        mac_ops=mac_ops, padding_ops=model.padding_count() * batch, groups=groups,
    )


def uniform_quantize(W, bits: int = 8, tile_shape: tuple[int, int] = (128, 128),
                     name: str = "baseline") -> QuantizedModel:
    """Round-to-nearest symmetric ``bits``-bit quantization with per-tile scales."""
    if not 2 <= bits <= 8:
        raise ValueError("bits must be in [2, 8]")
    w = np.asarray(W, dtype=np.float64)
    qmax = 2 ** (bits - 1) - 1
    cls = FrequencyClass(UNIFORM_CLASS, f"w{bits}", 0.0, tuple(range(-qmax, qmax + 1)))
    tr, tc = tile_shape
    tiles = to_tiles(pad_to_tiles(w, tr, tc), tr, tc)
    gr, gc = tiles.shape[:2]
    values = np.zeros(tiles.shape, dtype=np.int8)
    scales = np.zeros(gr * gc, dtype=np.float32)
    for t in range(gr * gc):
        i, j = divmod(t, gc)
        s = tile_scale(tiles[i, j], cls.codebook)
        values[i, j] = np.clip(np.rint(tiles[i, j] / np.float64(s)), -qmax, qmax).astype(np.int8)
        scales[t] = s
    rows = w.shape[0]
    empty = SparseOverlay(w.shape, np.zeros(rows + 1, dtype=np.int64), [], [],
                          np.ones(rows, dtype=np.float32))
    return QuantizedModel(w.shape, (tr, tc), (cls,), np.full(gr * gc, UNIFORM_CLASS, dtype=np.int8),
                          values, scales, empty, name=name)


def baseline_schedule(model: QuantizedModel, levels, profile: WeightProfile,
                      transition_time_s: float = 1e-6) -> DvfsSchedule:
    """One group at the fastest level that is safe for every int8 weight."""
    level = max_freq_level(levels, profile.global_worst_delay)
    class_levels = {c.id: level for c in model.classes}
    class_levels[OVERLAY_CLASS] = level
    return build_schedule(model.tile_class, class_levels, transition_time_s,
                          overlay_class=OVERLAY_CLASS if model.overlay.nnz else None)


def run_baseline(model: QuantizedModel, array: ArrayConfig, levels, profile: WeightProfile,
                 transition_time_s: float = 1e-6) -> SimReport:
    """Hardware-agnostic baseline: the whole model at the full-range-safe level."""
    return simulate(model, baseline_schedule(model, levels, profile, transition_time_s), array, profile)
