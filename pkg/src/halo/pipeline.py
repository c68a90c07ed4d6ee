"""End-to-end runs: tensor containers, design goals, Pareto sweeps, reports."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .dvfs import DEFAULT_TRANSITION_S, LEVEL_TABLES, DvfsLevel, DvfsSchedule, LevelMode, build_schedule, level_for_class
from .errors import ContainerError
from .mac import WEIGHT_VALUES, WeightProfile, default_profile
from .quantizer import (HIGH_CLASS, LOW_CLASS, OVERLAY_CLASS, QuantConfig, QuantizedModel,
                        effective_bitwidth, fisher_weighted_error, quantize_model)
from .simulator import ArrayConfig, SimReport, combine_reports, run_baseline, simulate, uniform_quantize

TENSOR_SCHEMA = "halo-tensors-v1"


# --- tensor container ----------------------------------------------------

@dataclass
class Layer:
    name: str
    weight: np.ndarray
    gradient: np.ndarray


@dataclass
class TensorContainer:
    layers: list[Layer]

    def __post_init__(self):
        for layer in self.layers:
            if layer.weight.ndim != 2 or layer.weight.shape != layer.gradient.shape:
                raise ContainerError(f"layer {layer.name}: weight and gradient must be equal-shape matrices")
            if not (np.isfinite(layer.weight).all() and np.isfinite(layer.gradient).all()):
                raise ContainerError(f"layer {layer.name}: non-finite values")


def save_container(container: TensorContainer, directory: str | os.PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for layer in container.layers:
        wf, gf = f"{layer.name}.weight.f32", f"{layer.name}.grad.f32"
        (d / wf).write_bytes(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        (d / gf).write_bytes(np.ascontiguousarray(layer.gradient, dtype="<f4").tobytes())
        entries.append({"name": layer.name, "shape": list(layer.weight.shape),
                        "weight": wf, "gradient": gf})
    manifest = {"schema": TENSOR_SCHEMA, "dtype": "f32", "endianness": "little", "layers": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return d


def load_container(directory: str | os.PathLike) -> TensorContainer:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{d}: cannot read manifest ({exc})") from exc
    if manifest.get("schema") != TENSOR_SCHEMA:
        raise ContainerError(f"{d}: expected schema {TENSOR_SCHEMA}")
    if manifest.get("dtype", "f32") != "f32" or manifest.get("endianness", "little") != "little":
        raise ContainerError(f"{d}: only little-endian f32 tensors are supported")
    layers = []
    for e in manifest.get("layers", []):
        shape = tuple(int(x) for x in e["shape"])
        arrays = []
        for key in ("weight", "gradient"):
            path = d / e[key]
            try:
                raw = path.read_bytes()
            except OSError as exc:
                raise ContainerError(f"{path}: {exc}") from exc
            if len(raw) != 4 * math.prod(shape):
                raise ContainerError(f"{path}: {len(raw)} bytes does not match shape {shape}")
            arrays.append(np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape))
        layers.append(Layer(e["name"], *arrays))
    if not layers:
        raise ContainerError(f"{d}: container has no layers")
    return TensorContainer(layers)


def synthetic_container(seed: int = 0, shapes: Sequence[tuple[int, int]] = ((1024, 1024), (1024, 2048)),
                        block: int = 32, spread: float = 1.5) -> TensorContainer:
    """Gaussian weights with heavy-tailed, block-clustered gradients.

    Gradient magnitude is scaled per ``block x block`` region by a lognormal
    gain with log-std ``spread``, which gives tile sensitivities the skew
    seen in real layers.

    Values are rounded through float32 so a saved and reloaded container is
    identical to the in-memory one.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for i, (rows, cols) in enumerate(shapes):
        w = rng.normal(0.0, 0.02, size=(rows, cols))
        gr, gc = -(-rows // block), -(-cols // block)
        block_gain = rng.lognormal(0.0, spread, size=(gr, gc))
        gain = np.kron(block_gain, np.ones((block, block)))[:rows, :cols]
        g = rng.standard_t(3, size=(rows, cols)) * gain * 1e-3
        layers.append(Layer(f"layer{i}", w.astype(np.float32).astype(np.float64),
                            g.astype(np.float32).astype(np.float64)))
    return TensorContainer(layers)


# --- goals ---------------------------------------------------------------

class Goal(str, Enum):
    PERF_OPT = "perf-opt"
    ACC_OPT = "acc-opt"
    BAL = "bal"


@dataclass
class GoalConfig:
    goal: Goal = Goal.BAL
    retention_perf: float = 0.80
    retention_acc: float = 0.99
    sweep_points: int = 9
    tile_size: int = 128
    dvfs_target: str = "tpu"
    low_mode: LevelMode = LevelMode.MAX_FREQ
    high_mode: LevelMode = LevelMode.MAX_FREQ
    overlay_mode: LevelMode = LevelMode.MIN_ENERGY
    transition_time_s: float = DEFAULT_TRANSITION_S
    salient_fraction: float = 0.0005
    overlay_cap: float = 0.005
    f_low_ghz: float = 3.7
    f_high_ghz: float = 2.4
    low_size: int = 9
    high_size: int = 16
    baseline_bits: int = 8

    def __post_init__(self):
        self.goal = Goal(self.goal)
        for name in ("low_mode", "high_mode", "overlay_mode"):
            setattr(self, name, LevelMode(getattr(self, name)))
        if not 0 < self.retention_perf < self.retention_acc <= 1:
            raise ValueError("need 0 < retention_perf < retention_acc <= 1")
        if self.sweep_points < 2:
            raise ValueError("sweep needs at least two points")
        if self.dvfs_target not in LEVEL_TABLES:
            raise ValueError(f"unknown DVFS target {self.dvfs_target!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "GoalConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> dict:
        return {k: (v.value if isinstance(v, Enum) else v) for k, v in asdict(self).items()}

    def quant_config(self, retention: float) -> QuantConfig:
        return QuantConfig(tile_rows=self.tile_size, retention=retention,
                           salient_fraction=self.salient_fraction, overlay_cap=self.overlay_cap,
                           f_low_ghz=self.f_low_ghz, f_high_ghz=self.f_high_ghz,
                           low_size=self.low_size, high_size=self.high_size)

    def sweep_retentions(self) -> list[float]:
        return [float(r) for r in np.linspace(self.retention_perf, self.retention_acc, self.sweep_points)]


@dataclass
class ParetoPoint:
    retention: float
    normalized_perf: float
    proxy_loss: float
    b_eff: float


def knee_point(points: Sequence[ParetoPoint]) -> ParetoPoint:
    """Pareto point farthest from the chord between the frontier's extremes.

    Both axes are min-max normalized over the non-dominated subset (higher
    perf and lower proxy loss are better). Ties go to lower proxy loss. With
    fewer than three points a warning is issued and the lowest-loss point is
    returned.
    """
    pts = list(points)
    if not pts:
        raise ValueError("no points")
    if len(pts) < 3:
        warnings.warn("knee_point needs at least three points; returning the lowest-loss point",
                      stacklevel=2)
        return min(pts, key=lambda p: (p.proxy_loss, -p.normalized_perf, p.retention))
    front = pareto_front(pts)
    front.sort(key=lambda p: (p.normalized_perf, p.proxy_loss))
    perf = np.array([p.normalized_perf for p in front])
    loss = np.array([p.proxy_loss for p in front])

    def norm(x):
        span = x.max() - x.min()
        return (x - x.min()) / span if span > 0 else np.zeros_like(x)

    x, y = norm(perf), norm(loss)
    dx, dy = x[-1] - x[0], y[-1] - y[0]
    length = math.hypot(dx, dy)
    dist = np.abs(dx * (y - y[0]) - dy * (x - x[0])) / length if length > 0 else np.zeros_like(x)
    best = max(dist)
    tied = [p for p, d in zip(front, dist) if d >= best - 1e-12]
    return min(tied, key=lambda p: (p.proxy_loss, -p.normalized_perf, p.retention))


def pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Points not dominated on (higher normalized_perf, lower proxy_loss)."""
    out = []
    for p in points:
        dominated = any(
            q.normalized_perf >= p.normalized_perf and q.proxy_loss <= p.proxy_loss
            and (q.normalized_perf > p.normalized_perf or q.proxy_loss < p.proxy_loss)
            for q in points)
        if not dominated:
            out.append(p)
    return out


# --- runs ----------------------------------------------------------------

@dataclass
class LayerResult:
    model: QuantizedModel
    schedule: DvfsSchedule
    report: SimReport
    baseline: SimReport
    proxy_loss: float
    b_eff: float


@dataclass
class PipelineResult:
    goal: Goal
    retention: float
    layers: dict[str, LayerResult]
    report: SimReport
    baseline: SimReport
    point: ParetoPoint
    sweep: list[ParetoPoint] = field(default_factory=list)
    knee_fallback: bool = False

    @property
    def models(self) -> list[QuantizedModel]:
        return [lr.model for lr in self.layers.values()]

    def metrics(self) -> dict:
        return {
            "goal": self.goal.value,
            "retention": self.retention,
            "normalized_perf": self.point.normalized_perf,
            "proxy_loss": self.point.proxy_loss,
            "b_eff": self.point.b_eff,
            "exec_time_s": self.report.exec_time_s,
            "baseline_exec_time_s": self.baseline.exec_time_s,
            "energy_total": self.report.energy.total,
            "baseline_energy_total": self.baseline.energy.total,
            "transitions": self.report.transitions,
            "knee_fallback": self.knee_fallback,
        }


def class_levels(model: QuantizedModel, goal: GoalConfig, profile: WeightProfile,
                 levels: Sequence[DvfsLevel] | None = None) -> dict:
    levels = LEVEL_TABLES[goal.dvfs_target] if levels is None else levels
    modes = {LOW_CLASS: goal.low_mode, HIGH_CLASS: goal.high_mode}
    out = {c.id: level_for_class(levels, c.codebook, profile, modes[c.id]) for c in model.classes}
    out[OVERLAY_CLASS] = level_for_class(levels, WEIGHT_VALUES.tolist(), profile, goal.overlay_mode)
    return out


def schedule_for(model: QuantizedModel, goal: GoalConfig, profile: WeightProfile,
                 levels: Sequence[DvfsLevel] | None = None) -> DvfsSchedule:
    return build_schedule(model.tile_class, class_levels(model, goal, profile, levels), goal.transition_time_s,
                          overlay_class=OVERLAY_CLASS if model.overlay.nnz else None)


class _Runner:
    """Runs one container at arbitrary retentions, memoizing per retention."""

    def __init__(self, container: TensorContainer, goal: GoalConfig, profile: WeightProfile,
                 array: ArrayConfig):
        if not container.layers:
            raise ContainerError("empty container")
        self.container = container
        self.goal = goal
        self.profile = profile
        self.array = array
        self.levels = LEVEL_TABLES[goal.dvfs_target]
        self._baselines: dict[str, SimReport] | None = None
        self._cache: dict[float, tuple[dict[str, LayerResult], ParetoPoint, SimReport]] = {}

    def baselines(self) -> dict[str, SimReport]:
        if self._baselines is None:
            t = self.goal.tile_size
            self._baselines = {
                layer.name: run_baseline(uniform_quantize(layer.weight, self.goal.baseline_bits, (t, t)),
                                         self.array, self.levels, self.profile, self.goal.transition_time_s)
                for layer in self.container.layers
            }
        return self._baselines

    def run(self, retention: float):
        if retention in self._cache:
            return self._cache[retention]
        base = self.baselines()
        cfg = self.goal.quant_config(retention)
        results = {}
        for layer in self.container.layers:
            model = quantize_model(layer.weight, layer.gradient, cfg, self.profile, name=layer.name)
            sched = schedule_for(model, self.goal, self.profile)
            rep = simulate(model, sched, self.array, self.profile)
            results[layer.name] = LayerResult(
                model, sched, rep, base[layer.name],
                fisher_weighted_error(layer.weight, layer.gradient, model), effective_bitwidth(model))
        report = combine_reports([r.report for r in results.values()])
        baseline = combine_reports(list(base.values()))
        point = ParetoPoint(
            retention=retention,
            normalized_perf=baseline.exec_time_s / report.exec_time_s,
            proxy_loss=math.fsum(r.proxy_loss for r in results.values()),
            b_eff=effective_bitwidth([r.model for r in results.values()]),
        )
        self._cache[retention] = (results, point, report)
        return self._cache[retention]


def sweep(container: TensorContainer, goal: GoalConfig | None = None, profile: WeightProfile | None = None,
          array: ArrayConfig | None = None) -> list[ParetoPoint]:
    goal = goal or GoalConfig()
    runner = _Runner(container, goal, profile or default_profile(), array or _array_for(goal))
    return [runner.run(r)[1] for r in goal.sweep_retentions()]


def _array_for(goal: GoalConfig) -> ArrayConfig:
    v_ref = min(lv.voltage_v for lv in LEVEL_TABLES[goal.dvfs_target])
    return ArrayConfig(v_ref=v_ref)


def run_pipeline(container: TensorContainer, goal: GoalConfig | None = None,
                 profile: WeightProfile | None = None, array: ArrayConfig | None = None) -> PipelineResult:
    """Quantize, schedule and simulate every layer for the requested goal.

    PERF_OPT and ACC_OPT use their fixed retention; BAL sweeps retention and
    keeps the knee of the resulting Pareto set.
    """
    goal = goal or GoalConfig()
    profile = profile or default_profile()
    runner = _Runner(container, goal, profile, array or _array_for(goal))
    points: list[ParetoPoint] = []
    fallback = False
    if goal.goal is Goal.PERF_OPT:
        retention = goal.retention_perf
    elif goal.goal is Goal.ACC_OPT:
        retention = goal.retention_acc
    else:
        points = [runner.run(r)[1] for r in goal.sweep_retentions()]
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            knee = knee_point(points)
        fallback = bool(caught)
        retention = knee.retention
    layers, point, report = runner.run(retention)
    baseline = combine_reports(list(runner.baselines().values()))
    return PipelineResult(goal.goal, retention, layers, report, baseline, point, points, fallback)


# --- reports -------------------------------------------------------------

def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def emit_report(result: PipelineResult, out_dir: str | os.PathLike) -> dict[str, Path]:
    """Write report.json, layers.csv, pareto.csv and schedule.csv."""
    d = Path(out_dir)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{d}: cannot create report directory ({exc})") from exc

    layer_rows = []
    sched_rows = []
    for name, lr in result.layers.items():
        m = lr.model
        low = int((m.tile_class == LOW_CLASS).sum())
        layer_rows.append([name, f"{m.shape[0]}x{m.shape[1]}", m.num_tiles, low, m.num_tiles - low,
                           m.overlay.nnz, lr.b_eff, lr.proxy_loss, lr.report.exec_time_s,
                           lr.baseline.exec_time_s, lr.report.energy.total, lr.baseline.energy.total,
                           lr.report.transitions])
        for gi, (g, gr) in enumerate(zip(lr.schedule.groups, lr.report.groups)):
            sched_rows.append([name, gi, g.level.voltage_v, g.level.freq_ghz,
                               ";".join(map(str, g.class_ids)), len(g.tile_ids),
                               g.includes_overlay, gr.time_s, gr.core_dynamic])
    points = result.sweep or [result.point]
    pareto_rows = [[p.retention, p.normalized_perf, p.proxy_loss, p.b_eff,
                    p.retention == result.retention] for p in points]

    doc = {
        "metrics": result.metrics(),
        "report": result.report.to_json(),
        "baseline": result.baseline.to_json(),
        "pareto": [asdict(p) for p in points],
        "layers": {name: {"report": lr.report.to_json(), "baseline": lr.baseline.to_json(),
                          "schedule": lr.schedule.to_json(), "proxy_loss": lr.proxy_loss,
                          "b_eff": lr.b_eff, "k_fraction": lr.model.k_fraction}
                   for name, lr in result.layers.items()},
    }
    files = {
        "report.json": json.dumps(doc, indent=1) + "\n",
        "layers.csv": _csv(["layer", "shape", "tiles", "low_tiles", "high_tiles", "overlay_nnz", "b_eff",
                            "proxy_loss", "exec_time_s", "baseline_exec_time_s", "energy_total",
                            "baseline_energy_total", "transitions"], layer_rows),
        "pareto.csv": _csv(["retention", "normalized_perf", "proxy_loss", "b_eff", "selected"], pareto_rows),
        "schedule.csv": _csv(["layer", "group", "voltage_v", "freq_ghz", "class_ids", "tiles",
                              "includes_overlay", "time_s", "core_dynamic"], sched_rows),
    }
    written = {}
    for fname, text in files.items():
        path = d / fname
        try:
            path.write_text(text)
        except OSError as exc:
            raise OSError(f"{path}: write failed ({exc})") from exc
        written[fname] = path
    return written
