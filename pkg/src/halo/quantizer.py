"""Frequency-class codebooks, tile quantization, and the sparse overlay."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContainerError
from .mac import WEIGHT_VALUES, WeightProfile, default_profile
from .sensitivity import (DEFAULT_OVERLAY_CAP, DEFAULT_SALIENT_FRACTION, DEFAULT_TILE,
                          TileClass, build_masks, fisher_sensitivity, from_tiles,
                          pad_to_tiles, to_tiles)

MODEL_SCHEMA = "halo-model-v1"

LOW_CLASS = int(TileClass.LOW)
HIGH_CLASS = int(TileClass.HIGH)
OVERLAY_CLASS = 2


@dataclass(frozen=True)
class FrequencyClass:
    id: int
    name: str
    target_freq_ghz: float
    codebook: tuple[int, ...]
    voltage_v: float | None = None

    def __post_init__(self):
        cb = tuple(int(v) for v in self.codebook)
        if not cb or 0 not in cb or len(set(cb)) != len(cb) or list(cb) != sorted(cb):
            raise ValueError(f"class {self.name}: codebook must be sorted, unique and contain 0")
        if not all(-128 <= v <= 127 for v in cb):
            raise ValueError(f"class {self.name}: codebook outside int8")
        object.__setattr__(self, "codebook", cb)

    @property
    def bits(self) -> float:
        return math.log2(len(self.codebook))

    def to_json(self) -> dict:
        return {"id": self.id, "name": self.name, "target_freq_ghz": self.target_freq_ghz,
                "voltage_v": self.voltage_v, "codebook": list(self.codebook)}

    @classmethod
    def from_json(cls, d: dict) -> "FrequencyClass":
        return cls(int(d["id"]), str(d["name"]), float(d["target_freq_ghz"]),
                   tuple(d["codebook"]), d.get("voltage_v"))


def build_codebook(profile: WeightProfile, target_freq_ghz: float, max_size: int = 256) -> tuple[int, ...]:
    """All weight values fast enough for ``target_freq_ghz``, plus zero.

    Beyond ``max_size`` keep zero and the fastest others (ties: smaller
    magnitude, then positive first).
    """
    if not 1 <= max_size <= 256:
        raise ValueError("max_size must be in [1, 256]")
    freq = profile.max_freq_ghz
    candidates = [int(v) for v in WEIGHT_VALUES if freq[v + 128] >= target_freq_ghz]
    if not candidates:
        raise ValueError(f"no weight value reaches {target_freq_ghz} GHz "
                         f"(profile max {freq.max():.3f} GHz)")
    others = sorted((v for v in candidates if v != 0),
                    key=lambda v: (-freq[v + 128], abs(v), v < 0))
    return tuple(sorted([0] + others[: max_size - 1]))


def full_range_class(voltage_v: float | None = None) -> FrequencyClass:
    """Uniform int8 class used by the sparse overlay and uniform baselines."""
    return FrequencyClass(OVERLAY_CLASS, "overlay", 0.0, tuple(range(-127, 128)), voltage_v)


@dataclass
class QuantConfig:
    tile_rows: int = DEFAULT_TILE
    tile_cols: int | None = None
    retention: float = 0.95
    salient_fraction: float = DEFAULT_SALIENT_FRACTION
    overlay_cap: float = DEFAULT_OVERLAY_CAP
    f_low_ghz: float = 3.7
    f_high_ghz: float = 2.4
    low_size: int = 9
    high_size: int = 16

    @property
    def tile_shape(self) -> tuple[int, int]:
        return self.tile_rows, self.tile_cols or self.tile_rows

    def classes(self, profile: WeightProfile) -> tuple[FrequencyClass, FrequencyClass]:
        low = FrequencyClass(LOW_CLASS, "low", self.f_low_ghz,
                             build_codebook(profile, self.f_low_ghz, self.low_size))
        high = FrequencyClass(HIGH_CLASS, "high", self.f_high_ghz,
                              build_codebook(profile, self.f_high_ghz, self.high_size))
        return low, high


@dataclass
class SparseOverlay:
    """Per-channel int8 CSR matrix of outlier and salient weights."""

    shape: tuple[int, int]
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    channel_scales: np.ndarray

    def __post_init__(self):
        self.row_ptr = np.asarray(self.row_ptr, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.int8)
        self.channel_scales = np.asarray(self.channel_scales, dtype=np.float32)
        self.validate()

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def density(self) -> float:
        return self.nnz / (self.shape[0] * self.shape[1])

    def validate(self) -> None:
        rows, cols = self.shape
        rp = self.row_ptr
        if rp.shape != (rows + 1,) or rp[0] != 0 or (np.diff(rp) < 0).any():
            raise ValueError("row_ptr must start at 0, be nondecreasing and have rows + 1 entries")
        if rp[-1] != self.col_idx.size or self.col_idx.size != self.values.size:
            raise ValueError("row_ptr, col_idx and values disagree on nnz")
        if self.channel_scales.shape != (rows,):
            raise ValueError("need one scale per output channel")
        if self.col_idx.size and (self.col_idx.min() < 0 or self.col_idx.max() >= cols):
            raise IndexError("column index out of bounds")
        for r in range(rows):
            seg = self.col_idx[rp[r]:rp[r + 1]]
            if (np.diff(seg) <= 0).any():
                raise ValueError(f"row {r}: column indices must be strictly increasing")

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.shape[0]), np.diff(self.row_ptr))

    def dequantized_values(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.channel_scales.astype(np.float64)[self.row_ids()]

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids(), self.col_idx] = self.dequantized_values()
        return out


def quantize_overlay(W, outlier_mask, salient_mask) -> SparseOverlay:
    """Uniform symmetric int8 quantization of the masked weights, one scale per row."""
    w = np.asarray(W, dtype=np.float64)
    out_m = np.asarray(outlier_mask, dtype=bool)
    sal_m = np.asarray(salient_mask, dtype=bool)
    if out_m.shape != w.shape or sal_m.shape != w.shape:
        raise ValueError("mask shapes must match the weight matrix")
    if (out_m & sal_m).any():
        raise ValueError("outlier and salient masks overlap")
    mask = out_m | sal_m
    rows, _ = w.shape
    absmax = np.where(mask, np.abs(w), 0.0).max(axis=1)
    scales = np.where(absmax > 0, absmax / 127.0, 1.0).astype(np.float32)
    r, c = np.nonzero(mask)  # row-major order
    q = np.clip(np.rint(w[r, c] / scales[r].astype(np.float64)), -127, 127).astype(np.int8)
    row_ptr = np.zeros(rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=rows), out=row_ptr[1:])
    return SparseOverlay(w.shape, row_ptr, c, q, scales)


def tile_scale(tile: np.ndarray, codebook) -> np.float32:
    peak = float(np.abs(tile).max()) if tile.size else 0.0
    ref = max(abs(c) for c in codebook)
    if peak == 0 or ref == 0:
        return np.float32(1.0)
    s = np.float32(peak / ref)
    if not np.isfinite(s):
        raise ValueError(f"tile magnitude {peak:g} exceeds the float32 scale range")
    # tiles of subnormal weights would otherwise get a zero scale
    return max(s, np.finfo(np.float32).smallest_subnormal)


def snap_to_codebook(x: np.ndarray, codebook) -> np.ndarray:
    """Index of the nearest codebook entry for each element, ties to the smaller entry."""
    cb = np.asarray(codebook, dtype=np.float64)
    pos = np.searchsorted(cb, x, side="left")
    hi = np.clip(pos, 0, cb.size - 1)
    lo = np.clip(pos - 1, 0, cb.size - 1)
    take_hi = np.abs(cb[hi] - x) < np.abs(x - cb[lo])
    return np.where(take_hi, hi, lo).astype(np.int64)


def quantize_tile(tile_weights, codebook) -> tuple[np.ndarray, np.float32]:
    """Non-uniform quantization of one tile onto a codebook.

    The scale maps the largest weight magnitude onto the largest codebook
    magnitude; returns ``(codebook indices, scale)``.
    """
    tile = np.asarray(tile_weights, dtype=np.float64)
    s = tile_scale(tile, codebook)
    return snap_to_codebook(tile / np.float64(s), codebook), s


@dataclass
class QuantizedModel:
    """One tile-quantized weight matrix plus its sparse overlay.

    ``values`` holds the int8 codebook value of every padded weight, laid out
    ``(grid_rows, grid_cols, tile_rows, tile_cols)``.
    """

    shape: tuple[int, int]
    tile_shape: tuple[int, int]
    classes: tuple[FrequencyClass, ...]
    tile_class: np.ndarray
    values: np.ndarray
    scales: np.ndarray
    overlay: SparseOverlay
    profile_digest: str = ""
    name: str = "layer"
    k_fraction: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    @property
    def num_tiles(self) -> int:
        return int(self.tile_class.size)

    def class_by_id(self, cid: int) -> FrequencyClass:
        for c in self.classes:
            if c.id == cid:
                return c
        raise KeyError(f"unknown class id {cid}")

    def tile_values(self, t: int) -> np.ndarray:
        gr, gc = divmod(t, self.grid[1])
        return self.values[gr, gc]

    def indices(self) -> np.ndarray:
        """Codebook indices per weight, same layout as ``values``."""
        out = np.empty(self.values.shape, dtype=np.int64)
        flat_cls = self.tile_class.reshape(self.grid)
        for cls in self.classes:
            sel = flat_cls == cls.id
            out[sel] = np.searchsorted(np.asarray(cls.codebook), self.values[sel])
        return out

    def padding_count(self) -> int:
        gr, gc = self.grid
        tr, tc = self.tile_shape
        return gr * gc * tr * tc - self.shape[0] * self.shape[1]

    def validate(self) -> None:
        ids = {c.id for c in self.classes}
        if not set(np.unique(self.tile_class).tolist()) <= ids:
            raise ValueError("tile references an undeclared class")
        flat_cls = self.tile_class.reshape(self.grid)
        for cls in self.classes:
            used = np.unique(self.values[flat_cls == cls.id])
            if not set(used.tolist()) <= set(cls.codebook):
                raise ValueError(f"class {cls.name}: values outside its codebook")


def quantize_model(W, G, config: QuantConfig | None = None, profile: WeightProfile | None = None,
                   name: str = "layer") -> QuantizedModel:
    """Quantize one weight matrix end to end.

    Outliers and salient weights go to the per-channel int8 overlay; the
    remaining weights are zero-padded, tiled, classified by tile sensitivity,
    and snapped to the LOW (fast) or HIGH codebook.
    """
    config = config or QuantConfig()
    profile = profile or default_profile()
    w = np.asarray(W, dtype=np.float64)
    tr, tc = config.tile_shape
    masks, grid = build_masks(w, G, tr, tc, config.retention,
                              config.salient_fraction, config.overlay_cap)
    overlay = quantize_overlay(w, masks.outlier_mask, masks.salient_mask)
    normal = np.where(masks.overlay_mask, 0.0, w)
    tiles = to_tiles(pad_to_tiles(normal, tr, tc), tr, tc)
    low, high = config.classes(profile)
    by_id = {low.id: low, high.id: high}

    gr, gc = tiles.shape[:2]
    values = np.zeros(tiles.shape, dtype=np.int8)
    scales = np.zeros(gr * gc, dtype=np.float32)
    for t, cid in enumerate(masks.tile_class):
        i, j = divmod(t, gc)
        cb = by_id[int(cid)].codebook
        idx, s = quantize_tile(tiles[i, j], cb)
        values[i, j] = np.asarray(cb, dtype=np.int8)[idx]
        scales[t] = s
    return QuantizedModel(
        shape=w.shape, tile_shape=(tr, tc), classes=(low, high),
        tile_class=masks.tile_class.astype(np.int8), values=values, scales=scales,
        overlay=overlay, profile_digest=profile.digest(), name=name,
        k_fraction=masks.k_fraction,
    )


def dequantize(model: QuantizedModel) -> np.ndarray:
    """Reconstruct the weight matrix; overlay entries take precedence."""
    gr, gc = model.grid
    s = model.scales.astype(np.float64).reshape(gr, gc, 1, 1)
    dense = from_tiles(model.values.astype(np.float64) * s)[: model.shape[0], : model.shape[1]].copy()
    ov = model.overlay
    dense[ov.row_ids(), ov.col_idx] = ov.dequantized_values()
    return dense


def effective_bitwidth(models) -> float:
    """Parameter-weighted mean bits per weight across one or more models.

    Dense weights count ``log2(codebook size)`` of their tile's class, overlay
    weights 8 bits; padding is excluded.
    """
    if isinstance(models, QuantizedModel):
        models = [models]
    total_bits = 0.0
    total_params = 0
    for m in models:
        rows, cols = m.shape
        tr, tc = m.tile_shape
        gr, gc = m.grid
        # unpadded positions per tile
        r_ext = np.minimum(tr, rows - np.arange(gr) * tr)
        c_ext = np.minimum(tc, cols - np.arange(gc) * tc)
        real = np.outer(r_ext, c_ext).ravel()
        ov_tiles = (m.overlay.row_ids() // tr) * gc + m.overlay.col_idx // tc
        ov_per_tile = np.bincount(ov_tiles, minlength=gr * gc)
        bits = np.array([m.class_by_id(int(c)).bits for c in m.tile_class])
        total_bits += float(((real - ov_per_tile) * bits).sum()) + 8.0 * m.overlay.nnz
        total_params += rows * cols
    if total_params == 0:
        raise ValueError("no parameters")
    return total_bits / total_params


def fisher_weighted_error(W, G, model: QuantizedModel) -> float:
    """Second-order loss proxy: sum of squared-gradient-weighted squared error."""
    dw = np.asarray(W, dtype=np.float64) - dequantize(model)
    return float((fisher_sensitivity(G) * dw * dw).sum())


# --- on-disk container ---------------------------------------------------

_FILES = {
    "tiles": ("tiles.i8", "i1"),
    "scales": ("scales.f32", "<f4"),
    "overlay_row_ptr": ("overlay_row_ptr.bin", "<i8"),
    "overlay_col_idx": ("overlay_col_idx.bin", "<i4"),
    "overlay_values": ("overlay_values.bin", "i1"),
    "overlay_scales": ("overlay_scales.bin", "<f4"),
}


def save_model(model: QuantizedModel, directory: str | os.PathLike) -> Path:
    """Write ``manifest.json`` plus raw little-endian arrays into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {
        "tiles": model.values,
        "scales": model.scales,
        "overlay_row_ptr": model.overlay.row_ptr,
        "overlay_col_idx": model.overlay.col_idx,
        "overlay_values": model.overlay.values,
        "overlay_scales": model.overlay.channel_scales,
    }
    files = {}
    for key, arr in arrays.items():
        fname, dtype = _FILES[key]
        raw = np.ascontiguousarray(arr).astype(dtype).tobytes()
        (d / fname).write_bytes(raw)
        files[key] = {"file": fname, "dtype": dtype, "count": int(np.asarray(arr).size),
                      "sha256": hashlib.sha256(raw).hexdigest()}
    manifest = {
        "schema": MODEL_SCHEMA,
        "name": model.name,
        "shape": list(model.shape),
        "tile_shape": list(model.tile_shape),
        "grid": list(model.grid),
        "classes": [c.to_json() for c in model.classes],
        "tile_class": model.tile_class.astype(int).tolist(),
        "overlay_nnz": model.overlay.nnz,
        "k_fraction": model.k_fraction,
        "profile_digest": model.profile_digest,
        "files": files,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return d


def load_model(directory: str | os.PathLike) -> QuantizedModel:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{d}: cannot read manifest ({exc})") from exc
    if manifest.get("schema") != MODEL_SCHEMA:
        raise ContainerError(f"{d}: not a {MODEL_SCHEMA} container")
    arrays = {}
    for key, (fname, dtype) in _FILES.items():
        info = manifest["files"][key]
        try:
            raw = (d / info["file"]).read_bytes()
        except OSError as exc:
            raise ContainerError(f"{d / info['file']}: {exc}") from exc
        if hashlib.sha256(raw).hexdigest() != info["sha256"]:
            raise ContainerError(f"{d / info['file']}: checksum mismatch")
        arrays[key] = np.frombuffer(raw, dtype=dtype)
    gr, gc = manifest["grid"]
    tr, tc = manifest["tile_shape"]
    overlay = SparseOverlay(tuple(manifest["shape"]), arrays["overlay_row_ptr"],
                            arrays["overlay_col_idx"], arrays["overlay_values"],
                            arrays["overlay_scales"])
    model = QuantizedModel(
        shape=tuple(manifest["shape"]), tile_shape=(tr, tc),
        classes=tuple(FrequencyClass.from_json(c) for c in manifest["classes"]),
        tile_class=np.asarray(manifest["tile_class"], dtype=np.int8),
        values=arrays["tiles"].astype(np.int8).reshape(gr, gc, tr, tc),
        scales=arrays["scales"].astype(np.float32),
        overlay=overlay, profile_digest=manifest.get("profile_digest", ""),
        name=manifest.get("name", "layer"), k_fraction=float(manifest.get("k_fraction", "nan")),
    )
    model.validate()
    return model
