"""Weight and tile sensitivity from gradients, outliers, and tile classes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from enum import IntEnum

import numpy as np

DEFAULT_TILE = 128
DEFAULT_SALIENT_FRACTION = 0.0005
DEFAULT_OVERLAY_CAP = 0.005


class TileClass(IntEnum):
    LOW = 0
    HIGH = 1


@dataclass
class TileGrid:
    tile_rows: int
    tile_cols: int
    grid_rows: int
    grid_cols: int
    sensitivities: np.ndarray  # (grid_rows, grid_cols), row-major tile order when flattened

    @property
    def num_tiles(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass
class SensitivityMasks:
    salient_mask: np.ndarray
    outlier_mask: np.ndarray
    tile_class: np.ndarray  # TileClass per tile, flattened row-major
    k_fraction: float

    @property
    def overlay_mask(self) -> np.ndarray:
        return self.salient_mask | self.outlier_mask


def _matrix(x, name: str, ndim=(2,)) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim not in ndim:
        raise ValueError(f"{name} must have {' or '.join(map(str, ndim))} dimensions, got {arr.ndim}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def fisher_sensitivity(G) -> np.ndarray:
    """Diagonal Fisher information: squared gradients.

    A 3-D input is a stack of per-sample gradients and is averaged over the
    first axis, ``mean_d(g_d * g_d)``.
    """
    g = _matrix(G, "gradient", ndim=(2, 3))
    sq = g * g
    return sq.mean(axis=0) if g.ndim == 3 else sq


def extract_outliers(W) -> tuple[np.ndarray, np.ndarray]:
    """Mask entries further than three population standard deviations from the mean.

    Returns ``(mask, W with the masked entries zeroed)``.
    """
    w = _matrix(W, "weights")
    if w.size < 2:
        raise ValueError("outlier detection needs at least two weights")
    std = w.std()
    if std == 0:
        mask = np.zeros(w.shape, dtype=bool)
    else:
        mask = np.abs(w - w.mean()) > 3.0 * std
    return mask, np.where(mask, 0.0, w)


def _ceil_count(fraction: float, n: int) -> int:
    # round first so 0.0005 * 10000 is 5, not 6
    return min(n, math.ceil(round(fraction * n, 9)))


def extract_salient(W, fisher, fraction: float = DEFAULT_SALIENT_FRACTION,
                    exclude: np.ndarray | None = None, limit: int | None = None) -> np.ndarray:
    """Select the ``ceil(fraction * W.size)`` entries with the largest sensitivity.

    Ties go to the lower row-major index. Positions in ``exclude`` are never
    selected; ``limit`` caps the count further.
    """
    w = _matrix(W, "weights")
    lam = _matrix(fisher, "sensitivity")
    if lam.shape != w.shape:
        raise ValueError(f"shape mismatch: weights {w.shape} vs sensitivity {lam.shape}")
    if not 0 < fraction < 1:
        raise ValueError("salient fraction must lie in (0, 1)")
    count = _ceil_count(fraction, w.size)
    if limit is not None:
        count = min(count, max(limit, 0))
    flat = lam.ravel()
    candidates = np.arange(flat.size)
    if exclude is not None:
        candidates = candidates[~np.asarray(exclude, dtype=bool).ravel()]
    mask = np.zeros(flat.size, dtype=bool)
    if count > 0 and candidates.size:
        count = min(count, candidates.size)
        vals = flat[candidates]
        # kth largest value; everything above it is in, ties fill by index
        kth = np.partition(vals, vals.size - count)[vals.size - count]
        above = candidates[vals > kth]
        tied = candidates[vals == kth][:count - above.size]
        mask[above] = True
        mask[tied] = True
    return mask.reshape(w.shape)


def pad_to_tiles(M: np.ndarray, tile_rows: int, tile_cols: int) -> np.ndarray:
    rows, cols = M.shape
    pr = -(-rows // tile_rows) * tile_rows
    pc = -(-cols // tile_cols) * tile_cols
    if (pr, pc) == (rows, cols):
        return M
    out = np.zeros((pr, pc), dtype=M.dtype)
    out[:rows, :cols] = M
    return out


def to_tiles(M: np.ndarray, tile_rows: int, tile_cols: int) -> np.ndarray:
    """Reshape a padded matrix to ``(grid_rows, grid_cols, tile_rows, tile_cols)``."""
    pr, pc = M.shape
    return M.reshape(pr // tile_rows, tile_rows, pc // tile_cols, tile_cols).swapaxes(1, 2)


def from_tiles(T: np.ndarray) -> np.ndarray:
    gr, gc, tr, tc = T.shape
    return T.swapaxes(1, 2).reshape(gr * tr, gc * tc)


def tile_sensitivities(G, tile_rows: int = DEFAULT_TILE, tile_cols: int | None = None) -> TileGrid:
    """Per-tile mean squared gradient over the nominal tile area.

    Boundary tiles are zero-padded and still divided by the full tile area.
    A 3-D gradient stack is reduced with :func:`fisher_sensitivity` first.
    """
    tile_cols = tile_rows if tile_cols is None else tile_cols
    if tile_rows <= 0 or tile_cols <= 0:
        raise ValueError("tile dimensions must be positive")
    fisher = fisher_sensitivity(G)
    tiles = to_tiles(pad_to_tiles(fisher, tile_rows, tile_cols), tile_rows, tile_cols)
    sens = tiles.sum(axis=(2, 3)) / (tile_rows * tile_cols)
    return TileGrid(tile_rows, tile_cols, tiles.shape[0], tiles.shape[1], sens)


def compute_adaptive_k(sensitivities, retention: float = 0.95) -> tuple[float, np.ndarray]:
    """Classify tiles so the HIGH set is the shortest prefix retaining ``retention``.

    Tiles are ranked by sensitivity, descending (ties by index). The HIGH set
    is the smallest prefix whose cumulative share of the total reaches
    ``retention``; the rest are LOW. Returns ``(k, labels)`` where ``k`` is the
    LOW fraction. A zero total makes every tile LOW with ``k = 1``.

    Cumulative sums are exact (rational) so the cut is platform independent.
    """
    s = np.asarray(sensitivities, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("need at least one tile")
    if not 0 < retention <= 1:
        raise ValueError("retention must lie in (0, 1]")
    if not np.isfinite(s).all() or (s < 0).any():
        raise ValueError("tile sensitivities must be finite and nonnegative")
    labels = np.full(s.size, TileClass.LOW, dtype=np.int8)
    exact = [Fraction(float(x)) for x in s]
    total = sum(exact, Fraction(0))
    if total == 0:
        return 1.0, labels
    target = Fraction(retention) * total
    order = np.argsort(-s, kind="stable")
    cum = Fraction(0)
    m = s.size
    for rank, idx in enumerate(order):
        cum += exact[idx]
        if cum >= target:
            m = rank + 1
            break
    labels[order[:m]] = TileClass.HIGH
    return (s.size - m) / s.size, labels


def build_masks(W, G, tile_rows: int = DEFAULT_TILE, tile_cols: int | None = None,
                retention: float = 0.95, fraction: float = DEFAULT_SALIENT_FRACTION,
                cap: float = DEFAULT_OVERLAY_CAP) -> tuple[SensitivityMasks, TileGrid]:
    """Outliers first, then salient weights from the remainder, then tile classes.

    The overlay (outliers plus salient) is limited to ``floor(cap * N)``
    weights: salient picks shrink first, and if outliers alone exceed the cap
    only the most extreme ones are kept.
    """
    w = _matrix(W, "weights")
    fisher = fisher_sensitivity(G)
    if fisher.shape != w.shape:
        raise ValueError(f"shape mismatch: weights {w.shape} vs gradient {fisher.shape}")
    outliers, _ = extract_outliers(w)
    budget = math.floor(round(cap * w.size, 9))
    if outliers.sum() > budget:
        dev = np.abs(w - w.mean()).ravel()
        keep = np.argsort(-np.where(outliers.ravel(), dev, -np.inf), kind="stable")[:budget]
        outliers = np.zeros(w.size, dtype=bool)
        outliers[keep] = True
        outliers = outliers.reshape(w.shape)
    salient = extract_salient(w, fisher, fraction, exclude=outliers,
                              limit=budget - int(outliers.sum()))
    grid = tile_sensitivities(G, tile_rows, tile_cols)
    k, labels = compute_adaptive_k(grid.sensitivities, retention)
    return SensitivityMasks(salient, outliers, labels, k), grid
