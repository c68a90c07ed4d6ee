import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helpers import single_class_model
from halo.errors import ContainerError
from halo.mac import WEIGHT_VALUES, WeightProfile
from halo.quantizer import (HIGH_CLASS, LOW_CLASS, FrequencyClass, QuantConfig, QuantizedModel, SparseOverlay,
                            build_codebook, dequantize, effective_bitwidth, fisher_weighted_error,
                            full_range_class, load_model, quantize_model, quantize_overlay, quantize_tile,
                            save_model, snap_to_codebook, tile_scale)
from halo.sensitivity import compute_adaptive_k, tile_sensitivities

LOW_CB = (-128, -96, -64, -32, 0, 16, 32, 64, 96)
HIGH_CB = (-128, -120, -112, -96, -64, -48, -32, -16, 0, 8, 16, 32, 64, 80, 96, 112)


def test_default_codebooks(profile):
    low, high = QuantConfig().classes(profile)
    assert low.codebook == LOW_CB and high.codebook == HIGH_CB
    assert set(low.codebook) <= set(high.codebook)
    assert max(map(abs, low.codebook)) == max(map(abs, high.codebook)) == 128


def test_codebook_containment(profile):
    freqs = sorted(set(np.round(profile.max_freq_ghz, 6).tolist()))
    books = [set(build_codebook(profile, f)) for f in freqs if f <= profile.max_freq_ghz.max()]
    for hi, lo in zip(books[1:], books):
        assert hi <= lo


def test_codebook_rules():
    delay = np.full(256, 500)
    delay[[128, 129, 127, 130]] = 100  # 0, 1, -1, 2 are fast
    p = WeightProfile(delay, np.ones(256))
    assert build_codebook(p, 5.0) == (-1, 0, 1, 2)
    assert build_codebook(p, 5.0, max_size=3) == (-1, 0, 1)
    assert build_codebook(p, 1.0, max_size=256) == tuple(range(-128, 128))
    with pytest.raises(ValueError, match="no weight value"):
        build_codebook(p, 20.0)


def test_frequency_class_validation():
    with pytest.raises(ValueError):
        FrequencyClass(0, "x", 1.0, (1, 2))  # no zero
    with pytest.raises(ValueError):
        FrequencyClass(0, "x", 1.0, (0, 0))
    assert FrequencyClass(0, "x", 1.0, (-1, 0, 1)).bits == pytest.approx(math.log2(3))
    assert full_range_class().codebook == tuple(range(-127, 128))


def test_quantize_tile_matches_bruteforce(rng):
    for cb in (LOW_CB, HIGH_CB, (-3, 0, 1, 7)):
        tiles = rng.normal(size=(500, 6, 6)) * rng.lognormal(0, 2, size=(500, 1, 1))
        for tile in tiles:
            idx, s = quantize_tile(tile, cb)
            assert s == np.float32(np.abs(tile).max() / max(map(abs, cb)))
            assert np.array_equal(idx, oracles.nearest_index(tile / np.float64(s), cb))


def test_snap_ties_go_to_smaller():
    assert snap_to_codebook(np.array([0.5, -0.5, 100.0, -300.0]), (-1, 0, 1)).tolist() == [1, 0, 2, 0]


def test_zero_tile():
    idx, s = quantize_tile(np.zeros((3, 3)), LOW_CB)
    assert s == 1.0 and (np.asarray(LOW_CB)[idx] == 0).all()
    assert tile_scale(np.zeros(0), LOW_CB) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=40),
       st.sampled_from([(-2, -1, 0, 1, 2), (-64, -8, 0, 8, 64), tuple(range(-127, 128))]))
def test_requantizing_dequantized_tile_is_stable(vals, cb):
    tile = np.array(vals)
    idx, s = quantize_tile(tile, cb)
    deq = np.asarray(cb)[idx] * np.float64(s)
    idx2, s2 = quantize_tile(deq, cb)
    if np.abs(deq).max() > 0:
        assert np.array_equal(np.asarray(cb)[idx2] * np.float64(s2), deq) or np.allclose(
            np.asarray(cb)[idx2] * np.float64(s2), deq, rtol=1e-6)


def test_overlay_round_trip_error(rng):
    W = rng.normal(size=(50, 40))
    out_m = np.abs(W) > 2.2
    sal = (rng.random(W.shape) < 0.02) & ~out_m
    ov = quantize_overlay(W, out_m, sal)
    mask = out_m | sal
    assert ov.nnz == mask.sum()
    dense = ov.to_dense()
    err = np.abs(dense - np.where(mask, W, 0.0))
    assert (err <= ov.channel_scales.astype(np.float64)[:, None] / 2 + 1e-12).all()
    assert np.array_equal(dense != 0, mask & (W != 0))


def test_overlay_validation():
    with pytest.raises(ValueError):
        SparseOverlay((2, 2), [0, 2, 1], [0, 1], [1, 1], [1, 1])
    with pytest.raises(IndexError):
        SparseOverlay((1, 2), [0, 1], [5], [1], [1])
    with pytest.raises(ValueError):
        SparseOverlay((1, 3), [0, 2], [2, 1], [1, 1], [1])
    with pytest.raises(ValueError, match="overlap"):
        quantize_overlay(np.ones((2, 2)), np.eye(2, dtype=bool), np.eye(2, dtype=bool))


def test_quantize_model_structure(rng, profile):
    W = rng.normal(0, 0.02, size=(200, 300))
    G = rng.standard_t(3, size=W.shape)
    cfg = QuantConfig(tile_rows=64, retention=0.9)
    m = quantize_model(W, G, cfg, profile)
    m.validate()
    assert m.grid == (4, 5) and m.padding_count() == 256 * 320 - 200 * 300
    _, labels = compute_adaptive_k(tile_sensitivities(G, 64).sensitivities, 0.9)
    assert np.array_equal(m.tile_class, labels)
    assert m.overlay.density <= 0.005 + 1 / W.size
    assert m.profile_digest == profile.digest()
    deq = dequantize(m)
    assert deq.shape == W.shape
    ov = m.overlay
    assert np.array_equal(deq[ov.row_ids(), ov.col_idx], ov.dequantized_values())
    # error per weight is at most the codebook's worst gap (interior half-gap or
    # the stretch between the largest code and max|c|) times the tile scale
    for cls in m.classes:
        cb = np.asarray(cls.codebook)
        ref = np.abs(cb).max()
        gap = max(np.diff(cb).max() / 2, ref - cb.max(), ref + cb.min())
        for t in np.nonzero(m.tile_class == cls.id)[0]:
            i, j = divmod(int(t), m.grid[1])
            blk = (slice(i * 64, min(200, i * 64 + 64)), slice(j * 64, min(300, j * 64 + 64)))
            keep = ~np.isin(np.arange(W.size).reshape(W.shape)[blk],
                            ov.row_ids() * W.shape[1] + ov.col_idx)
            err = np.abs(deq[blk] - W[blk])[keep]
            assert err.max() <= gap * float(m.scales[t]) * (1 + 1e-6)


def test_higher_retention_never_increases_error(rng, profile):
    W = rng.normal(0, 0.02, size=(256, 256))
    G = rng.normal(size=W.shape) * rng.lognormal(0, 2, size=(8, 1, 8, 1)).repeat(32, 1).repeat(32, 3).reshape(256, 256)
    errs = [fisher_weighted_error(W, G, quantize_model(W, G, QuantConfig(32, retention=r), profile))
            for r in (0.5, 0.8, 0.95, 1.0)]
    assert all(a >= b for a, b in zip(errs, errs[1:]))


def test_zero_gradient_is_all_low(rng, profile):
    W = rng.normal(size=(64, 64))
    m = quantize_model(W, np.zeros_like(W), QuantConfig(32), profile)
    assert (m.tile_class == LOW_CLASS).all() and m.k_fraction == 1.0


@pytest.mark.parametrize("cb,bits", [(LOW_CB, math.log2(9)), (HIGH_CB, 4.0)])
def test_effective_bitwidth_single_class(rng, cb, bits):
    m = single_class_model(rng.normal(size=(10, 14)), cb)
    assert effective_bitwidth(m) == pytest.approx(bits, abs=1e-12)


def test_effective_bitwidth_hand_example(profile):
    # 8x8 matrix, 2x4 grid of 4x4 tiles... here one tile HIGH, three LOW, two overlay weights
    W = np.zeros((8, 8))
    m = single_class_model(W, LOW_CB)
    high = FrequencyClass(HIGH_CLASS, "high", 2.4, HIGH_CB)
    m.classes = m.classes + (high,)
    m.tile_class = np.array([HIGH_CLASS, 0, 0, 0], dtype=np.int8)
    m.overlay = SparseOverlay((8, 8), [0, 2] + [2] * 7, [0, 5], [1, 1], np.ones(8))
    # tile 0: 15 weights at 4 bits + 1 overlay; tile 1: 15 at log2 9 + 1 overlay
    expect = (15 * 4 + 15 * math.log2(9) + 32 * math.log2(9) + 2 * 8) / 64
    assert effective_bitwidth(m) == pytest.approx(expect, abs=1e-12)


def test_save_load_round_trip(tmp_path, rng, profile):
    W = rng.normal(size=(70, 90))
    m = quantize_model(W, rng.normal(size=W.shape), QuantConfig(32, retention=0.7), profile, name="L")
    save_model(m, tmp_path / "m")
    q = load_model(tmp_path / "m")
    assert np.array_equal(dequantize(q), dequantize(m))
    assert np.array_equal(q.tile_class, m.tile_class) and q.classes == m.classes
    assert q.name == "L" and q.k_fraction == m.k_fraction
    raw = (tmp_path / "m" / "scales.f32").read_bytes()
    (tmp_path / "m" / "scales.f32").write_bytes(raw[:-1] + bytes([raw[-1] ^ 1]))
    with pytest.raises(ContainerError, match="checksum"):
        load_model(tmp_path / "m")
    (tmp_path / "m" / "tiles.i8").unlink()
    with pytest.raises(ContainerError):
        load_model(tmp_path / "m")
    with pytest.raises(ContainerError):
        load_model(tmp_path / "missing")


def test_weight_values_range():
    assert WEIGHT_VALUES[0] == -128 and WEIGHT_VALUES[-1] == 127
