import math

import numpy as np
import pytest

from halo.dvfs import LEVEL_TABLES, DvfsLevel, build_schedule
from halo.errors import ScheduleError, TimingViolationError
from halo.quantizer import OVERLAY_CLASS, FrequencyClass, QuantizedModel, SparseOverlay, quantize_overlay
from halo.simulator import (ArrayConfig, baseline_schedule, pass_layout, run_baseline, simulate, simulate_spmv,
                            tile_cycles, uniform_quantize)

TPU = LEVEL_TABLES["tpu"]
LOW_CB = (-128, -96, -64, -32, 0, 16, 32, 64, 96)


def one_class_model(values, tile=128, codebook=LOW_CB, overlay=None):
    """Model whose padded weights are the given int8 values, one class."""
    values = np.asarray(values, dtype=np.int8)
    rows, cols = values.shape
    gr, gc = rows // tile, cols // tile
    tiles = values.reshape(gr, tile, gc, tile).swapaxes(1, 2).copy()
    ov = overlay or SparseOverlay((rows, cols), np.zeros(rows + 1), [], [], np.ones(rows))
    cls = FrequencyClass(0, "low", 3.7, codebook)
    return QuantizedModel((rows, cols), (tile, tile), (cls,), np.zeros(gr * gc, dtype=np.int8),
                          tiles, np.ones(gr * gc, dtype=np.float32), ov)


def test_tile_cycles_closed_form():
    assert tile_cycles((1, 1), ArrayConfig(batch_cols=1)) == 2
    assert tile_cycles((128, 128), ArrayConfig()) == 510
    assert tile_cycles((128, 128), ArrayConfig(batch_cols=129)) == 511
    with pytest.raises(ValueError):
        tile_cycles((256, 128), ArrayConfig())


def test_pass_layout():
    a = ArrayConfig()
    assert pass_layout((128, 128), a) == (1, 510)
    assert pass_layout((32, 32), a) == (16, 510)
    assert pass_layout((32, 32), ArrayConfig(pack_tiles=False)) == (1, 32 + 128 + 32 + 32 - 2)
    assert pass_layout((48, 128), a) == (2, 96 + 128 + 96 + 128 - 2)


def test_single_tile_speedup_ratio(profile):
    rng = np.random.default_rng(0)
    m = one_class_model(rng.choice(LOW_CB, size=(128, 128)))
    arr = ArrayConfig()
    fast = simulate(m, build_schedule(m.tile_class, {0: DvfsLevel(3.7, 1.2)}, 0.0), arr, profile)
    slow = simulate(m, build_schedule(m.tile_class, {0: DvfsLevel(1.9, 1.0)}, 0.0), arr, profile)
    assert slow.exec_time_s / fast.exec_time_s == pytest.approx(3.7 / 1.9, abs=1e-6)
    assert fast.compute_time_s == 510 / 3.7e9


def test_energy_additivity_and_nonnegative(profile):
    rng = np.random.default_rng(1)
    m = one_class_model(rng.choice(LOW_CB, size=(256, 256)))
    r = simulate(m, build_schedule(m.tile_class, {0: TPU[2]}), ArrayConfig(), profile)
    e = r.energy
    assert e.total == e.static + e.core_dynamic + e.buffer + e.memory
    assert min(e.static, e.core_dynamic, e.buffer, e.memory) >= 0
    assert r.to_json()["energy"]["total"] == e.total
    assert r.exec_time_s == r.compute_time_s + 1e-6


def test_core_energy_closed_form(profile):
    vals = np.zeros((128, 128), dtype=np.int8)
    vals[0, :5] = 64
    m = one_class_model(vals)
    r = simulate(m, build_schedule(m.tile_class, {0: TPU[2]}), ArrayConfig(v_ref=1.0), profile)
    exp = (5 * profile.switch_energy(64) + (128 * 128 - 5) * profile.switch_energy(0)) * 128 * 1.2 ** 2
    assert r.energy.core_dynamic == pytest.approx(exp, rel=1e-12)


def test_all_zero_weights_minimal_core_energy(profile):
    zero = one_class_model(np.zeros((128, 128)))
    other = one_class_model(np.full((128, 128), 32))
    sched = build_schedule(zero.tile_class, {0: TPU[2]})
    assert profile.switch_energy(0) == profile.energy.min()
    assert simulate(zero, sched, ArrayConfig(), profile).energy.core_dynamic < \
        simulate(other, sched, ArrayConfig(), profile).energy.core_dynamic


def test_doubling_frequency_halves_compute_time(profile):
    m = one_class_model(np.zeros((256, 128)))
    fast_profile = profile.__class__(np.ones(256, dtype=np.int64), profile.energy)
    t1 = simulate(m, build_schedule(m.tile_class, {0: DvfsLevel(1.0, 1.0)}, 0.0), ArrayConfig(), fast_profile)
    t2 = simulate(m, build_schedule(m.tile_class, {0: DvfsLevel(2.0, 1.0)}, 0.0), ArrayConfig(), fast_profile)
    assert t2.compute_time_s * 2 == t1.compute_time_s
    assert t2.energy.static < t1.energy.static


def test_timing_violation(profile):
    m = one_class_model(np.full((128, 128), -127), codebook=tuple(range(-127, 128)))
    with pytest.raises(TimingViolationError):
        simulate(m, build_schedule(m.tile_class, {0: TPU[2]}), ArrayConfig(), profile)


def test_overlay_runs_at_full_range_level(profile):
    W = np.zeros((128, 128))
    W[3, 4] = 1.0
    ov = quantize_overlay(W, W != 0, np.zeros_like(W, dtype=bool))
    m = one_class_model(np.zeros((128, 128)), overlay=ov)
    with pytest.raises(ScheduleError):
        simulate(m, build_schedule(m.tile_class, {0: TPU[2]}), ArrayConfig(), profile)
    with pytest.raises(TimingViolationError):
        simulate(m, build_schedule(m.tile_class, {0: TPU[2], OVERLAY_CLASS: TPU[2]}, overlay_class=OVERLAY_CLASS),
                 ArrayConfig(), profile)
    r = simulate(m, build_schedule(m.tile_class, {0: TPU[2], OVERLAY_CLASS: TPU[0]}, overlay_class=OVERLAY_CLASS),
                 ArrayConfig(), profile)
    assert r.transitions == 2 and r.groups[1].spmv_time_s == 1 / 1.9e9  # 128 ops on 1024 lanes


def test_schedule_must_cover_tiles(profile):
    m = one_class_model(np.zeros((256, 128)))
    s = build_schedule([0], {0: TPU[2]})
    with pytest.raises(ScheduleError):
        simulate(m, s, ArrayConfig(), profile)


def test_spmv_examples(profile):
    empty = SparseOverlay((3, 4), np.zeros(4), [], [], np.ones(3))
    r = simulate_spmv(empty, np.ones(4), TPU[0], profile)
    assert not r.result.any() and r.time_s == 0 and r.energy == 0
    one = SparseOverlay((2, 3), [0, 1, 1], [2], [127], [0.5, 1.0])
    r = simulate_spmv(one, np.array([0.0, 0.0, 1.0]), TPU[0], profile)
    assert r.result.tolist() == [127 * 0.5, 0.0]
    assert r.time_s == 1 / 1.9e9 and r.energy == profile.energy.max()
    with pytest.raises(ValueError):
        simulate_spmv(one, np.ones(2), TPU[0], profile)


def test_spmv_matches_dense_oracle(profile):
    rng = np.random.default_rng(4)
    W = rng.normal(size=(60, 80))
    ov = quantize_overlay(W, rng.random(W.shape) < 0.05, np.zeros(W.shape, dtype=bool))
    b = rng.normal(size=80)
    r = simulate_spmv(ov, b, TPU[0], profile, lanes=4)
    dense = ov.to_dense() @ b
    assert np.allclose(r.result, dense, rtol=1e-12, atol=1e-12)
    assert r.cycles == math.ceil(ov.nnz / 4)


def test_baseline_at_slowest_level(profile):
    rng = np.random.default_rng(5)
    W = rng.normal(size=(256, 256))
    base = uniform_quantize(W, 8)
    s = baseline_schedule(base, TPU, profile)
    assert [g.level for g in s.groups] == [DvfsLevel(1.9, 1.0)]
    r = run_baseline(base, ArrayConfig(), TPU, profile)
    assert r.mac_ops == 256 * 256 * 128 and r.padding_ops == 0
    assert np.abs(base.values).max() <= 127


def test_all_low_speedup_range(profile):
    rng = np.random.default_rng(6)
    W = rng.normal(size=(512, 512))
    halo = one_class_model(rng.choice(LOW_CB, size=(512, 512)))
    arr = ArrayConfig()
    h = simulate(halo, build_schedule(halo.tile_class, {0: TPU[2]}), arr, profile)
    b = run_baseline(uniform_quantize(W, 8), arr, TPU, profile)
    assert 1 < b.exec_time_s / h.exec_time_s <= 3.7 / 1.9


def test_work_conservation_across_tile_sizes(profile):
    rng = np.random.default_rng(8)
    W = rng.normal(size=(200, 300))
    ops = {t: run_baseline(uniform_quantize(W, 8, (t, t)), ArrayConfig(), TPU, profile) for t in (32, 64, 128)}
    assert len({r.mac_ops for r in ops.values()}) == 1
    assert ops[128].padding_ops == (256 * 384 - 200 * 300) * 128


def test_reports_bit_identical(profile):
    rng = np.random.default_rng(9)
    m = one_class_model(rng.choice(LOW_CB, size=(256, 256)))
    s = build_schedule(m.tile_class, {0: TPU[2]})
    assert simulate(m, s, ArrayConfig(), profile).to_json() == simulate(m, s, ArrayConfig(), profile).to_json()


def test_activation_shape_checks(profile):
    m = one_class_model(np.zeros((128, 128)))
    s = build_schedule(m.tile_class, {0: TPU[2]})
    r = simulate(m, s, ArrayConfig(), profile, activations=np.zeros((128, 64), dtype=np.int8))
    assert r.compute_time_s == (128 + 64 + 128 + 128 - 2) / 3.7e9
    with pytest.raises(ValueError):
        simulate(m, s, ArrayConfig(), profile, activations=np.zeros((64, 64)))


def test_array_config_validation():
    with pytest.raises(ValueError):
        ArrayConfig(array_rows=0)
    with pytest.raises(ValueError):
        ArrayConfig(fill_drain_model="output_stationary")
