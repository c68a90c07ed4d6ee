"""Transport-delay timing simulation of a GateNetlist.

Two independent engines:

* :func:`simulate_transitions` is levelized and bit-parallel. Each net holds
  a ``(T + 1, words)`` array of packed 64-bit words, one bit per activation
  transition and one row per picosecond, where ``T`` is the static longest
  path. A gate's output at time ``t`` is the gate function of its inputs at
  ``t - delay``.
* :func:`event_simulate` is a scalar event-queue simulator used as a
  cross-check and for inspecting single transitions.

Both model pure transport delay, so glitches propagate and are counted as
toggles.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .netlist import (ACC_BITS, ACT_BITS, CONST1, WEIGHT_BITS, GateNetlist,
                      eval_gate, steady_state)

_ALL = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass
class TransitionBatch:
    """Aggregate timing of one weight over a batch of activation transitions."""

    n: int
    worst_delay: int
    toggle_energy: float
    settle_times: np.ndarray | None = None


def _pack(bits: np.ndarray) -> np.ndarray:
    """Pack a bool vector into little-endian uint64 words."""
    n = bits.shape[-1]
    words = -(-n // 64)
    padded = np.zeros(bits.shape[:-1] + (words * 64,), dtype=bool)
    padded[..., :n] = bits
    return np.packbits(padded, axis=-1, bitorder="little").view(np.uint64)


def _input_words(values: np.ndarray, width: int) -> list[np.ndarray]:
    u = values.astype(np.int64) & ((1 << width) - 1)
    return [_pack(((u >> k) & 1).astype(bool)) for k in range(width)]


def _const_words(value: int, width: int, words: int) -> list[np.ndarray]:
    u = value & ((1 << width) - 1)
    return [np.full(words, _ALL if (u >> k) & 1 else 0, dtype=np.uint64) for k in range(width)]


def _settled(netlist: GateNetlist, pi_words: dict[int, np.ndarray], words: int) -> dict[int, np.ndarray]:
    vals = dict(pi_words)
    vals[0] = np.zeros(words, dtype=np.uint64)
    vals[CONST1] = np.full(words, _ALL, dtype=np.uint64)
    for g in netlist.gates:
        vals[g.output] = eval_gate(g.kind, [vals[n] for n in g.inputs])
    return vals


def simulate_transitions(netlist: GateNetlist, w: int, a_prev: np.ndarray, a_next: np.ndarray,
                         acc: int, *, per_transition: bool = False) -> TransitionBatch:
    """Simulate ``a_prev[k] -> a_next[k]`` for every k with the weight held at ``w``.

    Returns the worst settling time over all outputs and transitions, and the
    summed energy-weighted toggle count over every gate output (not averaged).
    With ``per_transition`` the settling time of each transition is returned
    as well.
    """
    a_prev = np.asarray(a_prev)
    a_next = np.asarray(a_next)
    n = a_prev.shape[0]
    if n == 0:
        raise ValueError("empty transition batch")
    words = -(-n // 64)
    tail = np.full(words, _ALL, dtype=np.uint64)
    if n % 64:
        tail[-1] = np.uint64((1 << (n % 64)) - 1)

    fixed = {}
    for nets, value, width in ((netlist.weight_inputs, w, WEIGHT_BITS),
                               (netlist.accumulator_inputs, acc, ACC_BITS)):
        fixed.update(zip(nets, _const_words(value, width, words)))
    old_pi = dict(fixed)
    old_pi.update(zip(netlist.activation_inputs, _input_words(a_prev, ACT_BITS)))
    old = _settled(netlist, old_pi, words)

    T = netlist.longest_path()
    wave: dict[int, np.ndarray] = {0: old[0][None, :], CONST1: old[CONST1][None, :]}
    for net, word in fixed.items():
        wave[net] = word[None, :]
    for net, word in zip(netlist.activation_inputs, _input_words(a_next, ACT_BITS)):
        wave[net] = word[None, :]

    outputs = set(netlist.outputs)
    energy = 0
    out_change = np.zeros((T, words), dtype=np.uint64)
    for g in netlist.gates:
        d = g.delay
        out = np.empty((T + 1, words), dtype=np.uint64)
        out[:d] = old[g.output]
        if d <= T:
            ins = [wave[x][: T + 1 - d] for x in g.inputs]
            out[d:] = eval_gate(g.kind, ins)
        wave[g.output] = out
        change = (out[1:] ^ out[:-1]) & tail
        if g.energy_weight:
            energy += g.energy_weight * int(np.bitwise_count(change).sum())
        if g.output in outputs:
            out_change |= change

    rows = np.flatnonzero(out_change.any(axis=1))
    worst = int(rows[-1]) + 1 if rows.size else 0
    settle = None
    if per_transition:
        settle = np.zeros(n, dtype=np.int64)
        seen = np.zeros(words, dtype=np.uint64)
        for t in range(T - 1, -1, -1):
            fresh = out_change[t] & ~seen
            if fresh.any():
                bits = np.unpackbits(fresh.view(np.uint8), bitorder="little")[:n].astype(bool)
                settle[bits] = t + 1
                seen |= fresh
    return TransitionBatch(n=n, worst_delay=worst, toggle_energy=float(energy), settle_times=settle)


def event_simulate(netlist: GateNetlist, w: int, a_prev: int, a_next: int, acc: int) -> tuple[int, float]:
    """Event-queue simulation of one activation transition.

    Returns ``(settling time of the outputs, energy-weighted toggle count)``.
    """
    vals = steady_state(netlist, w, a_prev, acc).astype(np.int64).tolist()
    new = steady_state(netlist, w, a_next, acc)
    queue: list[tuple[int, int, int]] = []
    for net in netlist.activation_inputs:
        if vals[net] != new[net]:
            heapq.heappush(queue, (0, net, int(new[net])))

    driver = {g.output: g for g in netlist.gates}
    outputs = set(netlist.outputs)
    settle = 0
    energy = 0.0
    while queue:
        t = queue[0][0]
        touched: set[int] = set()
        while queue and queue[0][0] == t:
            _, net, value = heapq.heappop(queue)
            if vals[net] == value:
                continue
            vals[net] = value
            if net in driver:
                energy += driver[net].energy_weight
            if net in outputs:
                settle = max(settle, t)
            touched.update(netlist.fanout[net])
        for gi in sorted(touched):
            g = netlist.gates[gi]
            out = eval_gate(g.kind, [vals[x] for x in g.inputs]) & 1
            heapq.heappush(queue, (t + g.delay, g.output, out))
    return settle, energy
