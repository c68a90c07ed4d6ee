"""Gate-level netlist of a signed 8-bit multiply-accumulate unit.

The default circuit is a Baugh-Wooley ripple-carry array multiplier whose
16-bit product is sign-extended into a 32-bit ripple-carry accumulator:
``y = w * a + acc`` in two's complement, modulo 2**32.

Nets are plain integers. Net 0 is tied low and net 1 is tied high; every
other net is either a primary input or the output of exactly one gate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Mapping, Sequence

import numpy as np

CONST0 = 0
CONST1 = 1

WEIGHT_BITS = 8
ACT_BITS = 8
ACC_BITS = 32


class GateKind(IntEnum):
    AND = 0
    OR = 1
    XOR = 2
    NOT = 3
    NAND = 4
    FULL_ADDER_SUM = 5
    FULL_ADDER_CARRY = 6


ARITY = {
    GateKind.AND: 2,
    GateKind.OR: 2,
    GateKind.XOR: 2,
    GateKind.NOT: 1,
    GateKind.NAND: 2,
    GateKind.FULL_ADDER_SUM: 3,
    GateKind.FULL_ADDER_CARRY: 3,
}

DEFAULT_DELAYS_PS = {
    GateKind.AND: 1,
    GateKind.OR: 1,
    GateKind.XOR: 2,
    GateKind.NOT: 1,
    GateKind.NAND: 1,
    GateKind.FULL_ADDER_SUM: 2,
    GateKind.FULL_ADDER_CARRY: 2,
}


def eval_gate(kind: GateKind, ins: Sequence):
    """Evaluate one gate on ints, bools or packed numpy words alike."""
    if kind == GateKind.AND:
        return ins[0] & ins[1]
    if kind == GateKind.OR:
        return ins[0] | ins[1]
    if kind == GateKind.XOR:
        return ins[0] ^ ins[1]
    if kind == GateKind.NOT:
        return ~ins[0]
    if kind == GateKind.NAND:
        return ~(ins[0] & ins[1])
    if kind == GateKind.FULL_ADDER_SUM:
        return ins[0] ^ ins[1] ^ ins[2]
    if kind == GateKind.FULL_ADDER_CARRY:
        a, b, c = ins
        return (a & b) | (a & c) | (b & c)
    raise ValueError(f"unknown gate kind {kind!r}")


@dataclass(frozen=True)
class Gate:
    kind: GateKind
    inputs: tuple[int, ...]
    output: int
    delay: int
    energy_weight: float = 1.0


@dataclass(frozen=True)
class GateNetlist:
    """Immutable combinational netlist in topological order."""

    gates: tuple[Gate, ...]
    weight_inputs: tuple[int, ...]
    activation_inputs: tuple[int, ...]
    accumulator_inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    num_nets: int
    _fanout: tuple[tuple[int, ...], ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        self.validate()
        fanout: list[list[int]] = [[] for _ in range(self.num_nets)]
        for gi, g in enumerate(self.gates):
            for n in set(g.inputs):
                fanout[n].append(gi)
        object.__setattr__(self, "_fanout", tuple(tuple(f) for f in fanout))

    @property
    def primary_inputs(self) -> tuple[int, ...]:
        return self.weight_inputs + self.activation_inputs + self.accumulator_inputs

    @property
    def fanout(self) -> tuple[tuple[int, ...], ...]:
        return self._fanout

    def validate(self) -> None:
        if len(self.weight_inputs) != WEIGHT_BITS or len(self.activation_inputs) != ACT_BITS:
            raise ValueError("netlist needs 8 weight and 8 activation input bits")
        if len(self.accumulator_inputs) != ACC_BITS or len(self.outputs) != ACC_BITS:
            raise ValueError("netlist needs 32 accumulator inputs and 32 outputs")
        defined = {CONST0, CONST1, *self.primary_inputs}
        if len(defined) != 2 + len(self.primary_inputs):
            raise ValueError("primary inputs must be distinct non-constant nets")
        for gi, g in enumerate(self.gates):
            if len(g.inputs) != ARITY[g.kind]:
                raise ValueError(f"gate {gi}: {g.kind.name} takes {ARITY[g.kind]} inputs")
            if not isinstance(g.delay, (int, np.integer)) or g.delay <= 0:
                raise ValueError(f"gate {gi}: delay must be a positive integer, got {g.delay!r}")
            if g.energy_weight < 0:
                raise ValueError(f"gate {gi}: negative energy weight")
            missing = [n for n in g.inputs if n not in defined]
            if missing:
                raise ValueError(f"gate {gi}: inputs {missing} used before definition")
            if g.output in defined:
                raise ValueError(f"gate {gi}: net {g.output} driven twice")
            defined.add(g.output)
        undriven = [n for n in self.outputs if n not in defined]
        if undriven:
            raise ValueError(f"outputs {undriven} are not driven")
        if not all(0 <= n < self.num_nets for n in defined):
            raise ValueError("net id out of range")

    def longest_path(self) -> int:
        """Static arrival time of the slowest net, ignoring logic values."""
        arrival = np.zeros(self.num_nets, dtype=np.int64)
        for g in self.gates:
            arrival[g.output] = max(arrival[n] for n in g.inputs) + g.delay
        return int(arrival.max())

    def with_energy_weights(self, weights: Mapping[int, float] | float) -> "GateNetlist":
        """Return a copy with per-gate energy weights replaced.

        ``weights`` is either one factor applied to every gate or a mapping
        from gate index to weight (unlisted gates keep theirs).
        """
        if isinstance(weights, Mapping):
            gates = tuple(
                Gate(g.kind, g.inputs, g.output, g.delay, float(weights.get(i, g.energy_weight)))
                for i, g in enumerate(self.gates)
            )
        else:
            gates = tuple(
                Gate(g.kind, g.inputs, g.output, g.delay, g.energy_weight * float(weights))
                for g in self.gates
            )
        return GateNetlist(gates, self.weight_inputs, self.activation_inputs,
                           self.accumulator_inputs, self.outputs, self.num_nets)


class _Builder:
    def __init__(self, delays: Mapping[GateKind, int]):
        self.delays = {**DEFAULT_DELAYS_PS, **delays}
        self.next_net = 2
        self.gates: list[Gate] = []

    def new_nets(self, n: int) -> tuple[int, ...]:
        nets = tuple(range(self.next_net, self.next_net + n))
        self.next_net += n
        return nets

    def gate(self, kind: GateKind, *inputs: int) -> int:
        out = self.new_nets(1)[0]
        self.gates.append(Gate(kind, tuple(inputs), out, int(self.delays[kind])))
        return out

    def add(self, bits: list[int]) -> tuple[int, int]:
        """Reduce up to three bits of one column to (sum, carry)."""
        if len(bits) == 3:
            return (self.gate(GateKind.FULL_ADDER_SUM, *bits),
                    self.gate(GateKind.FULL_ADDER_CARRY, *bits))
        if len(bits) == 2:
            return self.gate(GateKind.XOR, *bits), self.gate(GateKind.AND, *bits)
        raise ValueError("adder takes two or three bits")

    def sum_only(self, bits: list[int]) -> int:
        if len(bits) == 3:
            return self.gate(GateKind.FULL_ADDER_SUM, *bits)
        return self.gate(GateKind.XOR, *bits)


def build_default_mac_netlist(delays: Mapping[GateKind, int] | None = None, carry_save: bool = False) -> GateNetlist:
    """Build the reference signed MAC: Baugh-Wooley array + ripple accumulator.

    Partial products ``a_i & w_j`` are formed with AND gates, except the
    sign-mixed terms (exactly one of i, j equal to 7) which use NAND; the
    constant ones Baugh-Wooley requires at columns 8 and 15 come from the
    tied-high net. Each weight bit contributes one row, added into the
    running partial sum by its own ripple-carry adder, so a row whose weight
    bit is zero has constant inputs and no carry activity. A second
    ripple-carry adder adds the sign-extended product to the accumulator.

    ``carry_save=True`` builds the carry-save variant instead (rows folded
    without horizontal carries, one final ripple adder); its critical path
    depends only on the lowest set weight bit.
    """
    b = _Builder(delays or {})
    w = b.new_nets(WEIGHT_BITS)
    a = b.new_nets(ACT_BITS)
    acc = b.new_nets(ACC_BITS)
    n = WEIGHT_BITS
    top = n - 1

    def pp(i: int, j: int) -> int:
        kind = GateKind.NAND if (i == top) != (j == top) else GateKind.AND
        return b.gate(kind, a[i], w[j])

    # Baugh-Wooley correction constants, per product column
    cols: list[list[int]] = [[] for _ in range(2 * n)]
    cols[n].append(CONST1)
    cols[2 * n - 1].append(CONST1)

    if carry_save:
        product = _carry_save_rows(b, pp, cols, n)
    else:
        product = _ripple_rows(b, pp, cols, n)

    # accumulator: acc + sign_extend(product) over 32 bits, ripple carry
    sign = product[-1]
    ext = product + [sign] * (ACC_BITS - len(product))
    outputs = []
    carry = None
    for k in range(ACC_BITS):
        bits = [acc[k], ext[k]] + ([carry] if carry is not None else [])
        if k == ACC_BITS - 1:
            outputs.append(b.sum_only(bits))
        else:
            s, carry = b.add(bits)
            outputs.append(s)

    return GateNetlist(tuple(b.gates), w, a, acc, tuple(outputs), b.next_net)


def _carry_save_rows(b: _Builder, pp, cols: list[list[int]], n: int) -> list[int]:
    # row j adds partial products of weight bit j at column i + j
    sums = [pp(i, 0) for i in range(n)]
    carries: list[int | None] = [None] * (2 * n)
    product: list[int] = [sums[0]]
    running = {i: sums[i] for i in range(1, n)}
    for j in range(1, n):
        new_running: dict[int, int] = {}
        new_carries: list[int | None] = [None] * (2 * n)
        for i in range(n):
            col = i + j
            bits = [pp(i, j)]
            if col in running:
                bits.append(running[col])
            if carries[col] is not None:
                bits.append(carries[col])
            if len(bits) == 1:
                new_running[col] = bits[0]
                continue
            s, c = b.add(bits)
            new_running[col] = s
            new_carries[col + 1] = c
        product.append(new_running.pop(j))
        running = new_running
        carries = new_carries

    # ripple-carry the remaining columns plus the constants; the carry out
    # of the top column is dropped (product is exact mod 2**(2n))
    carry: int | None = None
    for col in range(n, 2 * n):
        bits = [x for x in (running.get(col), carries[col], carry) if x is not None]
        bits += cols[col]
        if len(bits) == 1:
            product.append(bits[0])
            carry = None
        elif col == 2 * n - 1:
            product.append(b.sum_only(bits))
        else:
            s, carry = b.add(bits)
            product.append(s)
    return product


def _ripple_rows(b: _Builder, pp, cols: list[list[int]], n: int) -> list[int]:
    # running partial sum, one net (or None) per product column
    width = 2 * n
    vec: list[int | None] = [None] * width
    for i in range(n):
        vec[i] = pp(i, 0)
    for col in range(width):
        for const in cols[col]:
            vec[col] = const if vec[col] is None else _fold(b, vec, col, const, width)
    for j in range(1, n):
        carry: int | None = None
        for col in range(j, width):
            bits = [x for x in (vec[col], carry) if x is not None]
            if col < j + n:
                bits.append(pp(col - j, j))
            elif carry is None:
                break
            if len(bits) == 1:
                vec[col], carry = bits[0], None
            elif col == width - 1:
                vec[col], carry = b.sum_only(bits), None
            else:
                vec[col], carry = b.add(bits)
    return [CONST0 if x is None else x for x in vec]


def _fold(b: _Builder, vec: list[int | None], col: int, bit: int, width: int) -> int:
    # add a single bit into column col of vec, rippling the carry upward
    s, carry = b.add([vec[col], bit])
    k = col + 1
    while k < width and carry is not None:
        if vec[k] is None:
            vec[k], carry = carry, None
        elif k == width - 1:
            vec[k], carry = b.sum_only([vec[k], carry]), None
        else:
            vec[k], carry = b.add([vec[k], carry])
        k += 1
    return s


def _to_bits(value: int, width: int) -> list[int]:
    value &= (1 << width) - 1
    return [(value >> k) & 1 for k in range(width)]


def steady_state(netlist: GateNetlist, w: int, a: int, acc: int) -> np.ndarray:
    """Zero-delay evaluation: settled value of every net as a uint8 array."""
    vals = np.zeros(netlist.num_nets, dtype=np.uint8)
    vals[CONST1] = 1
    for nets, value, width in ((netlist.weight_inputs, w, WEIGHT_BITS),
                               (netlist.activation_inputs, a, ACT_BITS),
                               (netlist.accumulator_inputs, acc, ACC_BITS)):
        vals[list(nets)] = _to_bits(value, width)
    for g in netlist.gates:
        vals[g.output] = eval_gate(g.kind, [int(vals[x]) for x in g.inputs]) & 1
    return vals


def outputs_to_int(netlist: GateNetlist, vals: np.ndarray) -> int:
    """Interpret the 32 output nets as a signed two's-complement integer."""
    raw = sum(int(vals[n]) << k for k, n in enumerate(netlist.outputs))
    return raw - (1 << ACC_BITS) if raw >> (ACC_BITS - 1) else raw


def evaluate(netlist: GateNetlist, w: int, a: int, acc: int = 0) -> int:
    """Compute the MAC result for scalar operands via zero-delay evaluation."""
    return outputs_to_int(netlist, steady_state(netlist, w, a, acc))


def evaluate_many(netlist: GateNetlist, w, a, acc=0) -> np.ndarray:
    """Vectorized :func:`evaluate` over broadcastable operand arrays."""
    w, a, acc = np.broadcast_arrays(np.asarray(w, dtype=np.int64), np.asarray(a, dtype=np.int64),
                                    np.asarray(acc, dtype=np.int64))
    shape = w.shape
    vals: list[np.ndarray | None] = [None] * netlist.num_nets
    vals[CONST0] = np.zeros(shape, dtype=np.uint8)
    vals[CONST1] = np.ones(shape, dtype=np.uint8)
    for nets, value, width in ((netlist.weight_inputs, w, WEIGHT_BITS),
                               (netlist.activation_inputs, a, ACT_BITS),
                               (netlist.accumulator_inputs, acc, ACC_BITS)):
        for k, n in enumerate(nets[:width]):
            vals[n] = ((value >> k) & 1).astype(np.uint8)
    for g in netlist.gates:
        vals[g.output] = eval_gate(g.kind, [vals[x] for x in g.inputs]) & 1
    raw = np.zeros(shape, dtype=np.int64)
    for k, n in enumerate(netlist.outputs):
        raw |= vals[n].astype(np.int64) << k
    return np.where(raw >> (ACC_BITS - 1) & 1, raw - (1 << ACC_BITS), raw)
