"""Guest machine state, the reference single-stepper and batched execution.

``run_until_stop`` dispatches to the compiled core when it is importable and
``DETCLOUD_PURE`` is unset; otherwise it uses the pure-Python loop.  ``step``
is a deliberately plain reimplementation of the instruction semantics and
serves as the oracle both loops are tested against.
"""

from __future__ import annotations

import os
from array import array
from dataclasses import dataclass

from . import _pyvm, isa
from .isa import FAULT_BASE, MASK32, Op, StopKind, StopReason, SyscallRequest, Trap
from .memory import AddressSpace

try:
    if os.environ.get("DETCLOUD_PURE"):
        raise ImportError("pure-Python backend forced")
    from . import _vmcore as _core
except ImportError:
    _core = None

BACKENDS = {"python": _pyvm.run}
if _core is not None:
    BACKENDS["compiled"] = _core.run
BACKEND = "compiled" if _core is not None else "python"
_run = BACKENDS[BACKEND]


def new_regs(pc: int = 0) -> array:
    regs = array("I", [0] * 9)
    regs[isa.PC] = pc
    return regs


@dataclass
class MachineState:
    regs: array
    space: AddressSpace

    def copy(self) -> "MachineState":
        return MachineState(array("I", self.regs), self.space.copy())

    @property
    def pc(self) -> int:
        return self.regs[isa.PC]

    def fingerprint(self) -> tuple:
        return tuple(self.regs), self.space.digest()


def make_stop(kind: int, code: int, regs) -> StopReason:
    kind = StopKind(kind)
    if kind == StopKind.SYSCALL:
        return StopReason(kind, 0, SyscallRequest.from_regs(regs))
    return StopReason(kind, code)


def step(state: MachineState, fuel: int) -> tuple[int, StopReason | None]:
    """Retire exactly one instruction.

    Returns ``(fuel_consumed, stop)`` where ``stop`` is ``None`` if the
    machine is still running afterwards.  Traps leave every register
    (including ``pc``) unchanged.
    """
    if fuel <= 0:
        return 0, StopReason(StopKind.FUELOUT)
    r, space = state.regs, state.space
    pc = r[isa.PC]

    def trap(kind: Trap):
        return 1, StopReason(StopKind.EXCEPT, int(kind))

    if pc % 4:
        return trap(Trap.MISALIGN)
    if pc >= FAULT_BASE:
        return trap(Trap.FAULT)
    d = isa.decode(space.load_word(pc))
    try:
        op = Op(d.op)
    except ValueError:
        return trap(Trap.ILLEGAL)

    next_pc = (pc + 4) & MASK32
    if op in isa.ALU_OPS:
        lhs = r[d.b]
        rhs = (d.imm & MASK32) if d.flag else r[d.c]
        if op == Op.DIVU and rhs == 0:
            return trap(Trap.DIVZERO)
        result = {
            Op.ADD: lambda: lhs + rhs,
            Op.SUB: lambda: lhs - rhs,
            Op.MUL: lambda: lhs * rhs,
            Op.DIVU: lambda: lhs // rhs,
            Op.AND: lambda: lhs & rhs,
            Op.OR: lambda: lhs | rhs,
            Op.XOR: lambda: lhs ^ rhs,
            Op.SHL: lambda: lhs << (rhs % 32),
            Op.SHR: lambda: lhs >> (rhs % 32),
        }[op]()
        r[d.a] = result & MASK32
    elif op == Op.LOADI:
        if d.flag:
            r[d.a] = ((d.imm << 12) + (r[d.a] % 4096)) & MASK32
        else:
            r[d.a] = d.imm & MASK32
    elif op in (Op.LOAD, Op.STORE):
        addr = (r[d.b] + d.imm) & MASK32
        if addr % 4:
            return trap(Trap.MISALIGN)
        if addr >= FAULT_BASE:
            return trap(Trap.FAULT)
        if op == Op.LOAD:
            r[d.a] = space.load_word(addr)
        else:
            space.store_word(addr, r[d.a])
    elif op in isa.BRANCH_OPS:
        lhs, rhs = r[d.a], r[d.b]
        taken = {Op.BEQ: lhs == rhs, Op.BNE: lhs != rhs, Op.BLTU: lhs < rhs}[op]
        if taken:
            next_pc = (pc + d.imm) & MASK32
    elif op in (Op.JMP, Op.JAL):
        base = r[d.b] if d.flag else pc
        target = (base + d.imm) & MASK32
        if target % 4:
            return trap(Trap.MISALIGN)
        if op == Op.JAL:
            r[d.a] = next_pc
        next_pc = target
    elif op == Op.SYS:
        r[isa.PC] = next_pc
        return 1, StopReason(StopKind.SYSCALL, 0, SyscallRequest.from_regs(r))
    elif op == Op.HALT:
        return 1, StopReason(StopKind.HALT, r[d.a] if d.flag else d.imm)
    r[isa.PC] = next_pc
    return 1, None


def run_until_stop(state: MachineState, fuel: int, backend: str | None = None) -> tuple[int, StopReason]:
    """Run until a stop; returns ``(fuel_consumed, stop)``."""
    runner = BACKENDS[backend] if backend else _run
    kind, code, retired = runner(state.space, state.regs, fuel)
    return retired, make_stop(kind, code, state.regs)


def run_raw(space: AddressSpace, regs: array, budget: int) -> tuple[int, int, int]:
    return _run(space, regs, budget)
