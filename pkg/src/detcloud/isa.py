"""Instruction set of the deterministic guest machine.

Every instruction is one little-endian 32-bit word::

    bits 0..7    opcode
    bits 8..10   field a   (rd, branch lhs, store source, halt register)
    bits 11..13  field b   (rs1, branch rhs, load/store base)
    bits 14..31  opcode-specific (see the ``encode_*`` helpers)

There are eight 32-bit general purpose registers.  All arithmetic wraps
modulo 2**32.  Nothing in the instruction set observes time, randomness or
host state.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

MASK32 = 0xFFFFFFFF
WORD = 4
NREGS = 8
PC = 8  # index of the program counter in a register array

# The last page is reserved; touching it raises FAULT.
FAULT_BASE = 0xFFFFF000


class Op(enum.IntEnum):
    LOADI = 1
    LOAD = 2
    STORE = 3
    ADD = 4
    SUB = 5
    MUL = 6
    DIVU = 7
    AND = 8
    OR = 9
    XOR = 10
    SHL = 11
    SHR = 12
    BEQ = 13
    BNE = 14
    BLTU = 15
    JMP = 16
    JAL = 17
    SYS = 18
    HALT = 19


ALU_OPS = frozenset({Op.ADD, Op.SUB, Op.MUL, Op.DIVU, Op.AND, Op.OR, Op.XOR, Op.SHL, Op.SHR})
BRANCH_OPS = frozenset({Op.BEQ, Op.BNE, Op.BLTU})


class StopKind(enum.IntEnum):
    RUNNING = 0
    HALT = 1
    RET = 2
    EXCEPT = 3
    FUELOUT = 4
    FORCED = 5
    SYSCALL = 6


class Trap(enum.IntEnum):
    DIVZERO = 1
    ILLEGAL = 2
    MISALIGN = 3
    FAULT = 4


class Sys(enum.IntEnum):
    PUT = 0
    GET = 1
    RET = 2


class Opt(enum.IntFlag):
    COPY_REGS = 1
    SNAP = 2
    START = 4
    MERGE = 8
    ZERO = 16


@dataclass(frozen=True)
class SyscallRequest:
    """A decoded ``SYS`` instruction.

    Register ABI: ``r0`` holds the selector in bits 0..7 and the option bits in
    bits 8..15; ``r1`` child index; ``r2`` local address; ``r3`` child address;
    ``r4`` length in bytes; ``r5`` register block address; ``r6``/``r7`` carry
    the fuel limit (PUT) or the conflict buffer address and capacity (GET).
    For RET, ``r1`` is the exit code.
    """

    kind: Sys | int
    child: int = 0
    local: int = 0
    remote: int = 0
    length: int = 0
    options: Opt = Opt(0)
    regs_addr: int = 0
    limit: int = 0
    conflict_addr: int = 0
    conflict_cap: int = 0
    code: int = 0

    @classmethod
    def from_regs(cls, regs) -> "SyscallRequest":
        sel = regs[0] & 0xFF
        opts = Opt((regs[0] >> 8) & 0xFF & 0x1F)
        if sel == Sys.RET:
            return cls(kind=Sys.RET, code=regs[1])
        if sel == Sys.PUT:
            return cls(
                kind=Sys.PUT, child=regs[1], local=regs[2], remote=regs[3],
                length=regs[4], options=opts, regs_addr=regs[5],
                limit=regs[6] | (regs[7] << 32),
            )
        if sel == Sys.GET:
            return cls(
                kind=Sys.GET, child=regs[1], local=regs[2], remote=regs[3],
                length=regs[4], options=opts, regs_addr=regs[5],
                conflict_addr=regs[6], conflict_cap=regs[7],
            )
        return cls(kind=sel)


@dataclass(frozen=True)
class StopReason:
    kind: StopKind
    code: int = 0
    request: SyscallRequest | None = None

    def __str__(self) -> str:
        if self.kind == StopKind.EXCEPT:
            return f"EXCEPT {Trap(self.code).name}"
        if self.kind in (StopKind.HALT, StopKind.RET):
            return f"{self.kind.name} {self.code}"
        return self.kind.name


def sext(value: int, bits: int) -> int:
    value &= (1 << bits) - 1
    if value & (1 << (bits - 1)):
        value -= 1 << bits
    return value


def _fits(value: int, bits: int, signed: bool = True) -> bool:
    if signed:
        return -(1 << (bits - 1)) <= value < (1 << (bits - 1))
    return 0 <= value < (1 << bits)


def _check_reg(*regs: int) -> None:
    for r in regs:
        if not 0 <= r < NREGS:
            raise ValueError(f"bad register r{r}")


def encode_alu(op: Op, rd: int, rs1: int, rs2: int | None = None, imm: int | None = None) -> int:
    _check_reg(rd, rs1)
    if (rs2 is None) == (imm is None):
        raise ValueError("ALU form takes exactly one of rs2/imm")
    word = op | rd << 8 | rs1 << 11
    if rs2 is not None:
        _check_reg(rs2)
        return word | rs2 << 15
    if not _fits(imm, 17):
        raise ValueError(f"immediate {imm} does not fit in 17 bits")
    return word | 1 << 14 | (imm & 0x1FFFF) << 15


def encode_loadi(rd: int, imm: int, high: bool = False) -> int:
    _check_reg(rd)
    if high:
        if not _fits(imm, 20, signed=False):
            raise ValueError(f"high immediate {imm} does not fit in 20 bits")
    elif not _fits(imm, 20):
        raise ValueError(f"immediate {imm} does not fit in 20 bits")
    return Op.LOADI | rd << 8 | int(high) << 11 | (imm & 0xFFFFF) << 12


def encode_mem(op: Op, reg: int, base: int, offset: int) -> int:
    _check_reg(reg, base)
    if not _fits(offset, 18):
        raise ValueError(f"offset {offset} does not fit in 18 bits")
    return op | reg << 8 | base << 11 | (offset & 0x3FFFF) << 14


def encode_branch(op: Op, rs1: int, rs2: int, offset: int) -> int:
    _check_reg(rs1, rs2)
    if offset % WORD:
        raise ValueError("branch offset must be word aligned")
    if not _fits(offset // WORD, 18):
        raise ValueError("branch target out of range")
    return op | rs1 << 8 | rs2 << 11 | ((offset // WORD) & 0x3FFFF) << 14


def encode_jump(op: Op, rd: int = 0, rs1: int = 0, offset: int = 0, register: bool = False) -> int:
    _check_reg(rd, rs1)
    if offset % WORD:
        raise ValueError("jump offset must be word aligned")
    if not _fits(offset // WORD, 17):
        raise ValueError("jump target out of range")
    return op | rd << 8 | rs1 << 11 | int(register) << 14 | ((offset // WORD) & 0x1FFFF) << 15


def encode_halt(code: int = 0, reg: int | None = None) -> int:
    if reg is not None:
        _check_reg(reg)
        return Op.HALT | reg << 8 | 1 << 11
    if not _fits(code, 20, signed=False):
        raise ValueError(f"halt code {code} does not fit in 20 bits")
    return Op.HALT | code << 12


def encode_sys() -> int:
    return Op.SYS


@dataclass(frozen=True)
class Decoded:
    op: int
    a: int
    b: int
    c: int
    imm: int
    flag: bool


def decode(word: int) -> Decoded:
    """Split a word into its fields; ``imm`` is interpreted per opcode."""
    op = word & 0xFF
    a = (word >> 8) & 7
    b = (word >> 11) & 7
    c = (word >> 15) & 7
    flag = False
    imm = 0
    if op == Op.LOADI:
        flag = bool(word >> 11 & 1)
        imm = (word >> 12) & 0xFFFFF if flag else sext(word >> 12, 20)
    elif op in ALU_OPS:
        flag = bool(word >> 14 & 1)
        imm = sext(word >> 15, 17)
    elif op in (Op.LOAD, Op.STORE):
        imm = sext(word >> 14, 18)
    elif op in BRANCH_OPS:
        imm = sext(word >> 14, 18) * WORD
    elif op in (Op.JMP, Op.JAL):
        flag = bool(word >> 14 & 1)
        imm = sext(word >> 15, 17) * WORD
    elif op == Op.HALT:
        flag = bool(word >> 11 & 1)
        imm = (word >> 12) & 0xFFFFF
    return Decoded(op, a, b, c, imm, flag)
