"""Pure-Python interpreter loop, used when the compiled core is unavailable.

``run(space, regs, budget)`` executes at most ``budget`` instructions and
returns ``(kind, code, retired)`` using the :class:`~detcloud.isa.StopKind`
numbering; ``FUELOUT`` means the budget ran out before the next instruction.
"""

from __future__ import annotations

import struct

from .isa import FAULT_BASE, StopKind, Trap, decode

_U32 = struct.Struct("<I")
_unpack = _U32.unpack_from
_pack = _U32.pack_into

_K_HALT = int(StopKind.HALT)
_K_EXCEPT = int(StopKind.EXCEPT)
_K_FUELOUT = int(StopKind.FUELOUT)
_K_SYSCALL = int(StopKind.SYSCALL)
_T_DIVZERO = int(Trap.DIVZERO)
_T_ILLEGAL = int(Trap.ILLEGAL)
_T_MISALIGN = int(Trap.MISALIGN)
_T_FAULT = int(Trap.FAULT)

_decoded: dict[int, tuple] = {}


def _decode(word: int) -> tuple:
    d = decode(word)
    entry = (d.op, d.a, d.b, d.c, d.imm, d.flag)
    if len(_decoded) < 1 << 16:
        _decoded[word] = entry
    return entry


def run(space, regs, budget: int) -> tuple[int, int, int]:
    pages = space.pages
    owned = space.owned
    write_page = space.write_page
    cache = _decoded
    r = list(regs[:8])
    pc = regs[8]
    retired = 0
    kind = _K_FUELOUT
    code = 0
    M = 0xFFFFFFFF
    while retired < budget:
        if pc & 3:
            kind, code = _K_EXCEPT, _T_MISALIGN
            retired += 1
            break
        if pc >= FAULT_BASE:
            kind, code = _K_EXCEPT, _T_FAULT
            retired += 1
            break
        page = pages.get(pc >> 12)
        word = _unpack(page, pc & 0xFFF)[0] if page is not None else 0
        d = cache.get(word)
        if d is None:
            d = _decode(word)
        op, a, b, c, imm, flag = d
        retired += 1
        if 4 <= op <= 12:
            x = r[b]
            y = imm & M if flag else r[c]
            if op == 4:
                v = x + y
            elif op == 5:
                v = x - y
            elif op == 6:
                v = x * y
            elif op == 7:
                if y == 0:
                    kind, code = _K_EXCEPT, _T_DIVZERO
                    break
                v = x // y
            elif op == 8:
                v = x & y
            elif op == 9:
                v = x | y
            elif op == 10:
                v = x ^ y
            elif op == 11:
                v = x << (y & 31)
            else:
                v = x >> (y & 31)
            r[a] = v & M
            pc += 4
        elif op == 2 or op == 3:
            addr = (r[b] + imm) & M
            if addr & 3:
                kind, code = _K_EXCEPT, _T_MISALIGN
                break
            if addr >= FAULT_BASE:
                kind, code = _K_EXCEPT, _T_FAULT
                break
            pno = addr >> 12
            if op == 2:
                page = pages.get(pno)
                r[a] = _unpack(page, addr & 0xFFF)[0] if page is not None else 0
            else:
                page = pages[pno] if pno in owned else write_page(pno)
                _pack(page, addr & 0xFFF, r[a])
            pc += 4
        elif 13 <= op <= 15:
            x, y = r[a], r[b]
            if (x == y) if op == 13 else (x != y) if op == 14 else (x < y):
                pc = (pc + imm) & M
            else:
                pc += 4
        elif op == 1:
            if flag:
                r[a] = ((imm << 12) | (r[a] & 0xFFF)) & M
            else:
                r[a] = imm & M
            pc += 4
        elif op == 16 or op == 17:
            target = ((r[b] if flag else pc) + imm) & M
            if target & 3:
                kind, code = _K_EXCEPT, _T_MISALIGN
                break
            if op == 17:
                r[a] = (pc + 4) & M
            pc = target
        elif op == 18:
            pc = (pc + 4) & M
            kind = _K_SYSCALL
            break
        elif op == 19:
            kind, code = _K_HALT, (r[a] if flag else imm)
            break
        else:
            kind, code = _K_EXCEPT, _T_ILLEGAL
            break
    for i in range(8):
        regs[i] = r[i]
    regs[8] = pc & M
    return kind, code, retired
