# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled interpreter loop.

Same contract as :func:`detcloud._pyvm.run`.  The loop runs without the GIL
and only reacquires it to resolve page-table misses, so processes driven
from different threads execute in parallel.
"""

from cpython.bytearray cimport PyByteArray_AS_STRING
from libc.stdint cimport uint8_t, uint32_t, uint64_t, int32_t

cdef enum:
    TLB_SIZE = 64
    K_HALT = 1
    K_EXCEPT = 3
    K_FUELOUT = 4
    K_SYSCALL = 6
    T_DIVZERO = 1
    T_ILLEGAL = 2
    T_MISALIGN = 3
    T_FAULT = 4

cdef uint32_t FAULT_BASE = 0xFFFFF000u
cdef uint8_t ZERO_PAGE[4096]


cdef struct Tlb:
    uint32_t tag[TLB_SIZE]       # page number + 1; 0 marks an empty slot
    uint8_t *ptr[TLB_SIZE]
    int writable[TLB_SIZE]


cdef inline uint32_t ld32(const uint8_t *p) nogil:
    return p[0] | (<uint32_t>p[1] << 8) | (<uint32_t>p[2] << 16) | (<uint32_t>p[3] << 24)


cdef inline void st32(uint8_t *p, uint32_t v) nogil:
    p[0] = v & 0xFF
    p[1] = (v >> 8) & 0xFF
    p[2] = (v >> 16) & 0xFF
    p[3] = v >> 24


cdef uint8_t *resolve(object space, uint32_t pno, int write, int *writable):
    page = space.write_page(pno) if write else space.read_page(pno)
    if page is None:
        writable[0] = 0
        return ZERO_PAGE
    writable[0] = 1 if (write or pno in space.owned) else 0
    return <uint8_t *>PyByteArray_AS_STRING(page)


cdef inline int32_t sext(uint32_t v, int bits) nogil:
    cdef uint32_t m = 1u << (bits - 1)
    v &= (1u << bits) - 1
    return <int32_t>((v ^ m) - m)


def run(object space, unsigned int[::1] regs, uint64_t budget):
    cdef Tlb tlb
    cdef uint32_t r[8]
    cdef uint32_t pc = regs[8]
    cdef uint64_t retired = 0
    cdef int kind = K_FUELOUT
    cdef uint32_t code = 0
    cdef uint32_t word, op, a, b, x, y, v, addr, pno, slot, target
    cdef int32_t imm
    cdef int flag, w
    cdef uint8_t *p
    cdef uint32_t fetch_tag = 0
    cdef uint8_t *fetch_ptr = NULL
    cdef int i

    for i in range(TLB_SIZE):
        tlb.tag[i] = 0
    for i in range(8):
        r[i] = regs[i]

    with nogil:
        while retired < budget:
            if pc & 3:
                kind = K_EXCEPT; code = T_MISALIGN; retired += 1
                break
            if pc >= FAULT_BASE:
                kind = K_EXCEPT; code = T_FAULT; retired += 1
                break
            pno = pc >> 12
            if fetch_tag != pno + 1:
                slot = pno & (TLB_SIZE - 1)
                if tlb.tag[slot] != pno + 1:
                    with gil:
                        tlb.ptr[slot] = resolve(space, pno, 0, &w)
                    tlb.writable[slot] = w
                    tlb.tag[slot] = pno + 1
                fetch_ptr = tlb.ptr[slot]
                fetch_tag = pno + 1
            word = ld32(fetch_ptr + (pc & 0xFFF))
            op = word & 0xFF
            a = (word >> 8) & 7
            b = (word >> 11) & 7
            retired += 1

            if op >= 4 and op <= 12:
                x = r[b]
                if (word >> 14) & 1:
                    y = <uint32_t>sext(word >> 15, 17)
                else:
                    y = r[(word >> 15) & 7]
                if op == 4:
                    v = x + y
                elif op == 5:
                    v = x - y
                elif op == 6:
                    v = x * y
                elif op == 7:
                    if y == 0:
                        kind = K_EXCEPT; code = T_DIVZERO
                        break
                    v = x / y
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
                r[a] = v
                pc += 4
            elif op == 2 or op == 3:
                addr = r[b] + <uint32_t>sext(word >> 14, 18)
                if addr & 3:
                    kind = K_EXCEPT; code = T_MISALIGN
                    break
                if addr >= FAULT_BASE:
                    kind = K_EXCEPT; code = T_FAULT
                    break
                pno = addr >> 12
                slot = pno & (TLB_SIZE - 1)
                if op == 2:
                    if tlb.tag[slot] != pno + 1:
                        with gil:
                            tlb.ptr[slot] = resolve(space, pno, 0, &w)
                        tlb.writable[slot] = w
                        tlb.tag[slot] = pno + 1
                        if fetch_tag == pno + 1:
                            fetch_tag = 0
                    r[a] = ld32(tlb.ptr[slot] + (addr & 0xFFF))
                else:
                    if tlb.tag[slot] != pno + 1 or not tlb.writable[slot]:
                        with gil:
                            tlb.ptr[slot] = resolve(space, pno, 1, &w)
                        tlb.writable[slot] = 1
                        tlb.tag[slot] = pno + 1
                        fetch_tag = 0
                    st32(tlb.ptr[slot] + (addr & 0xFFF), r[a])
                pc += 4
            elif op >= 13 and op <= 15:
                x = r[a]
                y = r[b]
                if (op == 13 and x == y) or (op == 14 and x != y) or (op == 15 and x < y):
                    pc = pc + <uint32_t>(sext(word >> 14, 18) * 4)
                else:
                    pc += 4
            elif op == 1:
                if (word >> 11) & 1:
                    r[a] = ((word >> 12) << 12) | (r[a] & 0xFFF)
                else:
                    r[a] = <uint32_t>sext(word >> 12, 20)
                pc += 4
            elif op == 16 or op == 17:
                imm = sext(word >> 15, 17) * 4
                if (word >> 14) & 1:
                    target = r[b] + <uint32_t>imm
                else:
                    target = pc + <uint32_t>imm
                if target & 3:
                    kind = K_EXCEPT; code = T_MISALIGN
                    break
                if op == 17:
                    r[a] = pc + 4
                pc = target
            elif op == 18:
                pc += 4
                kind = K_SYSCALL
                break
            elif op == 19:
                kind = K_HALT
                if (word >> 11) & 1:
                    code = r[a]
                else:
                    code = word >> 12
                break
            else:
                kind = K_EXCEPT; code = T_ILLEGAL
                break

    for i in range(8):
        regs[i] = r[i]
    regs[8] = pc
    return kind, code, retired
