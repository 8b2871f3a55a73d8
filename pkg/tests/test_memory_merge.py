import itertools
import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detcloud.memory import PAGE_SIZE, AddressSpace
from detcloud.merge import merge_region

from oracles import merge_oracle


def test_unmapped_memory_reads_zero():
    s = AddressSpace()
    assert s.read(0x1234, 10) == bytes(10) and s.load_word(0xFFFFFFF0) == 0
    assert s.mapped_pages() == []


@given(st.integers(0, (1 << 32) - 64), st.binary(max_size=64))
def test_write_read_roundtrip(addr, data):
    s = AddressSpace()
    s.write(addr, data)
    assert s.read(addr, len(data)) == data


@pytest.mark.parametrize("cow", [True, False])
def test_copy_is_independent(cow):
    a = AddressSpace(cow=cow)
    a.write(0, b"abcd")
    b = a.copy()
    b.write(0, b"XY")
    a.write(2, b"ZZ")
    assert a.read(0, 4) == b"abZZ" and b.read(0, 4) == b"XYcd"


def test_snapshot_is_frozen_and_shares_pages():
    a = AddressSpace()
    a.write(0, b"1" * PAGE_SIZE)
    snap = a.snapshot()
    assert snap.pages[0] is a.pages[0]
    a.write(0, b"2")
    assert snap.read(0, 1) == b"1"


@pytest.mark.parametrize("seed", range(30))
def test_copy_from_matches_bytewise_copy(seed):
    rng = random.Random(seed)
    src, dst = AddressSpace(), AddressSpace()
    for sp in (src, dst):
        for _ in range(6):
            sp.write(rng.randrange(0, 20 * PAGE_SIZE), bytes(rng.randrange(256) for _ in range(rng.randrange(1, 3000))))
    src_addr = rng.randrange(0, 10 * PAGE_SIZE)
    dst_addr = src_addr + rng.choice([0, PAGE_SIZE, -src_addr, rng.randrange(-src_addr, 4 * PAGE_SIZE)])
    length = rng.randrange(0, 9 * PAGE_SIZE)
    expect = bytearray(dst.read(0, 32 * PAGE_SIZE))
    expect[dst_addr:dst_addr + length] = src.read(src_addr, length)
    dst.copy_from(src, src_addr, dst_addr, length)
    assert dst.read(0, 32 * PAGE_SIZE) == bytes(expect)


def test_copy_from_large_sparse_range_only_touches_mapped_pages():
    src, dst = AddressSpace(), AddressSpace()
    src.write(0x40000000, b"x")
    dst.write(0x7FFFF000, b"y")
    dst.copy_from(src, 0, 0, 0xFFFFF000)
    assert dst.read(0x40000000, 1) == b"x" and dst.read(0x7FFFF000, 1) == b"\0"
    assert dst.mapped_pages() == [0x40000]


# --------------------------------------------------------------------- merge


def _triple(rng: random.Random, size: int):
    """Base image; child = snapshot + edits; parent = base + edits (COW shared)."""
    base = AddressSpace()
    for _ in range(rng.randrange(0, 8)):
        base.write(rng.randrange(0, size - 64) & ~3, rng.randbytes(rng.randrange(4, 64)))
    child = base.copy()
    snap = child.snapshot()
    parent = base.copy()
    values = [0, 1, 0xDEADBEEF]
    for sp in (child, parent):
        for _ in range(rng.randrange(0, 40)):
            addr = rng.randrange(0, size, 4)
            sp.store_word(addr, rng.choice(values) if rng.random() < 0.5 else rng.getrandbits(32))
        if rng.random() < 0.2:
            start = rng.randrange(0, size // PAGE_SIZE) * PAGE_SIZE
            sp.write(start, rng.randbytes(PAGE_SIZE))
    return parent, child, snap


def check_merge_against_oracle(rng: random.Random) -> None:
    size = rng.choice([PAGE_SIZE, 4 * PAGE_SIZE, 16 * PAGE_SIZE])
    parent, child, snap = _triple(rng, size)
    lo = rng.randrange(0, size // 2, 4)
    length = rng.randrange(0, size - lo + 1, 4)
    paddr = lo + rng.choice([0, 0, PAGE_SIZE * 32, 0x100])
    p_before = parent.read(paddr, length)
    expect, expect_conf = merge_oracle(p_before, child.read(lo, length), snap.read(lo, length), paddr)
    outside = parent.read(0, paddr), parent.read(paddr + length, PAGE_SIZE)
    got_conf = merge_region(parent, child, snap, paddr, lo, length)
    assert parent.read(paddr, length) == expect
    assert got_conf == expect_conf
    assert (parent.read(0, paddr), parent.read(paddr + length, PAGE_SIZE)) == outside


@pytest.mark.parametrize("seed", range(100))
def test_merge_matches_oracle(seed):
    check_merge_against_oracle(random.Random(seed))


@pytest.mark.parametrize("s,p,c", list(itertools.product(range(3), repeat=3)))
def test_merge_single_word_cases(s, p, c):
    """All 27 value relations between snapshot, parent and child for one word."""
    vals = [0, 7, 9]
    snap = AddressSpace()
    snap.store_word(0, vals[s])
    child = snap.copy()
    snap = child.snapshot()
    child.store_word(0, vals[c])
    parent = AddressSpace()
    parent.store_word(0, vals[p])
    conflicts = merge_region(parent, child, snap, 0, 0, 4)
    expect = struct.unpack("<I", merge_oracle(struct.pack("<I", vals[p]), struct.pack("<I", vals[c]),
                                              struct.pack("<I", vals[s]))[0])[0]
    assert parent.load_word(0) == expect
    assert bool(conflicts) == (c != s and p != s and p != c)


def test_merge_rejects_misaligned_ranges():
    a = AddressSpace()
    with pytest.raises(ValueError):
        merge_region(a, a.copy(), a.snapshot(), 2, 0, 4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 255), st.integers(0, 2 ** 32 - 1)), max_size=30),
       st.lists(st.tuples(st.integers(0, 255), st.integers(0, 2 ** 32 - 1)), max_size=30))
def test_merge_of_disjoint_edits_applies_both(child_edits, parent_edits):
    child = AddressSpace()
    snap = child.snapshot()
    parent = AddressSpace()
    cw = dict(child_edits)
    pw = {k: v for k, v in parent_edits if k not in cw}
    for k, v in cw.items():
        child.store_word(4 * k, v)
    for k, v in pw.items():
        parent.store_word(4 * k, v)
    assert merge_region(parent, child, snap, 0, 0, 1024) == []
    for k, v in cw.items():
        assert parent.load_word(4 * k) == v
    for k, v in pw.items():
        assert parent.load_word(4 * k) == v
