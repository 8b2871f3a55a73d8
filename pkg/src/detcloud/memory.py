"""Sparse paged 32-bit address spaces with copy-on-write sharing.

Pages are ``bytearray`` objects keyed by page number.  A space may share a
page object with other spaces (after :meth:`AddressSpace.copy` or a page-level
:meth:`AddressSpace.copy_from`); it only writes to pages listed in its
``owned`` set and clones anything else first.  Unmapped pages read as zero.
"""

from __future__ import annotations

import hashlib
import struct

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
PAGE_MASK = PAGE_SIZE - 1
NPAGES = 1 << 20
SPACE_SIZE = 1 << 32

ZERO_PAGE = bytes(PAGE_SIZE)


class AddressSpace:
    __slots__ = ("pages", "owned", "cow", "frozen")

    def __init__(self, cow: bool = True) -> None:
        self.pages: dict[int, bytearray] = {}
        self.owned: set[int] = set()
        self.cow = cow
        self.frozen = False

    # page-level access, also used by the compiled interpreter core

    def read_page(self, pno: int) -> bytearray | None:
        return self.pages.get(pno)

    def write_page(self, pno: int) -> bytearray:
        if self.frozen:
            raise RuntimeError("snapshot spaces are immutable")
        page = self.pages.get(pno)
        if page is None:
            page = bytearray(PAGE_SIZE)
            self.pages[pno] = page
            self.owned.add(pno)
        elif pno not in self.owned:
            page = bytearray(page)
            self.pages[pno] = page
            self.owned.add(pno)
        return page

    def install_page(self, pno: int, page: bytearray | None) -> None:
        """Map a page object shared with another space (``None`` unmaps)."""
        if self.frozen:
            raise RuntimeError("snapshot spaces are immutable")
        self.owned.discard(pno)
        if page is None:
            self.pages.pop(pno, None)
        elif self.cow:
            self.pages[pno] = page
        else:
            self.pages[pno] = bytearray(page)
            self.owned.add(pno)

    # byte and word access

    def read(self, addr: int, length: int) -> bytes:
        _check_range(addr, length)
        out = bytearray()
        while length:
            pno, off = addr >> PAGE_SHIFT, addr & PAGE_MASK
            n = min(length, PAGE_SIZE - off)
            page = self.pages.get(pno)
            out += page[off:off + n] if page is not None else bytes(n)
            addr += n
            length -= n
        return bytes(out)

    def write(self, addr: int, data: bytes) -> None:
        _check_range(addr, len(data))
        view = memoryview(data)
        while view:
            pno, off = addr >> PAGE_SHIFT, addr & PAGE_MASK
            n = min(len(view), PAGE_SIZE - off)
            self.write_page(pno)[off:off + n] = view[:n]
            addr += n
            view = view[n:]

    def load_word(self, addr: int) -> int:
        page = self.pages.get(addr >> PAGE_SHIFT)
        if page is None:
            return 0
        return struct.unpack_from("<I", page, addr & PAGE_MASK)[0]

    def store_word(self, addr: int, value: int) -> None:
        struct.pack_into("<I", self.write_page(addr >> PAGE_SHIFT), addr & PAGE_MASK, value & 0xFFFFFFFF)

    # whole-space operations

    def copy(self) -> "AddressSpace":
        """Return an independent space with identical contents."""
        clone = AddressSpace(cow=self.cow)
        if self.cow:
            clone.pages = dict(self.pages)
            if not self.frozen:
                self.owned.clear()
        else:
            clone.pages = {p: bytearray(b) for p, b in self.pages.items()}
            clone.owned = set(clone.pages)
        return clone

    def snapshot(self) -> "AddressSpace":
        snap = self.copy()
        snap.frozen = True
        snap.owned.clear()
        return snap

    def clear(self) -> None:
        self.pages.clear()
        self.owned.clear()

    def copy_from(self, src: "AddressSpace", src_addr: int, dst_addr: int, length: int) -> None:
        """Copy ``length`` bytes from ``src`` into this space.

        Whole pages at matching page offsets are remapped instead of copied.
        """
        _check_range(src_addr, length)
        _check_range(dst_addr, length)
        if length == 0:
            return
        if src is self:
            self.write(dst_addr, self.read(src_addr, length))
            return
        if (src_addr ^ dst_addr) & PAGE_MASK:
            self._copy_bytes(src, src_addr, dst_addr, length)
            return
        end = dst_addr + length
        head = min(length, -dst_addr & PAGE_MASK)
        if head:
            self._copy_bytes(src, src_addr, dst_addr, head)
        first = (dst_addr + head) >> PAGE_SHIFT
        last = end >> PAGE_SHIFT  # exclusive
        if last > first:
            shift = (src_addr - dst_addr) >> PAGE_SHIFT
            if last - first <= 64:
                targets = range(first, last)
            else:
                # sparse path: only pages mapped on either side matter
                targets = sorted(
                    {p - shift for p in src.pages if first <= p - shift < last}
                    | {p for p in self.pages if first <= p < last}
                )
            for dpno in targets:
                spno = dpno + shift
                page = src.pages.get(spno)
                if page is not None and not src.frozen:
                    src.owned.discard(spno)
                self.install_page(dpno, page)
        tail_start = max(last << PAGE_SHIFT, dst_addr + head)
        if tail_start < end:
            self._copy_bytes(src, src_addr + (tail_start - dst_addr), tail_start, end - tail_start)

    def _copy_bytes(self, src: "AddressSpace", src_addr: int, dst_addr: int, length: int) -> None:
        data = src.read(src_addr, length)
        end = dst_addr + length
        view = memoryview(data)
        while dst_addr < end:
            off = dst_addr & PAGE_MASK
            n = min(end - dst_addr, PAGE_SIZE - off)
            chunk = view[:n]
            pno = dst_addr >> PAGE_SHIFT
            # avoid materialising pages for zero writes onto unmapped memory
            if pno in self.pages or any(chunk):
                self.write_page(pno)[off:off + n] = chunk
            view = view[n:]
            dst_addr += n

    def mapped_pages(self, lo: int = 0, hi: int = NPAGES) -> list[int]:
        return sorted(p for p in self.pages if lo <= p < hi)

    def canonical_pages(self):
        """Yield ``(page_number, bytes)`` for every non-zero page, in order."""
        for pno in sorted(self.pages):
            page = self.pages[pno]
            if page != ZERO_PAGE:
                yield pno, bytes(page)

    def digest(self) -> str:
        h = hashlib.sha256()
        for pno, data in self.canonical_pages():
            h.update(pno.to_bytes(4, "little"))
            h.update(data)
        return h.hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AddressSpace):
            return NotImplemented
        return list(self.canonical_pages()) == list(other.canonical_pages())

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"<AddressSpace {len(self.pages)} pages>"


def _check_range(addr: int, length: int) -> None:
    if addr < 0 or length < 0 or addr + length > SPACE_SIZE:
        raise ValueError(f"range [{addr:#x}, +{length:#x}) leaves the 32-bit space")
