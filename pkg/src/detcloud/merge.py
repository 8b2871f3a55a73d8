"""Word-level snapshot merge of a child's changes into its parent."""

from __future__ import annotations

import numpy as np

from .memory import PAGE_MASK, PAGE_SHIFT, PAGE_SIZE, ZERO_PAGE, AddressSpace, _check_range


def merge_region(
    parent: AddressSpace,
    child: AddressSpace,
    snapshot: AddressSpace,
    parent_addr: int,
    child_addr: int,
    length: int,
) -> list[int]:
    """Merge the child's changes since ``snapshot`` into ``parent``.

    For every word the child changed: the parent takes the child's value if
    the parent still holds the snapshot value; if the parent changed it too,
    to a different value, the word is a conflict and the parent keeps its
    own.  Returns the sorted parent addresses of conflicting words.
    """
    if (parent_addr | child_addr | length) & 3:
        raise ValueError("merge ranges must be word aligned")
    _check_range(parent_addr, length)
    _check_range(child_addr, length)
    if length == 0:
        return []
    lo, hi = child_addr, child_addr + length
    first, last = lo >> PAGE_SHIFT, (hi - 1) >> PAGE_SHIFT
    cpages, spages = child.pages, snapshot.pages
    candidates = sorted(
        p for p in cpages.keys() | spages.keys()
        if first <= p <= last and cpages.get(p) is not spages.get(p)
    )
    delta = parent_addr - child_addr
    conflicts: list[int] = []
    for pno in candidates:
        start = max(lo, pno << PAGE_SHIFT)
        end = min(hi, (pno + 1) << PAGE_SHIFT)
        while start < end:
            # split so the parent side stays within one page as well
            pstart = start + delta
            n = min(end - start, PAGE_SIZE - (pstart & PAGE_MASK))
            _merge_chunk(parent, child, snapshot, start, pstart, n, conflicts)
            start += n
    return conflicts


def _merge_chunk(parent, child, snapshot, caddr, paddr, n, conflicts) -> None:
    cpno, ppno = caddr >> PAGE_SHIFT, paddr >> PAGE_SHIFT
    cpage = child.pages.get(cpno)
    spage = snapshot.pages.get(cpno)
    ppage = parent.pages.get(ppno)
    if n == PAGE_SIZE and ppage is spage:
        # parent left this page alone: remap the child's page wholesale
        if cpage is not None:
            child.owned.discard(cpno)
        parent.install_page(ppno, cpage)
        return
    coff, poff = caddr & PAGE_MASK, paddr & PAGE_MASK
    c = _words(cpage, coff, n)
    s = _words(spage, coff, n)
    changed = c != s
    if not changed.any():
        return
    p = _words(ppage, poff, n)
    parent_same = p == s
    take = changed & parent_same
    clash = changed & ~parent_same & (p != c)
    if take.any():
        merged = np.where(take, c, p)
        page = parent.write_page(ppno)
        page[poff:poff + n] = merged.astype("<u4").tobytes()
    if clash.any():
        conflicts.extend(int(paddr + 4 * i) for i in np.flatnonzero(clash))


def _words(page, off: int, n: int) -> np.ndarray:
    src = page if page is not None else ZERO_PAGE
    return np.frombuffer(src, dtype="<u4", count=n // 4, offset=off)
