"""Three-way reconciliation of a child's file image into its parent's.

Modification is detected through per-entry version numbers: an entry was
modified on a side when its version exceeds the base version (0 when the
base lacks the name).  The guest runtime implements the identical
algorithm in assembly; the two are cross-checked in the test suite.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

from . import layout as L
from .fs import FileEntry, FileImage


class Outcome(enum.Enum):
    UNCHANGED = "unchanged"
    TOOK_PARENT = "took-parent"
    TOOK_CHILD = "took-child"
    APPENDED = "appended-union"
    CONFLICT = "conflict"


@dataclass
class ReconciliationReport:
    outcomes: dict[str, Outcome] = field(default_factory=dict)

    @property
    def conflicts(self) -> list[str]:
        return sorted(n for n, o in self.outcomes.items() if o is Outcome.CONFLICT)

    def __str__(self) -> str:
        return "\n".join(f"{name}: {o.value}" for name, o in sorted(self.outcomes.items()))


_CONTENT_FLAGS = L.F_EXISTS | L.F_APPEND | L.F_DELETED


def reconcile_fs(base: FileImage, parent: FileImage, child: FileImage) -> ReconciliationReport:
    """Fold ``child``'s changes since ``base`` into ``parent`` (in place).

    Per name present in the child:

    * changed only by the child: the parent takes the child's entry;
    * changed on both sides: if both are append-only and the base was
      append-only (or absent) the child's appended bytes are added after
      the parent's; identical results are accepted; anything else is a
      conflict, the parent keeps its version and the entry is flagged.

    Names changed only by the parent, or by neither side, are left alone.
    Every change to a parent entry sets its version to one more than the
    larger of the two versions.
    """
    report = ReconciliationReport()
    for ci, c in enumerate(child.slots):
        if c is None:
            continue
        bi = base.index(c.name, ci)
        b = base.slots[bi] if bi is not None else None
        bv = b.version if b is not None else 0
        pi = parent.index(c.name, ci)
        p = parent.slots[pi] if pi is not None else None
        if c.version <= bv:
            modified_parent = p is not None and p.version > bv
            report.outcomes[c.name] = Outcome.TOOK_PARENT if modified_parent else Outcome.UNCHANGED
            continue
        if p is None:
            slot = parent.free_slot(prefer=ci)
            if slot is None:
                report.outcomes[c.name] = Outcome.CONFLICT
                continue
            parent.slots[slot] = replace(c, version=c.version + 1)
            report.outcomes[c.name] = Outcome.TOOK_CHILD
            continue
        version = max(p.version, c.version) + 1
        if p.version <= bv:
            parent.slots[pi] = replace(c, version=version)
            report.outcomes[c.name] = Outcome.TOOK_CHILD
            continue
        if p.append_only and c.append_only and (b is None or b.append_only):
            base_len = len(b.data) if b is not None else 0
            extra = c.data[base_len:]
            if len(c.data) >= base_len and len(p.data) + len(extra) <= L.FILE_MAX:
                parent.slots[pi] = replace(p, data=p.data + extra, version=version)
                report.outcomes[c.name] = Outcome.APPENDED
                continue
        elif (p.flags ^ c.flags) & _CONTENT_FLAGS == 0 and p.data == c.data:
            report.outcomes[c.name] = Outcome.UNCHANGED
            continue
        parent.slots[pi] = replace(p, flags=p.flags | L.F_CONFLICT, version=version)
        report.outcomes[c.name] = Outcome.CONFLICT
    return report


def clear_conflict(image: FileImage, name: str) -> None:
    image.clear_conflict(name)


def entry_state(e: FileEntry | None) -> tuple | None:
    """Content-level view of an entry (ignores versions and placement)."""
    if e is None:
        return None
    return e.flags & _CONTENT_FLAGS, e.data
