"""Python model of a process's file system image.

The image lives in guest memory (see :mod:`detcloud.layout`): a table of
256 fixed-size entries and one 4 MiB data slot per entry.  This module
reads and writes that representation and implements the same file API as
the guest runtime, so tests can drive both and compare.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace

from . import layout as L
from .memory import AddressSpace


class FsError(Exception):
    def __init__(self, code: str) -> None:
        self.code = code
        super().__init__(code)

    @property
    def errno(self) -> int:
        return -L.ERRORS[self.code]


@dataclass(frozen=True)
class FileEntry:
    name: str
    data: bytes = b""
    version: int = 1
    flags: int = L.F_EXISTS

    @property
    def live(self) -> bool:
        return bool(self.flags & L.F_EXISTS)

    @property
    def deleted(self) -> bool:
        return bool(self.flags & L.F_DELETED)

    @property
    def append_only(self) -> bool:
        return bool(self.flags & L.F_APPEND)

    @property
    def conflicted(self) -> bool:
        return bool(self.flags & L.F_CONFLICT)


def _check_name(name: str) -> bytes:
    raw = name.encode("latin-1") if isinstance(name, str) else bytes(name)
    if not raw or len(raw) > L.NAME_BYTES - 1 or 0 in raw:
        raise FsError("EINVAL")
    return raw


class FileImage:
    """Slot-indexed file table; ``slots[i]`` is ``None`` for a free entry."""

    def __init__(self, slots: list[FileEntry | None] | None = None) -> None:
        self.slots: list[FileEntry | None] = list(slots) if slots else [None] * L.MAX_FILES
        if len(self.slots) != L.MAX_FILES:
            raise ValueError("a file image has exactly MAX_FILES slots")

    def copy(self) -> "FileImage":
        return FileImage(self.slots)

    # ---------------------------------------------------------------- queries

    def index(self, name: str, hint: int | None = None) -> int | None:
        if hint is not None and 0 <= hint < L.MAX_FILES:
            e = self.slots[hint]
            if e is not None and e.name == name:
                return hint
        for i, e in enumerate(self.slots):
            if e is not None and e.name == name:
                return i
        return None

    def get(self, name: str) -> FileEntry | None:
        i = self.index(name)
        return None if i is None else self.slots[i]

    def free_slot(self, prefer: int | None = None) -> int | None:
        if prefer is not None and self.slots[prefer] is None:
            return prefer
        for i, e in enumerate(self.slots):
            if e is None:
                return i
        return None

    def files(self) -> dict[str, bytes]:
        """Contents of the live files, by name."""
        return {e.name: e.data for e in self.slots if e is not None and e.live}

    def entries(self) -> dict[str, FileEntry]:
        return {e.name: e for e in self.slots if e is not None}

    def canonical(self) -> bytes:
        """Placement-independent serialisation used for output hashing."""
        out = bytearray()
        for e in sorted(self.entries().values(), key=lambda e: e.name):
            out += struct.pack("<HII", len(e.name), e.flags, len(e.data))
            out += e.name.encode("latin-1") + hashlib.sha256(e.data).digest()
        return bytes(out)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical()).hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FileImage):
            return NotImplemented
        return self.slots == other.slots

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        names = ", ".join(sorted(self.entries()))
        return f"<FileImage [{names}]>"

    # ---------------------------------------------------------------- file API

    def _live(self, fd: int) -> FileEntry:
        if not 0 <= fd < L.MAX_FILES or self.slots[fd] is None or not self.slots[fd].live:
            raise FsError("EBADF")
        if self.slots[fd].conflicted:
            raise FsError("ECONFLICT")
        return self.slots[fd]

    def open(self, name: str, flags: int = 0) -> int:
        """Return a descriptor (the slot index); flags are ``O_CREAT|O_APPEND|O_TRUNC``."""
        _check_name(name)
        i = self.index(name)
        if i is None:
            if not flags & L.O_CREAT:
                raise FsError("ENOENT")
            i = self.free_slot()
            if i is None:
                raise FsError("ENOSPC")
            fl = L.F_EXISTS | (L.F_APPEND if flags & L.O_APPEND else 0)
            self.slots[i] = FileEntry(name, b"", 1, fl)
            return i
        e = self.slots[i]
        if e.conflicted:
            raise FsError("ECONFLICT")
        if e.deleted:
            if not flags & L.O_CREAT:
                raise FsError("ENOENT")
            fl = L.F_EXISTS | (L.F_APPEND if flags & L.O_APPEND else 0)
            self.slots[i] = FileEntry(name, b"", e.version + 1, fl)
            return i
        if flags & L.O_TRUNC:
            if e.append_only:
                raise FsError("EPERM")
            if e.data:
                e = replace(e, data=b"", version=e.version + 1)
        if flags & L.O_APPEND and not e.append_only:
            e = replace(e, flags=e.flags | L.F_APPEND, version=e.version + 1)
        self.slots[i] = e
        return i

    def read(self, fd: int, offset: int, n: int) -> bytes:
        e = self._live(fd)
        return e.data[offset:offset + n]

    def write(self, fd: int, offset: int, data: bytes) -> int:
        e = self._live(fd)
        if e.append_only:
            raise FsError("EPERM")
        if not data:
            return 0
        end = offset + len(data)
        if end > L.FILE_MAX:
            raise FsError("EFBIG")
        buf = bytearray(e.data)
        if len(buf) < end:
            buf += bytes(end - len(buf))
        buf[offset:end] = data
        self.slots[fd] = replace(e, data=bytes(buf), version=e.version + 1)
        return len(data)

    def append(self, fd: int, data: bytes) -> int:
        e = self._live(fd)
        if not data:
            return 0
        if len(e.data) + len(data) > L.FILE_MAX:
            raise FsError("EFBIG")
        self.slots[fd] = replace(e, data=e.data + bytes(data), version=e.version + 1)
        return len(data)

    def unlink(self, name: str) -> None:
        _check_name(name)
        i = self.index(name)
        if i is None:
            raise FsError("ENOENT")
        e = self.slots[i]
        if e.conflicted:
            raise FsError("ECONFLICT")
        if e.deleted:
            raise FsError("ENOENT")
        self.slots[i] = FileEntry(name, b"", e.version + 1, L.F_DELETED)

    def clear_conflict(self, name: str) -> None:
        _check_name(name)
        i = self.index(name)
        if i is None:
            raise FsError("ENOENT")
        e = self.slots[i]
        if not e.conflicted:
            raise FsError("EINVAL")
        self.slots[i] = replace(e, flags=e.flags & ~L.F_CONFLICT)

    # convenience used by the gateway and tests

    def put(self, name: str, data: bytes, append_only: bool = False) -> int:
        """Create or replace ``name`` with ``data``."""
        flags = L.O_CREAT | (L.O_APPEND if append_only else 0)
        fd = self.open(name, flags)
        e = self.slots[fd]
        if len(data) > L.FILE_MAX:
            raise FsError("EFBIG")
        self.slots[fd] = replace(e, data=bytes(data), version=e.version + 1)
        return fd

    # ---------------------------------------------------------------- memory

    @classmethod
    def from_space(cls, space: AddressSpace) -> "FileImage":
        table = space.read(L.FS_BASE, L.TABLE_SIZE)
        slots: list[FileEntry | None] = []
        for i in range(L.MAX_FILES):
            raw = table[i * L.ENTRY_SIZE:(i + 1) * L.ENTRY_SIZE]
            name = raw[:L.NAME_BYTES].split(b"\0", 1)[0]
            if not name:
                slots.append(None)
                continue
            length, version, flags, _off = struct.unpack_from("<4I", raw, L.NAME_BYTES)
            length = min(length, L.FILE_MAX)
            data = space.read(L.FS_DATA + i * L.FILE_MAX, length)
            slots.append(FileEntry(name.decode("latin-1"), data, version, flags))
        return cls(slots)

    def write_to(self, space: AddressSpace) -> None:
        """Store this image into ``space``, replacing any previous one."""
        table = bytearray(L.TABLE_SIZE)
        for i, e in enumerate(self.slots):
            data_addr = L.FS_DATA + i * L.FILE_MAX
            old = space.read(L.FS_BASE + i * L.ENTRY_SIZE + L.E_LEN, 4)
            (old_len,) = struct.unpack("<I", old)
            if old_len:
                space.write(data_addr, bytes(min(old_len, L.FILE_MAX)))
            if e is None:
                continue
            off = i * L.ENTRY_SIZE
            table[off:off + len(e.name)] = e.name.encode("latin-1")
            struct.pack_into("<4I", table, off + L.NAME_BYTES, len(e.data), e.version, e.flags,
                             data_addr - L.FS_BASE)
            if e.data:
                space.write(data_addr, e.data)
        space.write(L.FS_BASE, bytes(table))
