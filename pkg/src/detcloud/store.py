"""Per-customer versioned file store with a replayable commit log.

A store snapshot is a plain mapping ``name -> bytes``.  Each commit records
the diff it applied (``None`` marks a deletion), so the version chain can
be replayed from version 0 and compared with the latest snapshot.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path

Files = dict[str, bytes]
Diff = dict[str, "bytes | None"]

_MAGIC = b"DFS1"


def encode_files(files: dict[str, bytes | None]) -> bytes:
    """Serialise a snapshot or diff; names are sorted so equal maps encode equally."""
    out = bytearray(_MAGIC)
    out += struct.pack("<I", len(files))
    for name in sorted(files):
        data = files[name]
        raw = name.encode("utf-8")
        out += struct.pack("<HB", len(raw), data is None) + raw
        if data is not None:
            out += struct.pack("<I", len(data)) + data
    return bytes(out)


def decode_files(blob: bytes) -> dict[str, bytes | None]:
    if blob[:4] != _MAGIC:
        raise ValueError("not a file-map blob")
    (count,) = struct.unpack_from("<I", blob, 4)
    pos, files = 8, {}
    for _ in range(count):
        n, deleted = struct.unpack_from("<HB", blob, pos)
        pos += 3
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        if deleted:
            files[name] = None
            continue
        (size,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        files[name] = bytes(blob[pos:pos + size])
        pos += size
    if pos != len(blob):
        raise ValueError("trailing bytes in file-map blob")
    return files


def apply_diff(files: Files, diff: Diff) -> Files:
    out = dict(files)
    for name, data in diff.items():
        if data is None:
            out.pop(name, None)
        else:
            out[name] = data
    return out


@dataclass(frozen=True)
class Commit:
    version: int
    job_id: int
    diff: Diff


class UnknownCustomer(KeyError):
    pass


class Store:
    """Version chains for every customer.  ``commit`` is atomic and totally ordered."""

    def __init__(self, root: str | Path | None = None) -> None:
        self.root = Path(root) if root is not None else None
        self._lock = threading.Lock()
        self._initial: dict[str, Files] = {}
        self._versions: dict[str, list[Files]] = {}
        self._log: dict[str, list[Commit]] = {}
        if self.root is not None:
            self._load()

    # ---------------------------------------------------------------- queries

    def customers(self) -> list[str]:
        return sorted(self._versions)

    def _chain(self, customer: str) -> list[Files]:
        try:
            return self._versions[customer]
        except KeyError:
            raise UnknownCustomer(customer) from None

    def latest_version(self, customer: str) -> int:
        return len(self._chain(customer)) - 1

    def snapshot(self, customer: str, version: int | None = None) -> Files:
        chain = self._chain(customer)
        return dict(chain[-1 if version is None else version])

    def log(self, customer: str) -> list[Commit]:
        self._chain(customer)
        return list(self._log[customer])

    def replay(self, customer: str) -> Files:
        """Rebuild the latest snapshot from the initial one and the commit log."""
        files = dict(self._initial[customer])
        for c in self.log(customer):
            files = apply_diff(files, c.diff)
        return files

    # ---------------------------------------------------------------- updates

    def create(self, customer: str, files: Files | None = None) -> None:
        if not customer or any(ch.isspace() for ch in customer) or "/" in customer:
            raise ValueError(f"bad customer name {customer!r}")
        with self._lock:
            if customer in self._versions:
                raise ValueError(f"customer {customer!r} exists")
            initial = dict(files or {})
            self._initial[customer] = initial
            self._versions[customer] = [initial]
            self._log[customer] = []
            self._persist(customer, 0, initial, None)

    def commit(self, customer: str, base_version: int, diff: Diff, job_id: int) -> int | None:
        """First-committer-wins: install ``diff`` on top of ``base_version``.

        Returns the new version, or ``None`` if another commit got there
        first (the base is stale).
        """
        with self._lock:
            chain = self._chain(customer)
            if base_version != len(chain) - 1:
                return None
            files = apply_diff(chain[-1], diff)
            chain.append(files)
            version = len(chain) - 1
            commit = Commit(version, job_id, dict(diff))
            self._log[customer].append(commit)
            self._persist(customer, version, files, commit)
            return version

    # ---------------------------------------------------------------- disk

    def _persist(self, customer: str, version: int, files: Files, commit: Commit | None) -> None:
        if self.root is None:
            return
        d = self.root / customer
        d.mkdir(parents=True, exist_ok=True)
        (d / f"v{version}.dfs").write_bytes(encode_files(files))
        if commit is not None:
            (d / f"diff{version}.dfs").write_bytes(encode_files(commit.diff))
            with open(d / "commits.log", "a") as fh:
                fh.write(f"{version} {commit.job_id}\n")

    def _load(self) -> None:
        if not self.root.exists():
            return
        for d in sorted(p for p in self.root.iterdir() if p.is_dir()):
            customer = d.name
            initial = decode_files((d / "v0.dfs").read_bytes())
            self._initial[customer] = initial
            chain, log = [initial], []
            log_file = d / "commits.log"
            lines = log_file.read_text().split("\n") if log_file.exists() else []
            for line in filter(None, lines):
                version, job_id = map(int, line.split())
                diff = decode_files((d / f"diff{version}.dfs").read_bytes())
                log.append(Commit(version, job_id, diff))
                chain.append(decode_files((d / f"v{version}.dfs").read_bytes()))
            self._versions[customer] = chain
            self._log[customer] = log
