"""Linking guest programs against the assembly runtime library.

A runtime-linked program defines ``main(argc r1, argv r2)``; the runtime
provides ``_start`` and the process, thread and file API (see
``guests/runtime.s``).  Sample guest programs live next to it.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

from . import layout
from .asm import GuestProgram, assemble


@lru_cache(maxsize=None)
def guest_source(name: str) -> str:
    """Text of a bundled guest source file such as ``"runtime.s"``."""
    return resources.files("detcloud.guests").joinpath(name).read_text()


def defines_source(defines: dict[str, int] | None) -> str:
    return "".join(f".equ {k}, {int(v)}\n" for k, v in sorted((defines or {}).items()))


def link(source: str, defines: dict[str, int] | None = None, name: str = "<guest>") -> GuestProgram:
    """Assemble ``source`` together with the layout prelude and the runtime."""
    return assemble(
        ("<prelude>", layout.prelude() + defines_source(defines)),
        (name, source),
        ("runtime.s", guest_source("runtime.s")),
    )


def load_guest(name: str, defines: dict[str, int] | None = None) -> GuestProgram:
    """Build a bundled sample guest (``guests/<name>.s``) with parameter overrides.

    Sample sources declare their tunable parameters in a header comment of
    the form ``; param NAME DEFAULT``; ``defines`` overrides the defaults.
    """
    text = guest_source(f"{name}.s")
    params = guest_params(name)
    unknown = set(defines or {}) - set(params)
    if unknown:
        raise ValueError(f"guest {name!r} has no parameters {sorted(unknown)}")
    values = params | dict(defines or {})
    if text.lstrip().startswith("; standalone"):
        return assemble(("<params>", defines_source(values)), (f"{name}.s", text))
    return link(text, values, name=f"{name}.s")


def guest_params(name: str) -> dict[str, int]:
    params = {}
    for line in guest_source(f"{name}.s").splitlines():
        parts = line.split()
        if len(parts) == 4 and parts[:2] == [";", "param"]:
            params[parts[2]] = int(parts[3], 0)
    return params


def bundled_guests() -> list[str]:
    return sorted(
        p.name[:-2]
        for p in resources.files("detcloud.guests").iterdir()
        if p.name.endswith(".s") and p.name != "runtime.s"
    )
