"""Shared fixtures: guest inputs, random program generation and run helpers."""

from __future__ import annotations

import random

import pytest

from detcloud import isa
from detcloud.asm import GuestProgram
from detcloud.isa import Op
from detcloud.runtime import load_guest

FORKWAIT_INPUT = b"Hello, deterministic world!\n"


def guest_inputs(name: str, program: GuestProgram | None = None) -> dict[str, bytes]:
    """Files a bundled guest expects in its root image."""
    if name == "forkwait":
        return {"input": FORKWAIT_INPUT}
    if name == "execdemo":
        return {"prog": (program or load_guest("execdemo")).to_bytes()}
    return {}


# Guests named by the end-to-end determinism criterion, with parameters
# small enough for 400 runs each.
DETERMINISM_GUESTS = {
    "halt": {},
    "forkwait": {},
    "applog": {},
    "swap": {},
    "refclock": {},
    "bruteforce": {"RANGE": 8192},
    "matmult": {"N": 8},
    "qsort": {"N": 200},
}


_ALU = sorted(isa.ALU_OPS)
DATA = 0x8000          # scratch data region used by random programs


def random_program(rng: random.Random, length: int | None = None) -> GuestProgram:
    """A random straight-line-and-loops program over a small data region.

    r7 points at the data region; other registers are free.  Branch and
    jump offsets stay inside the program, so runs end by HALT, a trap,
    falling off the end into zero words (ILLEGAL) or fuel exhaustion.
    """
    n = length or rng.randint(1, 40)
    words = [isa.encode_loadi(7, DATA)]
    for i in range(1, n):
        k = rng.random()
        if k < 0.45:
            op = rng.choice(_ALU)
            rd, rs = rng.randrange(7), rng.randrange(8)
            if rng.random() < 0.5:
                words.append(isa.encode_alu(op, rd, rs, imm=rng.randint(-65536, 65535)))
            else:
                words.append(isa.encode_alu(op, rd, rs, rs2=rng.randrange(8)))
        elif k < 0.55:
            words.append(isa.encode_loadi(rng.randrange(7), rng.randint(-(1 << 19), (1 << 19) - 1),
                                          high=False))
        elif k < 0.7:
            op = rng.choice([Op.LOAD, Op.STORE])
            off = rng.randrange(0, 256, 4) if rng.random() < 0.9 else rng.randint(-8, 8)
            words.append(isa.encode_mem(op, rng.randrange(7), 7, off))
        elif k < 0.85:
            target = rng.randrange(n)
            op = rng.choice(sorted(isa.BRANCH_OPS))
            words.append(isa.encode_branch(op, rng.randrange(8), rng.randrange(8), 4 * (target - i)))
        elif k < 0.9:
            target = rng.randrange(n)
            words.append(isa.encode_jump(Op.JAL, rng.randrange(6), 0, 4 * (target - i)))
        elif k < 0.95:
            words.append(isa.encode_halt(rng.randrange(1 << 20)))
        else:
            w = rng.getrandbits(32)
            if w & 0xFF == Op.SYS:
                w ^= 1          # keep random programs free of kernel calls
            words.append(w)
    code = b"".join(w.to_bytes(4, "little") for w in words)
    return GuestProgram(0, code)


@pytest.fixture
def rng():
    return random.Random(1234)


# Acceptance criteria record one line each; printed in the terminal summary.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
