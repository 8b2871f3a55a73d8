"""Fixed virtual-memory layout shared by the guest runtime, the file image
model and the gateway.  Parent and child replicas use identical addresses,
which is what lets the kernel merge them word by word.

::

    0x00000000  program image, globals and heap       merged by tjoin
    0x10000000  stack windows: main, then one per child slot (1 MiB each)
    0x20000000  runtime metadata block
    0x21000000  per-slot base copies of the file table
    0x22000000  scratch file table
    0x23000000  scratch file data
    0x40000000  file table (256 entries x 80 bytes)
    0x40100000  file data, 4 MiB per file slot
    0xE0000000  exec loader (survives exec)
    0xE0100000  argument block: argc, argv[], strings
"""

MERGE_LO = 0x00000000
MERGE_HI = 0x10000000
STACK_BASE = 0x10000000
STACK_SIZE = 0x00100000
MAIN_STACK_TOP = STACK_BASE + STACK_SIZE
RT_META = 0x20000000
RT_BASES = 0x21000000
BASE_STRIDE = 0x8000
RT_SCRATCH_TBL = 0x22000000
RT_SCRATCH_DATA = 0x23000000
CLEAR_HI = 0x40000000

FS_BASE = 0x40000000
FS_DATA = 0x40100000
MAX_FILES = 256
FILE_MAX = 4 * 1024 * 1024
NAME_BYTES = 64
ENTRY_SIZE = 80
TABLE_SIZE = MAX_FILES * ENTRY_SIZE
FS_END = FS_DATA + MAX_FILES * FILE_MAX

RT_LOADER = 0xE0000000
ARGS_BASE = 0xE0100000
ARGS_SIZE = 0x10000
WHOLE_SPACE = 0xFFFFF000

# entry field offsets
E_LEN = 64
E_VER = 68
E_FLAGS = 72
E_OFF = 76

# entry flags
F_EXISTS = 1
F_APPEND = 2
F_CONFLICT = 4
F_DELETED = 8

# open() flags
O_CREAT = 1
O_APPEND = 2
O_TRUNC = 4

# runtime error codes (returned negated in r0)
ERRORS = {
    "ENOENT": 2,
    "ECONFLICT": 3,
    "ENOSPC": 4,
    "EFBIG": 5,
    "EBADF": 6,
    "EINVAL": 7,
    "EPERM": 8,
    "ECHILD": 9,
    "ENOEXEC": 10,
}

MAX_SLOTS = 64
SLOT_FORK = 1
SLOT_THREAD = 2
CONF_CAP = 256
DEFAULT_CHILD_FUEL = 1 << 27

# metadata block offsets
META = {
    "M_KCOUNT": 0x00,
    "M_FUEL_LO": 0x04,
    "M_FUEL_HI": 0x08,
    "M_SAVE_RA": 0x0C,
    "M_SAVE_SP": 0x10,
    "M_A6": 0x14,
    "M_A7": 0x18,
    "M_CFUEL_LO": 0x1C,
    "M_CFUEL_HI": 0x20,
    "M_MEMCONF": 0x24,
    "M_FSCONF": 0x28,
    "M_REGS": 0x40,
    "M_NUMBUF": 0x80,
    "M_SLOTS": 0x100,
    "M_CONFBUF": 0x400,
    "M_NAMEBUF": 0x800,
}

# abnormal child exit statuses have this bit set: 0x80000000 | kind << 8 | code
EXIT_ABNORMAL = 0x80000000


def prelude() -> str:
    """Assembler ``.equ`` lines for every constant the runtime uses."""
    from .isa import Opt, Sys

    values = {
        name: value
        for name, value in globals().items()
        if name.isupper() and isinstance(value, int)
    }
    values.update(META)
    values.update({name: -code for name, code in ERRORS.items()})
    values.update({f"SYS_{s.name}": int(s) for s in Sys})
    values.update({f"OPT_{o.name}": int(o) for o in Opt})
    return "".join(f".equ {name}, {value}\n" for name, value in values.items())
