"""Assembler, disassembler and the ``DVM1`` program container.

Container layout (all integers little-endian)::

    "DVM1" | entry pc (u32) | code length (u32) | code bytes
           | data count (u32) | { address (u32) | length (u32) | bytes }*

Code is loaded at address 0.  Grammar summary (one statement per line,
``;`` starts a comment)::

    label:                      defines label at the current address
    .text                       switch to the code segment (origin 0)
    .data ADDR                  start a data segment at ADDR (no ADDR: resume)
    .entry EXPR                 entry point (default: _start, else 0)
    .equ NAME, EXPR             assemble-time constant
    .word EXPR, ...             32-bit words
    .byte EXPR, ...             bytes
    .space N                    N zero bytes
    .ascii "s" / .asciz "s"     string bytes (asciz appends NUL)
    .align N                    pad with zeros to an N-byte boundary

Registers are ``r0``..``r7`` with aliases ``ra`` (r6) and ``sp`` (r7).
Pseudo-instructions: ``li``/``la``, ``mov``, ``nop``, ``not``, ``call``,
``ret``, ``push``, ``pop``, ``b``, ``bgtu``.  Expressions allow integers,
character literals, symbols and the operators ``+ - * // % << >> & | ^ ~``.
"""

from __future__ import annotations

import ast
import operator
import re
import struct
from dataclasses import dataclass, field

from . import isa
from .isa import Op
from .memory import AddressSpace

MAGIC = b"DVM1"


class AsmError(Exception):
    def __init__(self, msg: str, line: int | None = None, source: str = "<input>") -> None:
        self.msg = msg
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else ""
        super().__init__(f"{where}{msg}")


class ProgramError(ValueError):
    """A malformed program container."""


@dataclass
class GuestProgram:
    entry: int
    code: bytes
    data: list[tuple[int, bytes]] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<II", self.entry, len(self.code))
        out += self.code
        out += struct.pack("<I", len(self.data))
        for addr, blob in self.data:
            out += struct.pack("<II", addr, len(blob))
            out += blob
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GuestProgram":
        if len(blob) < 12 or blob[:4] != MAGIC:
            raise ProgramError("bad magic")
        entry, code_len = struct.unpack_from("<II", blob, 4)
        pos = 12
        if pos + code_len + 4 > len(blob):
            raise ProgramError("truncated code section")
        code = bytes(blob[pos:pos + code_len])
        pos += code_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        data = []
        for _ in range(count):
            if pos + 8 > len(blob):
                raise ProgramError("truncated data header")
            addr, n = struct.unpack_from("<II", blob, pos)
            pos += 8
            if pos + n > len(blob):
                raise ProgramError("truncated data section")
            if addr + n > 1 << 32:
                raise ProgramError("data section leaves the address space")
            data.append((addr, bytes(blob[pos:pos + n])))
            pos += n
        if pos != len(blob):
            raise ProgramError("trailing bytes after data sections")
        if code_len > 1 << 31:
            raise ProgramError("code section too large")
        return cls(entry, code, data)

    def load_into(self, space: AddressSpace) -> None:
        space.write(0, self.code)
        for addr, blob in self.data:
            space.write(addr, blob)

    @property
    def size(self) -> int:
        return len(self.code) + sum(len(b) for _, b in self.data)


# ---------------------------------------------------------------------------
# expressions

_BINOPS = {
    ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
    ast.FloorDiv: operator.floordiv, ast.Mod: operator.mod,
    ast.LShift: operator.lshift, ast.RShift: operator.rshift,
    ast.BitAnd: operator.and_, ast.BitOr: operator.or_, ast.BitXor: operator.xor,
}
_UNOPS = {ast.USub: operator.neg, ast.UAdd: operator.pos, ast.Invert: operator.invert}
_CHAR = re.compile(r"'(\\.|[^'\\])'")


class _Unresolved(Exception):
    pass


def _char_value(m: re.Match) -> str:
    return str(ord(ast.literal_eval(m.group(0))))


def evaluate(text: str, symbols: dict[str, int]) -> int:
    try:
        tree = ast.parse(_CHAR.sub(_char_value, text.strip()), mode="eval")
    except SyntaxError:
        raise ValueError(f"bad expression {text!r}") from None

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, int):
            return node.value
        if isinstance(node, ast.Name):
            if node.id in symbols:
                return symbols[node.id]
            raise _Unresolved(node.id)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            return _UNOPS[type(node.op)](ev(node.operand))
        raise ValueError(f"bad expression {text!r}")

    return ev(tree)


# ---------------------------------------------------------------------------
# parsing

_REGS = {f"r{i}": i for i in range(isa.NREGS)} | {"ra": 6, "sp": 7}
_ALU = {"add": Op.ADD, "sub": Op.SUB, "mul": Op.MUL, "divu": Op.DIVU, "and": Op.AND,
        "or": Op.OR, "xor": Op.XOR, "shl": Op.SHL, "shr": Op.SHR}
_BRANCH = {"beq": Op.BEQ, "bne": Op.BNE, "bltu": Op.BLTU}
_SIZES = {"push": 2, "pop": 2}
_MNEMONICS = set(_ALU) | set(_BRANCH) | {
    "loadi", "loadhi", "load", "store", "jmp", "jal", "sys", "halt",
    "li", "la", "mov", "nop", "not", "call", "ret", "push", "pop", "b", "bgtu",
}
_LABEL = re.compile(r"^\s*([A-Za-z_.$][\w.$]*)\s*:(?!=)")
_MEM = re.compile(r"^\[\s*(\w+)\s*(?:([+-])\s*(.+?))?\s*\]$")


def _split_operands(text: str) -> list[str]:
    parts, depth, cur, quote = [], 0, [], None
    for ch in text:
        if quote:
            cur.append(ch)
            if ch == quote and (len(cur) < 2 or cur[-2] != "\\"):
                quote = None
            continue
        if ch in "\"'":
            quote = ch
        elif ch in "[(":
            depth += 1
        elif ch in "])":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
            continue
        cur.append(ch)
    if "".join(cur).strip():
        parts.append("".join(cur).strip())
    return parts


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote and line[i - 1] != "\\":
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == ";":
            return line[:i]
    return line


@dataclass
class _Stmt:
    seg: "_Segment"
    addr: int
    op: str
    args: list[str]
    line: int
    source: str
    size: int = 0


@dataclass
class _Segment:
    origin: int
    size: int = 0
    stmts: list[_Stmt] = field(default_factory=list)


class Assembler:
    def __init__(self) -> None:
        self.symbols: dict[str, int] = {}
        self.equs: dict[str, int] = {}
        self.text = _Segment(0)
        self.segments: list[_Segment] = [self.text]
        self.entry_expr: tuple[str, int, str] | None = None

    def err(self, msg: str, st_or_line, source: str | None = None) -> AsmError:
        if isinstance(st_or_line, _Stmt):
            return AsmError(msg, st_or_line.line, st_or_line.source)
        return AsmError(msg, st_or_line, source or "<input>")

    # pass 1 ------------------------------------------------------------

    def parse(self, text: str, source: str = "<input>") -> None:
        seg = self.text
        last_data: _Segment | None = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = _strip_comment(raw).strip()
            while (m := _LABEL.match(line)):
                name = m.group(1)
                if name in self.symbols or name in self.equs:
                    raise self.err(f"duplicate label {name!r}", lineno, source)
                self.symbols[name] = seg.origin + seg.size
                line = line[m.end():].strip()
            if not line:
                continue
            parts = line.split(None, 1)
            op = parts[0].lower()
            args = _split_operands(parts[1]) if len(parts) > 1 else []
            if op == ".text":
                seg = self.text
                continue
            if op == ".data":
                if not args:
                    if last_data is None:
                        raise self.err(".data without address", lineno, source)
                    seg = last_data
                    continue
                try:
                    origin = evaluate(args[0], self.equs)
                except (_Unresolved, ValueError) as e:
                    raise self.err(f".data address must be a constant: {e}", lineno, source) from None
                if origin % 4 or not 0 <= origin < 1 << 32:
                    raise self.err(".data address must be word aligned", lineno, source)
                seg = _Segment(origin)
                self.segments.append(seg)
                last_data = seg
                continue
            if op == ".equ":
                if len(args) != 2:
                    raise self.err(".equ takes NAME, EXPR", lineno, source)
                name = args[0]
                if name in self.symbols or name in self.equs:
                    raise self.err(f"duplicate label {name!r}", lineno, source)
                try:
                    self.equs[name] = evaluate(args[1], self.equs)
                except (_Unresolved, ValueError) as e:
                    raise self.err(f"bad .equ value: {e}", lineno, source) from None
                continue
            if op == ".entry":
                self.entry_expr = (args[0] if args else "", lineno, source)
                continue
            st = _Stmt(seg, seg.origin + seg.size, op, args, lineno, source)
            st.size = self._size(st)
            seg.stmts.append(st)
            seg.size += st.size
            if seg.origin + seg.size > 1 << 32:
                raise self.err("segment leaves the address space", lineno, source)

    def _size(self, st: _Stmt) -> int:
        op, args = st.op, st.args
        if op.startswith("."):
            if op == ".word":
                return 4 * len(args)
            if op == ".byte":
                return len(args)
            if op in (".ascii", ".asciz"):
                return len(self._string(st)) + (op == ".asciz")
            if op == ".space":
                return self._const(st, args[0] if args else "")
            if op == ".align":
                n = self._const(st, args[0] if args else "")
                if n <= 0 or n & (n - 1):
                    raise self.err(".align needs a power of two", st)
                return -st.addr % n
            raise self.err(f"unknown directive {op}", st)
        if op not in _MNEMONICS:
            raise self.err(f"unknown mnemonic {op!r}", st)
        if op in ("li", "la"):
            if len(args) != 2:
                raise self.err(f"{op} takes 2 operands", st)
            try:
                value = evaluate(args[1], self.equs)
            except _Unresolved:
                return 8
            except ValueError as e:
                raise self.err(str(e), st) from None
            return 4 if -(1 << 19) <= value < (1 << 19) else 8
        return 4 * _SIZES.get(op, 1)

    def _const(self, st: _Stmt, text: str) -> int:
        try:
            return evaluate(text, self.equs)
        except (_Unresolved, ValueError) as e:
            raise self.err(f"expected constant expression: {e}", st) from None

    def _string(self, st: _Stmt) -> bytes:
        if len(st.args) != 1 or not st.args[0].startswith('"'):
            raise self.err(f"{st.op} takes one string", st)
        try:
            return ast.literal_eval(st.args[0]).encode("latin-1")
        except (ValueError, SyntaxError, UnicodeEncodeError):
            raise self.err("bad string literal", st) from None

    # pass 2 ------------------------------------------------------------

    def value(self, st: _Stmt, text: str) -> int:
        try:
            return evaluate(text, self.equs | self.symbols)
        except _Unresolved as e:
            raise self.err(f"undefined symbol {e}", st) from None
        except ValueError as e:
            raise self.err(str(e), st) from None

    def reg(self, st: _Stmt, text: str) -> int:
        r = _REGS.get(text.strip().lower())
        if r is None:
            raise self.err(f"expected register, got {text!r}", st)
        return r

    def is_reg(self, text: str) -> bool:
        return text.strip().lower() in _REGS

    def mem(self, st: _Stmt, text: str) -> tuple[int, int]:
        m = _MEM.match(text.strip())
        if not m:
            raise self.err(f"expected memory operand [reg+off], got {text!r}", st)
        base = self.reg(st, m.group(1))
        off = self.value(st, m.group(3)) if m.group(3) else 0
        return base, -off if m.group(2) == "-" else off

    def nargs(self, st: _Stmt, n: int) -> None:
        if len(st.args) != n:
            raise self.err(f"{st.op} takes {n} operand(s)", st)

    def encode(self, st: _Stmt) -> bytes:
        try:
            words = self._encode(st)
        except ValueError as e:
            raise self.err(str(e), st) from None
        if isinstance(words, bytes):
            return words
        return b"".join(struct.pack("<I", w) for w in words)

    def _encode(self, st: _Stmt):
        op, a = st.op, st.args
        if op == ".word":
            return [self.value(st, x) & isa.MASK32 for x in a]
        if op == ".byte":
            return bytes(self.value(st, x) & 0xFF for x in a)
        if op == ".ascii":
            return self._string(st)
        if op == ".asciz":
            return self._string(st) + b"\0"
        if op in (".space", ".align"):
            return bytes(st.size)
        if op in _ALU:
            self.nargs(st, 3)
            rd, rs1 = self.reg(st, a[0]), self.reg(st, a[1])
            if self.is_reg(a[2]):
                return [isa.encode_alu(_ALU[op], rd, rs1, rs2=self.reg(st, a[2]))]
            return [isa.encode_alu(_ALU[op], rd, rs1, imm=self.value(st, a[2]))]
        if op == "loadi":
            self.nargs(st, 2)
            return [isa.encode_loadi(self.reg(st, a[0]), self.value(st, a[1]))]
        if op == "loadhi":
            self.nargs(st, 2)
            return [isa.encode_loadi(self.reg(st, a[0]), self.value(st, a[1]), high=True)]
        if op in ("load", "store"):
            self.nargs(st, 2)
            base, off = self.mem(st, a[1])
            return [isa.encode_mem(Op.LOAD if op == "load" else Op.STORE, self.reg(st, a[0]), base, off)]
        if op in _BRANCH or op == "bgtu":
            self.nargs(st, 3)
            r1, r2 = self.reg(st, a[0]), self.reg(st, a[1])
            if op == "bgtu":
                r1, r2, code = r2, r1, Op.BLTU
            else:
                code = _BRANCH[op]
            return [isa.encode_branch(code, r1, r2, self.value(st, a[2]) - st.addr)]
        if op in ("jmp", "b", "jal", "call"):
            if op in ("jal",):
                self.nargs(st, 2)
                rd, target = self.reg(st, a[0]), a[1]
            else:
                self.nargs(st, 1)
                rd, target = (6 if op == "call" else 0), a[0]
            code = Op.JMP if op in ("jmp", "b") else Op.JAL
            target = target.strip()
            if self.is_reg(target):
                return [isa.encode_jump(code, rd, self.reg(st, target), 0, register=True)]
            if target.startswith("["):
                base, off = self.mem(st, target)
                return [isa.encode_jump(code, rd, base, off, register=True)]
            return [isa.encode_jump(code, rd, 0, self.value(st, target) - st.addr)]
        if op == "ret":
            self.nargs(st, 0)
            return [isa.encode_jump(Op.JMP, 0, 6, 0, register=True)]
        if op == "sys":
            self.nargs(st, 0)
            return [isa.encode_sys()]
        if op == "halt":
            if not a:
                return [isa.encode_halt(0)]
            self.nargs(st, 1)
            if self.is_reg(a[0]):
                return [isa.encode_halt(reg=self.reg(st, a[0]))]
            return [isa.encode_halt(self.value(st, a[0]))]
        if op in ("li", "la"):
            rd, value = self.reg(st, a[0]), self.value(st, a[1]) & isa.MASK32
            if st.size == 4:
                return [isa.encode_loadi(rd, isa.sext(value, 32))]
            return [isa.encode_loadi(rd, value & 0xFFF), isa.encode_loadi(rd, value >> 12, high=True)]
        if op == "mov":
            self.nargs(st, 2)
            return [isa.encode_alu(Op.ADD, self.reg(st, a[0]), self.reg(st, a[1]), imm=0)]
        if op == "not":
            self.nargs(st, 2)
            return [isa.encode_alu(Op.XOR, self.reg(st, a[0]), self.reg(st, a[1]), imm=-1)]
        if op == "nop":
            self.nargs(st, 0)
            return [isa.encode_alu(Op.ADD, 0, 0, imm=0)]
        if op == "push":
            self.nargs(st, 1)
            r = self.reg(st, a[0])
            return [isa.encode_alu(Op.SUB, 7, 7, imm=4), isa.encode_mem(Op.STORE, r, 7, 0)]
        if op == "pop":
            self.nargs(st, 1)
            r = self.reg(st, a[0])
            return [isa.encode_mem(Op.LOAD, r, 7, 0), isa.encode_alu(Op.ADD, 7, 7, imm=4)]
        raise self.err(f"unknown mnemonic {op!r}", st)

    def finish(self) -> GuestProgram:
        images = []
        for seg in self.segments:
            buf = bytearray()
            for st in seg.stmts:
                chunk = self.encode(st)
                assert len(chunk) == st.size, (st.op, len(chunk), st.size)
                buf += chunk
            buf += bytes(-len(buf) % 4)
            images.append((seg.origin, bytes(buf)))
        spans = sorted((o, o + len(b)) for o, b in images if b)
        for (_, end), (start, _) in zip(spans, spans[1:]):
            if start < end:
                raise AsmError(f"segments overlap at {start:#x}")
        if self.entry_expr is not None:
            text, line, source = self.entry_expr
            st = _Stmt(self.text, 0, ".entry", [], line, source)
            entry = self.value(st, text) & isa.MASK32
        else:
            entry = self.symbols.get("_start", 0)
        data = [(o, b) for o, b in images[1:] if b]
        return GuestProgram(entry, images[0][1], data)


def assemble(*sources: str | tuple[str, str]) -> GuestProgram:
    """Assemble one or more sources (text, or ``(name, text)`` pairs) into a program."""
    asm = Assembler()
    for i, src in enumerate(sources):
        name, text = src if isinstance(src, tuple) else (f"<input{i}>" if i else "<input>", src)
        asm.parse(text, name)
    return asm.finish()


def format_instruction(word: int, addr: int) -> str | None:
    """Render ``word`` canonically, or ``None`` if it is not a canonical encoding."""
    d = isa.decode(word)
    try:
        op = Op(d.op)
    except ValueError:
        return None
    r = lambda i: f"r{i}"  # noqa: E731
    name = op.name.lower()
    if op == Op.LOADI:
        text = f"loadhi {r(d.a)}, {d.imm:#x}" if d.flag else f"loadi {r(d.a)}, {d.imm}"
        redo = isa.encode_loadi(d.a, d.imm, high=d.flag)
    elif op in isa.ALU_OPS:
        if d.flag:
            text, redo = f"{name} {r(d.a)}, {r(d.b)}, {d.imm}", isa.encode_alu(op, d.a, d.b, imm=d.imm)
        else:
            text, redo = f"{name} {r(d.a)}, {r(d.b)}, {r(d.c)}", isa.encode_alu(op, d.a, d.b, rs2=d.c)
    elif op in (Op.LOAD, Op.STORE):
        text, redo = f"{name} {r(d.a)}, [{r(d.b)}{d.imm:+d}]", isa.encode_mem(op, d.a, d.b, d.imm)
    elif op in isa.BRANCH_OPS:
        target = (addr + d.imm) & isa.MASK32
        text, redo = f"{name} {r(d.a)}, {r(d.b)}, {target:#x}", isa.encode_branch(op, d.a, d.b, d.imm)
        if target != addr + d.imm:
            return None
    elif op in (Op.JMP, Op.JAL):
        link = f"{r(d.a)}, " if op == Op.JAL else ""
        if d.flag:
            text = f"{name} {link}[{r(d.b)}{d.imm:+d}]"
        else:
            target = addr + d.imm
            if not 0 <= target <= isa.MASK32:
                return None
            text = f"{name} {link}{target:#x}"
        redo = isa.encode_jump(op, d.a if op == Op.JAL else 0, d.b if d.flag else 0, d.imm, d.flag)
    elif op == Op.SYS:
        text, redo = "sys", isa.encode_sys()
    else:
        text = f"halt {r(d.a)}" if d.flag else f"halt {d.imm}"
        redo = isa.encode_halt(reg=d.a) if d.flag else isa.encode_halt(d.imm)
    return text if redo == word else None


def disassemble(program: GuestProgram) -> str:
    lines = [f".entry {program.entry:#x}", ".text"]
    lines += _dis_segment(program.code, 0, code=True)
    for addr, blob in program.data:
        lines.append(f".data {addr:#x}")
        lines += _dis_segment(blob, addr, code=False)
    return "\n".join(lines) + "\n"


def _dis_segment(blob: bytes, origin: int, code: bool) -> list[str]:
    out = []
    whole = len(blob) - len(blob) % 4
    for off in range(0, whole, 4):
        (word,) = struct.unpack_from("<I", blob, off)
        text = format_instruction(word, origin + off) if code else None
        out.append(f"    {text}" if text else f"    .word {word:#010x}")
    if whole < len(blob):
        out.append("    .byte " + ", ".join(f"{b:#04x}" for b in blob[whole:]))
    return out
