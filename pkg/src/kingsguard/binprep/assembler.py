"""Two-pass assembler for the textual ``.kasm`` format.

Syntax, one statement per line (``#`` or ``;`` start a comment)::

    .text | .data | .sensitive | .shared      switch section
    .entry LABEL        enclave entry point (at most one)
    .host LABEL         host start address (default: start of .text)
    .irq LABEL          host interrupt handler (default: monitor resumes at once)
    .release LABEL      store/OCALL site where declassification may happen
    .adp L1 L2 ... REL  hand-written declassification path (taken nodes, then release)
    .targets L1, L2     possible destinations of the next JALR
    .equ NAME, VALUE
    label:  OPCODE operands
    label:  .word v1, v2, ...   |   .zero N

Operands are registers (``x5``, ``a0``...), shared registers (``sr0``),
integers, symbols, ``sym+off``/``sym-off`` and ``imm(reg)`` memory operands.
Branch and JAL operands name the absolute target; the assembler stores the
pc-relative offset.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field

from ..errors import ParseError, UnresolvedLabel
from ..isa import INSN_BYTES, REG_NUMBERS, Instruction, Opcode
from ..layout import DEFAULT_LAYOUT, Layout

SECTIONS = {".text": "text", ".data": "data", ".sensitive": "sensitive", ".shared": "shared"}

_R_TYPE = {Opcode.ADD, Opcode.SUB, Opcode.AND, Opcode.OR, Opcode.XOR, Opcode.SLL, Opcode.SRL}
_B_TYPE = {Opcode.BEQ, Opcode.BNE, Opcode.BLT}
_LABEL = re.compile(r"^([A-Za-z_.$][\w.$]*)\s*:(.*)$")
_MEM = re.compile(r"^(.*)\((\w+)\)$")
_SYMBOL = re.compile(r"^[A-Za-z_.$][\w.$]*$")


@dataclass
class Program:
    """Result of assembling one source: sections, symbols and prep annotations."""

    layout: Layout
    text: list[Instruction]
    data: bytes
    sensitive: bytes
    shared: bytes
    symbols: dict[str, int]
    entry: int | None
    host_entry: int
    irq_handler: int
    releases: list[tuple[str, int]] = field(default_factory=list)
    manual_adps: list[tuple[int, list[str]]] = field(default_factory=list)  # (line, labels)
    targets: dict[int, list[int]] = field(default_factory=dict)
    source_lines: dict[int, int] = field(default_factory=dict)  # text address -> line

    @property
    def text_bytes(self) -> bytes:
        return b"".join(struct.pack("<Q", ins.encode()) for ins in self.text)

    def address_of(self, label: str) -> int:
        try:
            return self.symbols[label]
        except KeyError:
            raise UnresolvedLabel(label) from None

    def instruction_at(self, addr: int) -> Instruction | None:
        idx, rem = divmod(addr - self.layout.text_base, INSN_BYTES)
        if rem or not 0 <= idx < len(self.text):
            return None
        return self.text[idx]

    def label_for(self, addr: int) -> str | None:
        names = sorted(n for n, a in self.symbols.items() if a == addr and not n.startswith("."))
        return names[0] if names else None


@dataclass
class _Stmt:
    line: int
    section: str
    addr: int
    kind: str  # "insn" | "word"
    mnemonic: str
    operands: list[str]


def _split_operands(text: str) -> list[str]:
    text = text.strip()
    return [p.strip() for p in text.split(",")] if text else []


def _strip_comment(line: str) -> str:
    for mark in ("#", ";"):
        at = line.find(mark)
        if at >= 0:
            line = line[:at]
    return line.strip()


class _Assembler:
    def __init__(self, source: str, layout: Layout):
        self.source = source
        self.layout = layout
        self.symbols: dict[str, int] = {}
        self.equs: dict[str, int] = {}
        self.stmts: list[_Stmt] = []
        self.cursor = {"text": layout.text_base, "data": layout.data_base,
                       "sensitive": layout.sensitive_base, "shared": layout.shared_section}
        self.section = "text"
        self.entry_label: tuple[int, str] | None = None
        self.host_label: tuple[int, str] | None = None
        self.irq_label: tuple[int, str] | None = None
        self.release_labels: list[tuple[int, str]] = []
        self.adps: list[tuple[int, list[str]]] = []
        self.pending_targets: tuple[int, list[str]] | None = None
        self.targets: dict[int, tuple[int, list[str]]] = {}

    # -- pass 1 --------------------------------------------------------------

    def _define(self, name: str, value: int, line: int) -> None:
        if name in self.symbols or name in REG_NUMBERS:
            raise ParseError(line, f"duplicate or reserved label {name!r}")
        self.symbols[name] = value

    def _directive(self, line: int, name: str, rest: str) -> None:
        args = [a for a in re.split(r"[,\s]+", rest.strip()) if a]
        if name in SECTIONS:
            self.section = SECTIONS[name]
        elif name in (".entry", ".host", ".irq"):
            if len(args) != 1:
                raise ParseError(line, f"{name} takes one label")
            attr = {".entry": "entry_label", ".host": "host_label", ".irq": "irq_label"}[name]
            if getattr(self, attr) is not None:
                raise ParseError(line, f"more than one {name}")
            setattr(self, attr, (line, args[0]))
        elif name == ".release":
            if len(args) != 1:
                raise ParseError(line, ".release takes one label")
            self.release_labels.append((line, args[0]))
        elif name == ".adp":
            if not args:
                raise ParseError(line, ".adp needs at least the release label")
            self.adps.append((line, args))
        elif name == ".targets":
            if not args:
                raise ParseError(line, ".targets needs at least one label")
            self.pending_targets = (line, args)
        elif name == ".equ":
            if len(args) != 2:
                raise ParseError(line, ".equ NAME, VALUE")
            self._define(args[0], self._expr(args[1], line), line)
            self.equs[args[0]] = self.symbols[args[0]]
        elif name in (".word", ".zero"):
            if self.section == "text":
                raise ParseError(line, f"{name} is not allowed in .text")
            if name == ".word":
                for op in _split_operands(rest):
                    self._emit(line, "word", ".word", [op])
            else:
                count = self._expr(rest.strip(), line)
                if count < 0:
                    raise ParseError(line, ".zero count must be non-negative")
                for _ in range(count):
                    self._emit(line, "word", ".word", ["0"])
        else:
            raise ParseError(line, f"unknown directive {name}")

    def _emit(self, line: int, kind: str, mnemonic: str, operands: list[str]) -> None:
        addr = self.cursor[self.section]
        self.stmts.append(_Stmt(line, self.section, addr, kind, mnemonic, operands))
        self.cursor[self.section] = addr + 8

    def pass1(self) -> None:
        for lineno, raw in enumerate(self.source.splitlines(), start=1):
            text = _strip_comment(raw)
            while True:
                m = _LABEL.match(text)
                if not m or m.group(1).startswith(".") and m.group(1) in SECTIONS:
                    break
                self._define(m.group(1), self.cursor[self.section], lineno)
                text = m.group(2).strip()
            if not text:
                continue
            head, _, rest = text.partition(" ")
            if head.startswith("."):
                self._directive(lineno, head.lower(), rest)
                continue
            if self.section != "text":
                raise ParseError(lineno, "instructions must be in .text")
            try:
                op = Opcode[head.upper()]
            except KeyError:
                raise ParseError(lineno, f"unknown mnemonic {head!r}") from None
            if self.pending_targets is not None:
                if op is not Opcode.JALR:
                    raise ParseError(lineno, ".targets must precede a JALR")
                self.targets[self.cursor["text"]] = self.pending_targets
                self.pending_targets = None
            self._emit(lineno, "insn", op.name, _split_operands(rest))
        if self.pending_targets is not None:
            raise ParseError(self.pending_targets[0], ".targets without a following JALR")

    # -- pass 2 --------------------------------------------------------------

    def _expr(self, text: str, line: int) -> int:
        text = text.replace(" ", "")
        if not text:
            raise ParseError(line, "missing operand")
        total, sign, pos = 0, 1, 0
        for m in re.finditer(r"([+-]?)([^+-]+)", text):
            if m.start() != pos:
                raise ParseError(line, f"bad expression {text!r}")
            pos = m.end()
            sign = -1 if m.group(1) == "-" else 1
            term = m.group(2)
            try:
                value = int(term, 0)
            except ValueError:
                if not _SYMBOL.match(term):
                    raise ParseError(line, f"bad operand {term!r}") from None
                if term not in self.symbols:
                    raise UnresolvedLabel(f"line {line}: {term}")
                value = self.symbols[term]
            total += sign * value
        if pos != len(text):
            raise ParseError(line, f"bad expression {text!r}")
        return total

    def _reg(self, text: str, line: int) -> int:
        reg = REG_NUMBERS.get(text.strip().lower())
        if reg is None:
            raise ParseError(line, f"not a register: {text!r}")
        return reg

    def _sreg(self, text: str, line: int) -> int:
        m = re.fullmatch(r"sr(\d+)", text.strip().lower())
        if not m:
            raise ParseError(line, f"not a shared register: {text!r}")
        return int(m.group(1))

    def _mem(self, text: str, line: int) -> tuple[int, int]:
        m = _MEM.match(text.replace(" ", ""))
        if not m:
            raise ParseError(line, f"expected imm(reg), got {text!r}")
        imm = self._expr(m.group(1), line) if m.group(1) else 0
        return imm, self._reg(m.group(2), line)

    def _insn(self, st: _Stmt) -> Instruction:
        op, ops, line = Opcode[st.mnemonic], st.operands, st.line

        def need(n):
            if len(ops) != n:
                raise ParseError(line, f"{op.name} takes {n} operands, got {len(ops)}")

        if op in _R_TYPE:
            need(3)
            return Instruction(op, rd=self._reg(ops[0], line), rs1=self._reg(ops[1], line),
                               rs2=self._reg(ops[2], line))
        if op is Opcode.ADDI:
            need(3)
            return Instruction(op, rd=self._reg(ops[0], line), rs1=self._reg(ops[1], line),
                               imm=self._expr(ops[2], line))
        if op is Opcode.LD:
            need(2)
            imm, base = self._mem(ops[1], line)
            return Instruction(op, rd=self._reg(ops[0], line), rs1=base, imm=imm)
        if op is Opcode.SD:
            need(2)
            imm, base = self._mem(ops[1], line)
            return Instruction(op, rs1=base, rs2=self._reg(ops[0], line), imm=imm)
        if op in _B_TYPE:
            need(3)
            return Instruction(op, rs1=self._reg(ops[0], line), rs2=self._reg(ops[1], line),
                               imm=self._expr(ops[2], line) - st.addr)
        if op is Opcode.JAL:
            if len(ops) == 1:
                ops = ["x0", ops[0]]
            need(2)
            return Instruction(op, rd=self._reg(ops[0], line), imm=self._expr(ops[1], line) - st.addr)
        if op is Opcode.JALR:
            if len(ops) == 2 and "(" in ops[1]:
                imm, base = self._mem(ops[1], line)
            else:
                need(3)
                base, imm = self._reg(ops[1], line), self._expr(ops[2], line)
            return Instruction(op, rd=self._reg(ops[0], line), rs1=base, imm=imm)
        if op is Opcode.MOVSR:
            need(2)
            return Instruction(op, sr=self._sreg(ops[0], line), rs1=self._reg(ops[1], line))
        if op is Opcode.MOVRS:
            need(2)
            return Instruction(op, rd=self._reg(ops[0], line), sr=self._sreg(ops[1], line))
        need(0)
        return Instruction(op)

    def _label_addr(self, where: tuple[int, str] | None, section: str | None = "text") -> int | None:
        if where is None:
            return None
        line, name = where
        if name not in self.symbols:
            raise UnresolvedLabel(f"line {line}: {name}")
        addr = self.symbols[name]
        if section == "text" and not self.layout.text_base <= addr < self.cursor["text"]:
            raise ParseError(line, f"{name} is not a .text label")
        return addr

    def pass2(self) -> Program:
        text: list[Instruction] = []
        lines: dict[int, int] = {}
        blobs = {"data": bytearray(), "sensitive": bytearray(), "shared": bytearray()}
        for st in self.stmts:
            if st.kind == "insn":
                try:
                    text.append(self._insn(st))
                except ValueError as exc:
                    raise ParseError(st.line, str(exc)) from None
                lines[st.addr] = st.line
            else:
                value = self._expr(st.operands[0], st.line)
                if not -(1 << 63) <= value < (1 << 64):
                    raise ParseError(st.line, "word out of 64-bit range")
                blobs[st.section] += struct.pack("<Q", value & ((1 << 64) - 1))
        targets = {}
        for addr, (line, labels) in self.targets.items():
            targets[addr] = [self._label_addr((line, lab)) for lab in labels]
        releases = [(name, self._label_addr((line, name))) for line, name in self.release_labels]
        for line, labels in self.adps:
            for lab in labels:
                self._label_addr((line, lab))
        host = self._label_addr(self.host_label)
        irq = self._label_addr(self.irq_label)
        return Program(
            layout=self.layout,
            text=text,
            data=bytes(blobs["data"]),
            sensitive=bytes(blobs["sensitive"]),
            shared=bytes(blobs["shared"]),
            symbols=dict(self.symbols),
            entry=self._label_addr(self.entry_label),
            host_entry=self.layout.text_base if host is None else host,
            irq_handler=0 if irq is None else irq,
            releases=releases,
            manual_adps=list(self.adps),
            targets=targets,
            source_lines=lines,
        )


def assemble(source: str, layout: Layout = DEFAULT_LAYOUT) -> Program:
    asm = _Assembler(source, layout)
    asm.pass1()
    return asm.pass2()
