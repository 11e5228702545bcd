"""Control-flow graph over the control-transfer instructions of ``.text``."""
from __future__ import annotations

from dataclasses import dataclass, field

from ..declass import EdgeKind
from ..errors import UnannotatedIndirectJump
from ..isa import BRANCHES, INSN_BYTES, Instruction, Opcode
from .assembler import Program


@dataclass(frozen=True)
class CfgNode:
    addr: int
    opcode: Opcode
    taken: tuple[int, ...]          # targets of the taken transfer(s)
    fallthrough: int | None         # next pc when a conditional branch is not taken
    back_edge: bool = False         # conditional branch with target below its own address

    @property
    def conditional(self) -> bool:
        return self.fallthrough is not None

    def kind(self, target: int) -> EdgeKind:
        if self.opcode in BRANCHES:
            return EdgeKind.BACKWARD_BRANCH if target < self.addr else EdgeKind.FORWARD_BRANCH
        return EdgeKind.JUMP


@dataclass
class Cfg:
    program: Program
    nodes: dict[int, CfgNode] = field(default_factory=dict)

    @property
    def text_end(self) -> int:
        return self.program.layout.text_base + INSN_BYTES * len(self.program.text)

    def instruction_at(self, addr: int) -> Instruction | None:
        return self.program.instruction_at(addr)

    def back_edges(self) -> list[CfgNode]:
        return [n for n in self.nodes.values() if n.back_edge]

    def edges(self) -> list[tuple[int, int, str]]:
        """Static successor edges ``(from, to, label)`` for dumping."""
        out = []
        for n in sorted(self.nodes.values(), key=lambda n: n.addr):
            for t in n.taken:
                out.append((n.addr, t, "back" if n.back_edge else "taken"))
            if n.fallthrough is not None:
                out.append((n.addr, n.fallthrough, "fall"))
        return out

    def dump(self) -> str:
        lines = []
        for n in sorted(self.nodes.values(), key=lambda n: n.addr):
            label = self.program.label_for(n.addr) or ""
            targets = ",".join(f"{t:#x}" for t in n.taken)
            extra = " back-edge" if n.back_edge else ""
            fall = f" fall={n.fallthrough:#x}" if n.fallthrough is not None else ""
            lines.append(f"{n.addr:#08x} {label:<12} {n.opcode.name:<5} taken={targets}{fall}{extra}")
        return "\n".join(lines)


def build_cfg(program: Program) -> Cfg:
    cfg = Cfg(program)
    base = program.layout.text_base
    for i, ins in enumerate(program.text):
        addr = base + i * INSN_BYTES
        op = ins.opcode
        if op in BRANCHES:
            target = addr + ins.imm
            cfg.nodes[addr] = CfgNode(addr, op, (target,), addr + INSN_BYTES, target < addr)
        elif op is Opcode.JAL:
            cfg.nodes[addr] = CfgNode(addr, op, (addr + ins.imm,), None)
        elif op is Opcode.JALR:
            if addr not in program.targets:
                raise UnannotatedIndirectJump(f"JALR at {addr:#x} has no .targets annotation")
            cfg.nodes[addr] = CfgNode(addr, op, tuple(program.targets[addr]), None)
    return cfg
