"""Instruction set, machine state and the fetch-decode-execute loop.

Instructions occupy one 64-bit word each:

    bits  0-7   opcode (0 is never valid, so zero-filled memory does not decode)
    bits  8-12  rd
    bits 13-17  rs1
    bits 18-22  rs2
    bits 23-27  shared-register index
    bits 28-31  reserved, must be 0
    bits 32-63  signed 32-bit immediate

``step`` applies one instruction.  Taint propagation, the store/address
checks and hash updates only happen in enclave mode; the security monitor's
ECALL handlers run natively inside ``step``.
"""
from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field

from .declass import DeclassState, EdgeKind, on_control_flow
from .dift import (
    MASK64, ZERO, Format, SharedRegister, StoreDecision, TaintedWord, check_address, check_store,
    read_shared, write_shared,
)
from .errors import (
    KingsguardError, OwnershipViolation, PageFault, StepBudgetExceeded, UndecodableInstruction,
)
from .memory import check_access
from .events import TraceEvent

INSN_BYTES = 8
N_REGS = 32


class Opcode(enum.IntEnum):
    ADD = 1
    SUB = 2
    AND = 3
    OR = 4
    XOR = 5
    SLL = 6
    SRL = 7
    ADDI = 8
    LD = 9
    SD = 10
    BEQ = 11
    BNE = 12
    BLT = 13
    JAL = 14
    JALR = 15
    MOVSR = 16
    MOVRS = 17
    ECALL = 18
    HALT = 19


ALU_OPS = {
    Opcode.ADD: lambda a, b: (a + b) & MASK64,
    Opcode.SUB: lambda a, b: (a - b) & MASK64,
    Opcode.AND: lambda a, b: a & b,
    Opcode.OR: lambda a, b: a | b,
    Opcode.XOR: lambda a, b: a ^ b,
    Opcode.SLL: lambda a, b: (a << (b & 63)) & MASK64,
    Opcode.SRL: lambda a, b: a >> (b & 63),
}
BRANCHES = {Opcode.BEQ, Opcode.BNE, Opcode.BLT}
CONTROL_FLOW = BRANCHES | {Opcode.JAL, Opcode.JALR}

ABI_NAMES = ("zero ra sp gp tp t0 t1 t2 s0 s1 a0 a1 a2 a3 a4 a5 a6 a7 "
             "s2 s3 s4 s5 s6 s7 s8 s9 s10 s11 t3 t4 t5 t6").split()
REG_NUMBERS = {name: i for i, name in enumerate(ABI_NAMES)}
REG_NUMBERS.update({f"x{i}": i for i in range(N_REGS)})
REG_NUMBERS["fp"] = 8
A0, A1, A2, A7 = 10, 11, 12, 17


def to_signed(v: int) -> int:
    return v - (1 << 64) if v >> 63 else v


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0
    sr: int = 0

    def __post_init__(self):
        for name in ("rd", "rs1", "rs2"):
            if not 0 <= getattr(self, name) < N_REGS:
                raise ValueError(f"{name} out of range")
        if not 0 <= self.sr < 32:
            raise ValueError("shared-register index out of range")
        if not -(1 << 31) <= self.imm < (1 << 31):
            raise ValueError(f"immediate {self.imm} does not fit in 32 bits")

    def encode(self) -> int:
        return (int(self.opcode) | self.rd << 8 | self.rs1 << 13 | self.rs2 << 18
                | self.sr << 23 | (self.imm & 0xFFFFFFFF) << 32)

    def __str__(self) -> str:
        op, r = self.opcode, ABI_NAMES
        if op in ALU_OPS:
            return f"{op.name} {r[self.rd]}, {r[self.rs1]}, {r[self.rs2]}"
        if op is Opcode.ADDI:
            return f"ADDI {r[self.rd]}, {r[self.rs1]}, {self.imm}"
        if op is Opcode.LD:
            return f"LD {r[self.rd]}, {self.imm}({r[self.rs1]})"
        if op is Opcode.SD:
            return f"SD {r[self.rs2]}, {self.imm}({r[self.rs1]})"
        if op in BRANCHES:
            return f"{op.name} {r[self.rs1]}, {r[self.rs2]}, {self.imm:+d}"
        if op is Opcode.JAL:
            return f"JAL {r[self.rd]}, {self.imm:+d}"
        if op is Opcode.JALR:
            return f"JALR {r[self.rd]}, {r[self.rs1]}, {self.imm}"
        if op is Opcode.MOVSR:
            return f"MOVSR sr{self.sr}, {r[self.rs1]}"
        if op is Opcode.MOVRS:
            return f"MOVRS {r[self.rd]}, sr{self.sr}"
        return op.name


def decode(word: int) -> Instruction:
    try:
        op = Opcode(word & 0xFF)
    except ValueError:
        raise UndecodableInstruction(f"bad opcode in {word:#018x}") from None
    if (word >> 28) & 0xF:
        raise UndecodableInstruction(f"reserved bits set in {word:#018x}")
    imm = (word >> 32) & 0xFFFFFFFF
    if imm >> 31:
        imm -= 1 << 32
    return Instruction(op, (word >> 8) & 31, (word >> 13) & 31, (word >> 18) & 31, imm,
                       (word >> 23) & 31)


class Mode(enum.Enum):
    HOST = "host"
    ENCLAVE = "enclave"


@dataclass
class MachineState:
    pc: int = 0
    regs: list = field(default_factory=lambda: [ZERO] * N_REGS)
    mode: Mode = Mode.HOST
    curr_eid: int = 0
    shared_regs: list = field(default_factory=lambda: [SharedRegister() for _ in range(4)])
    hash_state: DeclassState = field(default_factory=DeclassState)
    cycle: int = 0
    halted: bool = False
    trap: str | None = None
    trap_detail: str = ""

    def read(self, r: int) -> TaintedWord:
        return self.regs[r]

    def write(self, r: int, word: TaintedWord) -> None:
        if r:
            self.regs[r] = word

    def clear_regs(self) -> None:
        self.regs = [ZERO] * N_REGS

    def digest(self) -> str:
        h = hashlib.sha256()
        for w in self.regs:
            h.update(struct.pack("<QB", w.value, w.taint))
        for sr in self.shared_regs:
            h.update(struct.pack("<QQ", sr.value, sr.owner))
        h.update(struct.pack("<QQQ", self.pc, self.curr_eid, self.cycle))
        h.update(self.mode.value.encode() + self.hash_state.h_current)
        return h.hexdigest()


class Outcome(enum.Enum):
    CONTINUE = "Continue"
    HALTED = "Halted"
    TRAP = "Trap"


@dataclass(frozen=True)
class StepOutcome:
    kind: Outcome
    trap: str | None = None


CONTINUE = StepOutcome(Outcome.CONTINUE)
HALTED = StepOutcome(Outcome.HALTED)


# -- execution ----------------------------------------------------------------

_MAX_FAULTS_PER_ACCESS = 4


def _faulting(system, space, access):
    """Run ``access`` and service page faults until it succeeds."""
    for _ in range(_MAX_FAULTS_PER_ACCESS):
        try:
            return access()
        except PageFault as pf:
            system.page_fault(space, pf.vaddr)
    return access()


def _effective_address(state, system, ins, space) -> int:
    base = state.read(ins.rs1)
    vaddr = (base.value + ins.imm) & MASK64
    if state.mode is Mode.ENCLAVE and system.enforcement.protections_enabled and base.taint:
        owned = system.memory.is_enclave_target(space, vaddr)
        eff = check_address(TaintedWord(vaddr, base.taint), owned, system.enforcement)
        if not owned:
            system.log(state, "RedirectedAccess", eff)
        return eff
    return vaddr


def _transfer(state, system, source: int, target: int, kind: EdgeKind) -> None:
    state.pc = target
    hs = state.hash_state
    if state.mode is Mode.ENCLAVE and hs.enabled:
        c = system.counters
        c.taken_enclave_transfers += 1
        if on_control_flow(hs, source, target, kind):
            c.hash_updates += 1
            if system.trace.record_hash_updates:
                system.trace.emit(state.cycle, "HashUpdate", source, target, hs.h_current[:8])
        else:
            c.suppressed_loop_rehashes += 1


def _tainted_branch(state, system, *words) -> None:
    if state.mode is Mode.ENCLAVE and any(w.taint for w in words):
        system.counters.tainted_branches += 1
        system.trace.emit(state.cycle, "TaintedBranch", state.pc)


def _execute(state: MachineState, system, ins: Instruction) -> None:
    op = ins.opcode
    pc = state.pc
    enclave = state.mode is Mode.ENCLAVE
    prop = system.propagate
    mem = system.memory
    next_pc = (pc + INSN_BYTES) & MASK64

    if op in ALU_OPS:
        a, b = state.read(ins.rs1), state.read(ins.rs2)
        t = prop(Format.REG_REG, a.taint, b.taint) if enclave else 0
        state.write(ins.rd, TaintedWord(ALU_OPS[op](a.value, b.value), t))
        state.pc = next_pc
    elif op is Opcode.ADDI:
        a = state.read(ins.rs1)
        t = prop(Format.REG_IMM, a.taint) if enclave else 0
        state.write(ins.rd, TaintedWord((a.value + ins.imm) & MASK64, t))
        state.pc = next_pc
    elif op is Opcode.LD:
        space = system.space(state)
        eff = _effective_address(state, system, ins, space)
        word = _faulting(system, space, lambda: mem.load_word(eff, space))
        t = prop(Format.LOAD, shadow_t=word.taint) if enclave else 0
        state.write(ins.rd, TaintedWord(word.value, t))
        state.pc = next_pc
    elif op is Opcode.SD:
        _store(state, system, ins)
        state.pc = next_pc
    elif op in BRANCHES:
        a, b = state.read(ins.rs1), state.read(ins.rs2)
        _tainted_branch(state, system, a, b)
        if op is Opcode.BEQ:
            taken = a.value == b.value
        elif op is Opcode.BNE:
            taken = a.value != b.value
        else:
            taken = to_signed(a.value) < to_signed(b.value)
        if taken:
            target = (pc + ins.imm) & MASK64
            kind = EdgeKind.BACKWARD_BRANCH if target < pc else EdgeKind.FORWARD_BRANCH
            _transfer(state, system, pc, target, kind)
        else:
            state.pc = next_pc
    elif op is Opcode.JAL:
        state.write(ins.rd, TaintedWord(next_pc, 0))
        _transfer(state, system, pc, (pc + ins.imm) & MASK64, EdgeKind.JUMP)
    elif op is Opcode.JALR:
        base = state.read(ins.rs1)
        _tainted_branch(state, system, base)
        target = (base.value + ins.imm) & MASK64
        state.write(ins.rd, TaintedWord(next_pc, 0))
        _transfer(state, system, pc, target, EdgeKind.JUMP)
    elif op is Opcode.MOVSR:
        _write_shared(state, system, ins)
        state.pc = next_pc
    elif op is Opcode.MOVRS:
        _read_shared(state, system, ins)
        state.pc = next_pc
    elif op is Opcode.ECALL:
        system.monitor.ecall(state)
    elif op is Opcode.HALT:
        state.halted = True
    else:  # pragma: no cover - Opcode is exhaustive
        raise UndecodableInstruction(str(op))


def _store(state: MachineState, system, ins: Instruction) -> None:
    mem = system.memory
    space = system.space(state)
    enclave = state.mode is Mode.ENCLAVE
    value = state.read(ins.rs2)
    eff = _effective_address(state, system, ins, space)
    if not enclave:
        _faulting(system, space, lambda: mem.store_word(eff, TaintedWord(value.value, 0), space))
        return
    paddr = _faulting(system, space, lambda: mem.translate(space, eff))
    owned = mem.owner(paddr) == state.curr_eid
    out_t = system.propagate(Format.STORE, value.taint)
    if not system.enforcement.protections_enabled:
        word = TaintedWord(value.value, out_t)
    elif owned:
        word = TaintedWord(value.value, out_t)
    else:
        if not check_access(mem.ot, paddr, state.curr_eid):
            raise OwnershipViolation(paddr, mem.owner(paddr), state.curr_eid)
        decision = check_store(owned, out_t, lambda: system.adp_match(state))
        if decision is StoreDecision.COMMIT:
            word = TaintedWord(value.value, out_t)
        elif decision is StoreDecision.COMMIT_DECLASSIFIED:
            word = TaintedWord(value.value, 0)
            state.write(ins.rs2, word)
            system.counters.declassified += 1
            system.trace.emit(state.cycle, "CommitDeclassified", state.pc, eff, state.curr_eid,
                              state.hash_state.h_current[:8])
        else:
            word = ZERO
            state.write(ins.rs2, ZERO)
            system.log(state, "ZeroizedStore", eff)
    mem.store_word(eff, word, space)


def _write_shared(state: MachineState, system, ins: Instruction) -> None:
    sr = system.shared_register(state, ins.sr)
    word = state.read(ins.rs1)
    if system.enforcement.protections_enabled:
        write_shared(sr, word, state.curr_eid)
    else:
        sr.value, sr.owner = word.value, 0


def _read_shared(state: MachineState, system, ins: Instruction) -> None:
    sr = system.shared_register(state, ins.sr)
    enclave = state.mode is Mode.ENCLAVE
    if system.enforcement.protections_enabled:
        own = enclave and sr.owner == state.curr_eid
        value, denied = read_shared(sr, state.curr_eid)
        if denied:
            system.log(state, "DeniedSharedRead", ins.sr)
        taint = 1 if own else 0
    else:
        value, taint = sr.value, 0
    if not enclave:
        system.host_shared_reads.append((ins.sr, value))
    state.write(ins.rd, TaintedWord(value, taint))


def step(state: MachineState, system) -> StepOutcome:
    """Execute exactly one instruction (plus any page faults it takes)."""
    if state.halted:
        return HALTED
    if state.trap is not None:
        return StepOutcome(Outcome.TRAP, state.trap)
    system.counters.steps += 1
    try:
        space = system.space(state)
        pc = state.pc
        word = _faulting(system, space, lambda: system.memory.fetch_word(pc, space))
        _execute(state, system, decode(word))
    except KingsguardError as exc:
        state.trap = type(exc).__name__
        state.trap_detail = str(exc)
        system.trace.emit(state.cycle, "Trap", state.pc, state.trap, state.trap_detail)
        state.cycle += 1
        return StepOutcome(Outcome.TRAP, state.trap)
    finally:
        state.regs[0] = ZERO
    state.cycle += 1
    return HALTED if state.halted else CONTINUE


@dataclass(frozen=True)
class RunReport:
    halted: bool
    trap: str | None
    steps: int
    counters: tuple
    violations: tuple[TraceEvent, ...]
    nonenclave_digest: str
    host_outputs: tuple
    nonenclave_accesses: tuple
    state_digest: str

    @property
    def counter(self) -> dict:
        return dict(self.counters)

    def violation_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for v in self.violations:
            out[v.kind] = out.get(v.kind, 0) + 1
        return out


def make_report(state: MachineState, system) -> RunReport:
    return RunReport(
        halted=state.halted,
        trap=state.trap,
        steps=system.counters.steps,
        counters=tuple(system.counters.as_dict().items()),
        violations=tuple(system.trace.violations()),
        nonenclave_digest=system.memory.nonenclave_digest(),
        host_outputs=tuple(system.host_shared_reads),
        nonenclave_accesses=tuple(system.memory.nonenclave_accesses),
        state_digest=state.digest(),
    )


def run(state: MachineState, system, max_steps: int, interrupts=()) -> RunReport:
    """Step until HALT or a trap; raise StepBudgetExceeded after ``max_steps``.

    ``interrupts`` lists cycle numbers at which an asynchronous interrupt is
    delivered (ignored while the host is running).
    """
    if max_steps <= 0:
        raise ValueError("max_steps must be positive")
    pending = set(interrupts)
    for _ in range(max_steps):
        if state.cycle in pending and state.mode is Mode.ENCLAVE:
            system.monitor.interrupt(state, state.cycle)
        out = step(state, system)
        if out.kind is not Outcome.CONTINUE:
            return make_report(state, system)
    raise StepBudgetExceeded(make_report(state, system))
