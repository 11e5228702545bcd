"""Security monitor: image verification, enclave lifecycle and LOAD-PAGE.

ECALL numbers (register a7)::

    1 ECREATE  host     a0 = program index           -> a0 = EID
    2 EENTER   host     a0 = EID
    3 EEXIT    enclave  a0 = return value (gated like a store to host memory)
    4 OCALL    enclave  a0 = buffer, a1 = length in bytes
    5 ORETURN  host     a0 = EID, a1 = result length  (copies staging page back)
    6 ERESUME  host     a0 = EID                      (after an interrupt)
    7 EDESTROY host     a0 = EID

Whenever control returns to the host the host register file saved at entry is
restored, then a0/a1/a2 carry the transition's results; a1 is the reason code
(0 exit, 1 OCALL).  After an interrupt the registers are all zero instead.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .binprep import image as img
from .declass import AdpHashSet, DeclassState, Lifecycle, lifecycle, matches_adp
from .dift import ZERO, StoreDecision, TaintedWord, check_store
from .errors import (
    BufferOutOfEnclave, IllegalTransition, ImageError, LengthExceeded, MisalignedAccess,
    NoSuchEnclave, NothingToResume, TooManyEnclaves,
)
from .isa import A0, A1, A2, A7, INSN_BYTES, MachineState, Mode
from .layout import PAGE_SIZE, WORD, page_align
from .memory import SHADOW_BYTES_PER_PAGE, PageTableEntry

ECREATE, EENTER, EEXIT, OCALL, ORETURN, ERESUME, EDESTROY = range(1, 8)
EXIT_REASON_EEXIT, EXIT_REASON_OCALL = 0, 1


@dataclass(frozen=True)
class VerifiedProgram:
    image: img.ProgramImage
    meta: img.ImageMeta
    taints: bytes
    hashes: AdpHashSet

    @property
    def sensitive(self) -> bytes:
        return self.image.section(img.SENS)

    def segments(self, with_sensitive: bool):
        m = self.meta
        yield m.text_base, self.image.section(img.TEXT)
        yield m.data_base, self.image.section(img.DATA)
        if with_sensitive:
            yield m.sensitive_base, self.sensitive


def load_image(image: img.ProgramImage, key: bytes) -> VerifiedProgram:
    """Verify presence and MACs of the metadata sections; the caller aborts creation on error."""
    img.verify_image(image, key)
    meta = image.meta
    taints = image.sections[img.TAINTS]
    n_words = len(image.section(img.SENS)) // WORD
    if len(taints) != (n_words + 7) // 8:
        raise ImageError(f"taint bitmap of {len(taints)} bytes does not cover {n_words} words")
    try:
        hashes = AdpHashSet.from_bytes(image.sections[img.HASHES])
    except ValueError as exc:
        raise ImageError(str(exc)) from None
    return VerifiedProgram(image, meta, taints, hashes)


class Status(enum.Enum):
    CREATED = "created"
    RUNNING = "running"
    IN_OCALL = "ocall"
    INTERRUPTED = "interrupted"
    EXITED = "exited"


@dataclass
class HostContext:
    regs: list
    pc: int


@dataclass
class EnclaveContext:
    regs: list
    pc: int
    declass: DeclassState


@dataclass
class EnclaveRecord:
    eid: int
    program: VerifiedProgram
    entry_point: int
    taint_pages: list[int]
    taint_len: int
    hash_pages: list[int]
    hash_buf: AdpHashSet
    d_star_range: tuple[int, int]
    declass: DeclassState = field(default_factory=DeclassState)
    status: Status = Status.CREATED
    host_ctx: HostContext | None = None
    saved_ctx: EnclaveContext | None = None
    host_resume_pc: int = 0
    ocall_resume_pc: int | None = None
    ocall_buf: int = 0
    ocall_len: int = 0


class SecurityMonitor:
    def __init__(self, system, key: bytes, programs, max_enclaves: int = 8, ocall_max: int = PAGE_SIZE):
        self.system = system
        self.key = key
        self.programs = list(programs)
        self.max_enclaves = max_enclaves
        self.ocall_max = min(ocall_max, PAGE_SIZE)
        self.enclaves: dict[int, EnclaveRecord] = {}
        self.next_eid = 1
        self._idle = DeclassState()

    # -- helpers -------------------------------------------------------------

    @property
    def memory(self):
        return self.system.memory

    def record(self, eid: int) -> EnclaveRecord:
        try:
            return self.enclaves[eid]
        except KeyError:
            raise NoSuchEnclave(f"no enclave with EID {eid}") from None

    def _event(self, state: MachineState, kind: str, *fields) -> None:
        self.system.trace.emit(state.cycle, kind, *fields)

    def taint_buf(self, rec: EnclaveRecord) -> bytes:
        """Read T* back out of the monitor-private pages."""
        raw = b"".join(self.memory.phys.read_page(p) for p in rec.taint_pages)
        return raw[:rec.taint_len]

    def _to_host(self, state: MachineState, rec: EnclaveRecord) -> None:
        state.regs = list(rec.host_ctx.regs) if rec.host_ctx else [ZERO] * len(state.regs)
        state.mode = Mode.HOST
        state.curr_eid = 0
        state.hash_state = self._idle
        state.pc = rec.host_resume_pc
        self.system.counters.context_switches += 1

    def _to_enclave(self, state: MachineState, rec: EnclaveRecord, save_host: bool) -> None:
        if save_host:
            rec.host_ctx = HostContext(list(state.regs), state.pc + INSN_BYTES)
            rec.host_resume_pc = state.pc + INSN_BYTES
        state.mode = Mode.ENCLAVE
        state.curr_eid = rec.eid
        state.hash_state = rec.declass
        rec.status = Status.RUNNING
        self.system.counters.context_switches += 1

    def _require(self, state: MachineState, mode: Mode, what: str) -> None:
        if state.mode is not mode:
            raise IllegalTransition(f"{what} is not allowed in {state.mode.value} mode")

    def _gate(self, state: MachineState, word: TaintedWord, where) -> tuple[TaintedWord, StoreDecision]:
        """Boundary check for a word leaving the enclave by a monitor path."""
        if not self.system.enforcement.protections_enabled:
            return TaintedWord(word.value, 0), StoreDecision.COMMIT
        decision = check_store(False, word.taint, lambda: self.system.adp_match(state))
        if decision is StoreDecision.ZEROIZE:
            self.system.log(state, "ZeroizedStore", where)
            return ZERO, decision
        if decision is StoreDecision.COMMIT_DECLASSIFIED:
            self.system.counters.declassified += 1
            self._event(state, "CommitDeclassified", state.pc, where, state.curr_eid,
                        state.hash_state.h_current[:8])
        return TaintedWord(word.value, 0), decision

    # -- operations ----------------------------------------------------------

    def ecreate(self, program_index: int = 0) -> int:
        if len(self.enclaves) >= self.max_enclaves:
            raise TooManyEnclaves(f"at most {self.max_enclaves} enclaves")
        if not 0 <= program_index < len(self.programs):
            raise NoSuchEnclave(f"no program with index {program_index}")
        program = load_image(self.programs[program_index], self.key)
        mem = self.memory
        eid = self.next_eid
        rec = EnclaveRecord(
            eid=eid,
            program=program,
            entry_point=program.meta.entry,
            taint_pages=mem.allocate_secure(program.taints),
            taint_len=len(program.taints),
            hash_pages=mem.allocate_secure(program.image.sections[img.HASHES]),
            hash_buf=program.hashes,
            d_star_range=(program.meta.sensitive_base,
                          program.meta.sensitive_base + len(program.sensitive)),
        )
        self.next_eid += 1
        mem.new_space(eid)
        self.enclaves[eid] = rec
        return eid

    def eenter(self, state: MachineState, eid: int) -> None:
        self._require(state, Mode.HOST, "EENTER")
        rec = self.record(eid)
        if rec.status not in (Status.CREATED, Status.EXITED):
            raise IllegalTransition(f"enclave {eid} is {rec.status.value}")
        lifecycle(rec.declass, Lifecycle.ENTER)
        self._to_enclave(state, rec, save_host=True)
        state.pc = rec.entry_point
        self._event(state, "EEnter", eid, rec.entry_point)

    def eexit(self, state: MachineState) -> None:
        self._require(state, Mode.ENCLAVE, "EEXIT")
        rec = self.record(state.curr_eid)
        ret, _ = self._gate(state, state.read(A0), "a0")
        lifecycle(rec.declass, Lifecycle.EXIT)
        rec.status = Status.EXITED
        rec.saved_ctx = None
        self._to_host(state, rec)
        state.write(A0, ret)
        state.write(A1, TaintedWord(EXIT_REASON_EEXIT))
        self._event(state, "EExit", rec.eid, ret.value)

    def _check_buffer(self, state: MachineState, rec: EnclaveRecord, buf: int, length: int) -> None:
        if length > self.ocall_max:
            raise LengthExceeded(f"OCALL length {length} exceeds {self.ocall_max}")
        if buf % WORD or length % WORD:
            raise MisalignedAccess("OCALL buffer and length must be word aligned")
        mem = self.memory
        space = mem.spaces[rec.eid]
        for page in range(page_align(buf), buf + length, PAGE_SIZE):
            if mem.entry(space, page) is None and not mem.is_shared(page):
                self.system.page_fault(space, page)
            pte = mem.entry(space, page)
            if pte is None or mem.ot[pte.ppn] != rec.eid:
                raise BufferOutOfEnclave(f"OCALL buffer page {page:#x} is not enclave memory")

    def _staging(self, rec: EnclaveRecord) -> PageTableEntry:
        mem = self.memory
        vaddr = mem.layout.staging_page(rec.eid)
        pte = mem.entry(mem.host, vaddr)
        if pte is None:
            mem.allocate_page(mem.host, vaddr, backing="staging")
            pte = mem.entry(mem.host, vaddr)
        return pte

    def ocall(self, state: MachineState) -> None:
        self._require(state, Mode.ENCLAVE, "OCALL")
        rec = self.record(state.curr_eid)
        buf, length = state.read(A0).value, state.read(A1).value
        self._check_buffer(state, rec, buf, length)
        mem = self.memory
        space = mem.spaces[rec.eid]
        staging = self._staging(rec)
        stage_vaddr = mem.layout.staging_page(rec.eid)
        for off in range(0, length, WORD):
            src = mem.translate(space, buf + off)
            word = TaintedWord(mem.phys.read_word(src), mem.phys.read_taint(src))
            out, _ = self._gate(state, word, stage_vaddr + off)
            mem.phys.write_word(staging.ppn * PAGE_SIZE + off, out.value)
            self.system.counters.sm_word_copies += 1
        rec.saved_ctx = EnclaveContext(list(state.regs), state.pc + INSN_BYTES, rec.declass)
        rec.ocall_resume_pc = state.pc + INSN_BYTES
        rec.ocall_buf, rec.ocall_len = buf, length
        lifecycle(rec.declass, Lifecycle.SUSPEND)
        rec.status = Status.IN_OCALL
        self._to_host(state, rec)
        state.write(A0, TaintedWord(stage_vaddr))
        state.write(A1, TaintedWord(EXIT_REASON_OCALL))
        state.write(A2, TaintedWord(length))
        self._event(state, "OCall", rec.eid, stage_vaddr, length)

    def oreturn(self, state: MachineState, eid: int, length: int) -> None:
        self._require(state, Mode.HOST, "ORETURN")
        rec = self.record(eid)
        if rec.status is not Status.IN_OCALL or rec.saved_ctx is None:
            raise NothingToResume(f"enclave {eid} is not waiting on an OCALL")
        if length > rec.ocall_len or length % WORD:
            raise LengthExceeded(f"OCALL result of {length} bytes exceeds the {rec.ocall_len}-byte buffer")
        mem = self.memory
        space = mem.spaces[rec.eid]
        staging = self._staging(rec)
        for off in range(0, length, WORD):
            value = mem.phys.read_word(staging.ppn * PAGE_SIZE + off)
            dst = mem.translate(space, rec.ocall_buf + off)
            if mem.ot[dst // PAGE_SIZE] != rec.eid:
                raise BufferOutOfEnclave(f"OCALL buffer at {rec.ocall_buf + off:#x} left the enclave")
            mem.phys.write_word(dst, value)
            mem.phys.write_taint(dst, 0)  # data from outside the enclave is untainted
            self.system.counters.sm_word_copies += 1
        self._resume_saved(state, rec, save_host=True)
        state.write(A0, TaintedWord(length))
        self._event(state, "OReturn", eid, length)

    def _resume_saved(self, state: MachineState, rec: EnclaveRecord, save_host: bool) -> None:
        ctx = rec.saved_ctx
        rec.declass = ctx.declass
        lifecycle(rec.declass, Lifecycle.RESUME)
        self._to_enclave(state, rec, save_host)
        state.regs = list(ctx.regs)
        state.pc = ctx.pc
        rec.saved_ctx = None
        rec.ocall_resume_pc = None

    def aex(self, state: MachineState) -> None:
        """Asynchronous exit: save and scrub the enclave context, then enter the host."""
        self._require(state, Mode.ENCLAVE, "AEX")
        rec = self.record(state.curr_eid)
        rec.saved_ctx = EnclaveContext(list(state.regs), state.pc, rec.declass)
        lifecycle(rec.declass, Lifecycle.SUSPEND)
        rec.status = Status.INTERRUPTED
        state.clear_regs()
        state.mode = Mode.HOST
        state.curr_eid = 0
        state.hash_state = self._idle
        state.pc = rec.program.meta.irq_handler
        self.system.counters.context_switches += 1
        self._event(state, "AEX", rec.eid, rec.saved_ctx.pc)

    def resume(self, state: MachineState, eid: int) -> None:
        self._require(state, Mode.HOST, "ERESUME")
        rec = self.record(eid)
        if rec.status is not Status.INTERRUPTED or rec.saved_ctx is None:
            raise NothingToResume(f"enclave {eid} has no interrupted context")
        self._resume_saved(state, rec, save_host=False)
        self._event(state, "Resume", eid, state.pc)

    def interrupt(self, state: MachineState, cycle: int) -> None:
        eid = state.curr_eid
        irq = self.record(eid).program.meta.irq_handler
        self.aex(state)
        if not irq:
            # no host handler registered: the monitor resumes the enclave itself
            self.resume(state, eid)

    def destroy(self, state: MachineState, eid: int) -> None:
        self._require(state, Mode.HOST, "EDESTROY")
        rec = self.record(eid)
        mem = self.memory
        mem.reclaim_enclave(eid)
        for ppn in rec.taint_pages + rec.hash_pages:
            mem.phys.fill_page(ppn)
            mem.ot.clear(ppn)
            mem._free.append(ppn)
        del self.enclaves[eid]
        self._event(state, "EDestroy", eid)

    def on_page_fault(self, space, vaddr: int, ppn: int) -> None:
        """LOAD-PAGE: place the sensitive-section taints of a freshly backed enclave page."""
        rec = self.enclaves.get(space.eid)
        if rec is None:
            return
        page = page_align(vaddr)
        lo, hi = rec.d_star_range
        if page_align(lo) <= page < hi:
            buf = self.taint_buf(rec)
            rel = page - lo
            start = rel >> 6
            block = bytearray(SHADOW_BYTES_PER_PAGE)
            for i in range(SHADOW_BYTES_PER_PAGE):
                if 0 <= start + i < len(buf):
                    block[i] = buf[start + i]
            self.memory.phys.write_shadow_block(ppn, bytes(block))
        else:
            self.memory.phys.write_shadow_block(ppn, bytes(SHADOW_BYTES_PER_PAGE))

    def adp_match(self, state: MachineState) -> bool:
        rec = self.record(state.curr_eid)
        return matches_adp(state.hash_state, rec.hash_buf)

    # -- ECALL dispatch ------------------------------------------------------

    def ecall(self, state: MachineState) -> None:
        num = state.read(A7).value
        arg0, arg1 = state.read(A0).value, state.read(A1).value
        if state.mode is Mode.ENCLAVE:
            if num == EEXIT:
                self.eexit(state)
            elif num == OCALL:
                self.ocall(state)
            else:
                raise IllegalTransition(f"ECALL {num} is not available inside an enclave")
            return
        if num == ECREATE:
            eid = self.ecreate(arg0)
            state.write(A0, TaintedWord(eid))
            state.pc += INSN_BYTES
        elif num == EENTER:
            self.eenter(state, arg0)
        elif num == ORETURN:
            self.oreturn(state, arg0, arg1)
        elif num == ERESUME:
            self.resume(state, arg0)
        elif num == EDESTROY:
            self.destroy(state, arg0)
            state.pc += INSN_BYTES
        else:
            raise IllegalTransition(f"ECALL {num} is not available to the host")
