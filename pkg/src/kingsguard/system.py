"""A complete simulated platform: memory, monitor, untrusted OS role and the CPU state."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

from . import dift
from .binprep import image as img
from .dift import EnforcementConfig, SharedRegister
from .errors import MissingSection, UndecodableInstruction
from .events import Counters, Trace
from .isa import MachineState, RunReport, run
from .layout import DEFAULT_LAYOUT, PAGE_SIZE, Layout, page_align
from .memory import AddressSpace, MemorySystem
from .monitor import SecurityMonitor


@dataclass(frozen=True)
class SystemConfig:
    memory_bytes: int = 4 << 20
    shared_registers: int = 4
    peripheral_pages: int = 1
    max_enclaves: int = 8
    ocall_max: int = PAGE_SIZE
    protections: bool = True
    record_hash_updates: bool = True

    @classmethod
    def from_json(cls, path) -> "SystemConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**raw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _layout_for(meta: img.ImageMeta) -> Layout:
    return replace(DEFAULT_LAYOUT, text_base=meta.text_base, data_base=meta.data_base,
                   sensitive_base=meta.sensitive_base)


def _overlay(segments, page: int) -> bytes:
    buf = bytearray(PAGE_SIZE)
    for base, blob in segments:
        lo, hi = max(base, page), min(base + len(blob), page + PAGE_SIZE)
        if lo < hi:
            buf[lo - page:hi - page] = blob[lo - base:hi - base]
    return bytes(buf.rstrip(b"\0"))


class Simulator:
    """One independent simulation instance.

    ``programs`` are the images ECREATE may instantiate (index 0 is the image
    the host was loaded from unless ``extra`` says otherwise).  ``propagate``
    can be swapped for a deliberately broken rule when testing the oracles.
    """

    def __init__(self, image, key: bytes, config: SystemConfig = SystemConfig(),
                 propagate=dift.propagate, extra=()):
        self.image = img.parse_image(image) if isinstance(image, (bytes, bytearray)) else image
        if not self.image.section(img.META):
            raise MissingSection(img.META)
        self.config = config
        self.meta = self.image.meta
        self.layout = _layout_for(self.meta)
        self.counters = Counters()
        self.trace = Trace(record_hash_updates=config.record_hash_updates)
        self.memory = MemorySystem(config.memory_bytes, self.layout, self.counters)
        self.enforcement = EnforcementConfig(self.layout.a_fixed, config.protections)
        self.propagate = propagate
        programs = [self.image] + [img.parse_image(x) if isinstance(x, (bytes, bytearray)) else x
                                   for x in extra]
        self.monitor = SecurityMonitor(self, key, programs, config.max_enclaves, config.ocall_max)
        self.host_shared_reads: list[tuple[int, int]] = []
        self.state = MachineState(
            pc=self.meta.host_entry,
            shared_regs=[SharedRegister() for _ in range(config.shared_registers)],
        )
        self._boot()

    def _boot(self) -> None:
        mem, lay = self.memory, self.layout
        mem.allocate_page(mem.host, lay.a_fixed, backing="a_fixed")
        shared = self.image.section(img.SHARED)
        for off in range(0, len(shared), PAGE_SIZE):
            mem.allocate_page(mem.host, lay.shared_section + off, shared[off:off + PAGE_SIZE], "shared")
        for i in range(self.config.peripheral_pages):
            mem.allocate_page(mem.host, lay.peripheral_base + i * PAGE_SIZE, backing="peripheral")

    # -- interface used by the execution loop --------------------------------

    def space(self, state: MachineState) -> AddressSpace:
        return self.memory.spaces[state.curr_eid]

    def page_fault(self, space: AddressSpace, vaddr: int) -> int:
        """OS role: back the page; the monitor then places taints for enclave pages."""
        self.counters.page_faults += 1
        page = page_align(vaddr)
        mem = self.memory
        if mem.is_shared(page):
            ppn = mem.allocate_page(space, page, backing="shared")
        elif space.is_enclave:
            program = self.monitor.record(space.eid).program
            ppn = mem.allocate_page(space, page, _overlay(program.segments(True), page), "enclave")
            self.monitor.on_page_fault(space, page, ppn)
        else:
            # the host image never carries sensitive contents
            segments = [(self.meta.text_base, self.image.section(img.TEXT)),
                        (self.meta.data_base, self.image.section(img.DATA))]
            ppn = mem.allocate_page(space, page, _overlay(segments, page), "host")
        self.trace.emit(self.state.cycle, "PageFault", vaddr, space.eid)
        return ppn

    def log(self, state: MachineState, kind: str, where) -> None:
        self.trace.emit(state.cycle, kind, state.pc, where, state.curr_eid)

    def adp_match(self, state: MachineState) -> bool:
        matched = self.monitor.adp_match(state)
        if matched:
            self.counters.adp_matches += 1
        return matched

    def shared_register(self, state: MachineState, idx: int) -> SharedRegister:
        if idx >= len(state.shared_regs):
            raise UndecodableInstruction(f"no shared register sr{idx}")
        return state.shared_regs[idx]

    # -- conveniences ---------------------------------------------------------

    def run(self, max_steps: int = 100_000, interrupts=()) -> RunReport:
        return run(self.state, self, max_steps, interrupts)

    def read(self, vaddr: int, eid: int = 0) -> int:
        return self.memory.read_virtual(self.memory.spaces[eid], vaddr)

    def read_words(self, vaddr: int, count: int, eid: int = 0) -> list[int]:
        return [self.read(vaddr + 8 * i, eid) for i in range(count)]
