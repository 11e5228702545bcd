"""Physical memory, shadow taint storage, the ownership table and page tables.

Physical memory is one flat byte array.  The top of it is reserved as shadow
memory holding one taint bit per 64-bit data word; it is never mapped into a
page table and every data access checks that it stays below the shadow base.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

from .dift import TaintedWord
from .errors import (
    MisalignedAccess, OutOfPhysicalMemory, OwnershipViolation, PageFault, ShadowRegionAccess,
)
from .events import Counters
from .layout import DEFAULT_LAYOUT, PAGE_SHIFT, PAGE_SIZE, WORD, Layout, page_align

SHADOW_BYTES_PER_PAGE = PAGE_SIZE // WORD // 8  # 64
SM_OWNER = (1 << 64) - 1  # OT value for monitor-private pages; no EID can match it

_U64 = struct.Struct("<Q")


def shadow_region_size(size_bytes: int) -> int:
    """Bytes reserved at the top of memory so every data word below gets one bit."""
    pages = 1
    while -(-(size_bytes - pages * PAGE_SIZE) // 64) > pages * PAGE_SIZE:
        pages += 1
    return pages * PAGE_SIZE


def shadow_address(data_paddr: int, shadow_base: int, data_base: int = 0) -> tuple[int, int]:
    """Shadow byte address and bit index holding the taint of ``data_paddr``.

    One shadow byte covers 64 data bytes (8 words); word ``k`` of that group
    lives in bit ``k`` (little-endian packing).
    """
    if data_paddr >= shadow_base:
        raise ShadowRegionAccess(f"{data_paddr:#x} lies in the shadow region")
    if data_paddr % WORD:
        raise MisalignedAccess(f"{data_paddr:#x} is not word aligned")
    return ((data_paddr - data_base) >> 6) + shadow_base, (data_paddr >> 3) & 7


class PhysicalMemory:
    def __init__(self, size_bytes: int = 4 << 20):
        if size_bytes < (1 << 20) or size_bytes & (size_bytes - 1):
            raise ValueError("memory size must be a power of two of at least 1 MiB")
        self.size_bytes = size_bytes
        self.data_memory_base = 0
        self.shadow_memory_base = size_bytes - shadow_region_size(size_bytes)
        self.n_data_pages = self.shadow_memory_base // PAGE_SIZE
        self._mem = bytearray(size_bytes)

    def _data(self, paddr: int) -> int:
        if paddr % WORD:
            raise MisalignedAccess(f"{paddr:#x} is not word aligned")
        if not 0 <= paddr < self.shadow_memory_base:
            raise ShadowRegionAccess(f"{paddr:#x} outside data memory")
        return paddr

    def read_word(self, paddr: int) -> int:
        return _U64.unpack_from(self._mem, self._data(paddr))[0]

    def write_word(self, paddr: int, value: int) -> None:
        _U64.pack_into(self._mem, self._data(paddr), value)

    def read_taint(self, paddr: int) -> int:
        byte, bit = shadow_address(paddr, self.shadow_memory_base, self.data_memory_base)
        return (self._mem[byte] >> bit) & 1

    def write_taint(self, paddr: int, taint: int) -> None:
        byte, bit = shadow_address(paddr, self.shadow_memory_base, self.data_memory_base)
        if taint:
            self._mem[byte] |= 1 << bit
        else:
            self._mem[byte] &= ~(1 << bit) & 0xFF

    def shadow_block_address(self, ppn: int) -> int:
        return shadow_address(ppn * PAGE_SIZE, self.shadow_memory_base, self.data_memory_base)[0]

    def read_shadow_block(self, ppn: int) -> bytes:
        at = self.shadow_block_address(ppn)
        return bytes(self._mem[at:at + SHADOW_BYTES_PER_PAGE])

    def write_shadow_block(self, ppn: int, block: bytes) -> None:
        if len(block) != SHADOW_BYTES_PER_PAGE:
            raise ValueError("a shadow block is exactly 64 bytes")
        at = self.shadow_block_address(ppn)
        self._mem[at:at + SHADOW_BYTES_PER_PAGE] = block

    def read_page(self, ppn: int) -> bytes:
        at = self._data(ppn * PAGE_SIZE)
        return bytes(self._mem[at:at + PAGE_SIZE])

    def fill_page(self, ppn: int, data: bytes = b"") -> None:
        if len(data) > PAGE_SIZE:
            raise ValueError("page fill larger than a page")
        at = self._data(ppn * PAGE_SIZE)
        self._mem[at:at + PAGE_SIZE] = data + bytes(PAGE_SIZE - len(data))


class OwnershipTable:
    """One EID per physical data page; 0 means unowned."""

    def __init__(self, n_pages: int):
        self.entries = [0] * n_pages

    def __getitem__(self, ppn: int) -> int:
        return self.entries[ppn]

    def assign(self, ppn: int, eid: int) -> None:
        if self.entries[ppn] not in (0, eid):
            raise ValueError(f"page {ppn} already owned by EID {self.entries[ppn]}")
        self.entries[ppn] = eid

    def clear(self, ppn: int) -> None:
        self.entries[ppn] = 0


def check_access(ot: OwnershipTable, paddr: int, curr_eid: int) -> bool:
    """True (Allow) iff the page is unowned or owned by the executing context."""
    owner = ot[paddr >> PAGE_SHIFT]
    return owner == 0 or owner == curr_eid


@dataclass
class PageTableEntry:
    ppn: int
    present: bool = True
    backing: str = "zero"


@dataclass
class AddressSpace:
    """Per-context page table; ``eid`` 0 is the host."""

    eid: int
    pages: dict[int, PageTableEntry] = field(default_factory=dict)

    @property
    def is_enclave(self) -> bool:
        return self.eid != 0


class MemorySystem:
    def __init__(self, size_bytes: int = 4 << 20, layout: Layout = DEFAULT_LAYOUT,
                 counters: Counters | None = None):
        self.phys = PhysicalMemory(size_bytes)
        self.ot = OwnershipTable(self.phys.n_data_pages)
        self.layout = layout
        self.counters = counters if counters is not None else Counters()
        self.host = AddressSpace(0)
        self.spaces: dict[int, AddressSpace] = {0: self.host}
        self.shared: dict[int, PageTableEntry] = {}
        self._free = list(range(self.phys.n_data_pages - 1, -1, -1))
        self.allocations: list[tuple[int, int]] = []  # (ppn, eid) in allocation order
        # (eid of accessor, virtual page, "load"|"store") for every access to a page
        # the accessor does not own
        self.nonenclave_accesses: list[tuple[int, int, str]] = []

    # -- address spaces ------------------------------------------------------

    def new_space(self, eid: int) -> AddressSpace:
        space = AddressSpace(eid)
        self.spaces[eid] = space
        return space

    def is_shared(self, vaddr: int) -> bool:
        return vaddr >= self.layout.shared_base

    def entry(self, space: AddressSpace, vaddr: int) -> PageTableEntry | None:
        table = self.shared if self.is_shared(vaddr) else space.pages
        pte = table.get(vaddr >> PAGE_SHIFT)
        return pte if pte is not None and pte.present else None

    def translate(self, space: AddressSpace, vaddr: int) -> int:
        pte = self.entry(space, vaddr)
        if pte is None:
            raise PageFault(vaddr)
        return pte.ppn * PAGE_SIZE + (vaddr & (PAGE_SIZE - 1))

    def is_enclave_target(self, space: AddressSpace, vaddr: int) -> bool:
        """Whether an access from ``space`` to ``vaddr`` stays inside its own enclave.

        Unmapped private addresses count as enclave memory because servicing
        the fault assigns the new page to the faulting enclave.
        """
        if not space.is_enclave:
            return False
        pte = self.entry(space, vaddr)
        if pte is None:
            return not self.is_shared(vaddr)
        return self.ot[pte.ppn] == space.eid

    def owner(self, paddr: int) -> int:
        return self.ot[paddr >> PAGE_SHIFT]

    # -- data accesses -------------------------------------------------------

    def _checked(self, space: AddressSpace, vaddr: int, kind: str) -> int:
        if vaddr % WORD:
            raise MisalignedAccess(f"{vaddr:#x} is not word aligned")
        paddr = self.translate(space, vaddr)
        if paddr >= self.phys.shadow_memory_base:
            raise ShadowRegionAccess(f"{vaddr:#x} maps into the shadow region")
        owner = self.owner(paddr)
        if not check_access(self.ot, paddr, space.eid):
            raise OwnershipViolation(paddr, owner, space.eid)
        if owner != space.eid or not space.is_enclave:
            self.nonenclave_accesses.append((space.eid, vaddr >> PAGE_SHIFT, kind))
        return paddr

    def load_word(self, vaddr: int, space: AddressSpace) -> TaintedWord:
        paddr = self._checked(space, vaddr, "load")
        value = self.phys.read_word(paddr)
        self.counters.data_loads += 1
        taint = 0
        if space.is_enclave:
            taint = self.phys.read_taint(paddr)
            self.counters.enclave_loads += 1
            self.counters.shadow_accesses += 1
        return TaintedWord(value, taint)

    def store_word(self, vaddr: int, word: TaintedWord, space: AddressSpace) -> None:
        paddr = self._checked(space, vaddr, "store")
        self.phys.write_word(paddr, word.value)
        self.counters.data_stores += 1
        if space.is_enclave:
            self.phys.write_taint(paddr, word.taint)
            self.counters.enclave_stores += 1
            self.counters.shadow_accesses += 1

    def fetch_word(self, vaddr: int, space: AddressSpace) -> int:
        """Instruction fetch: ownership-checked, never touches shadow memory."""
        if vaddr % WORD:
            raise MisalignedAccess(f"pc {vaddr:#x} is not word aligned")
        paddr = self.translate(space, vaddr)
        if not check_access(self.ot, paddr, space.eid):
            raise OwnershipViolation(paddr, self.owner(paddr), space.eid)
        return self.phys.read_word(paddr)

    # -- page management (OS role) ------------------------------------------

    def _take_free_page(self) -> int:
        if not self._free:
            raise OutOfPhysicalMemory("no free physical page")
        return self._free.pop()

    def allocate_page(self, space: AddressSpace, vaddr: int, fill: bytes = b"",
                      backing: str = "zero") -> int:
        """Back the page containing ``vaddr`` with a fresh physical page.

        Shared-window pages are unowned and become visible to every context;
        private pages of an enclave are assigned to its EID.
        """
        ppn = self._take_free_page()
        shared = self.is_shared(vaddr)
        eid = 0 if shared else space.eid
        if eid:
            self.ot.assign(ppn, eid)
        self.phys.fill_page(ppn, fill)
        self.phys.write_shadow_block(ppn, bytes(SHADOW_BYTES_PER_PAGE))
        table = self.shared if shared else space.pages
        table[vaddr >> PAGE_SHIFT] = PageTableEntry(ppn, True, backing)
        self.allocations.append((ppn, eid))
        return ppn

    def allocate_secure(self, data: bytes) -> list[int]:
        """Monitor-private pages: owned by SM_OWNER and never entered into a page table."""
        ppns = []
        for off in range(0, max(len(data), 1), PAGE_SIZE):
            ppn = self._take_free_page()
            self.ot.entries[ppn] = SM_OWNER
            self.phys.fill_page(ppn, data[off:off + PAGE_SIZE])
            ppns.append(ppn)
        return ppns

    def map_page(self, space: AddressSpace, vaddr: int, ppn: int) -> None:
        """Install an arbitrary mapping, as an untrusted OS is free to do."""
        table = self.shared if self.is_shared(vaddr) else space.pages
        table[vaddr >> PAGE_SHIFT] = PageTableEntry(ppn, True, "os")

    def reclaim_enclave(self, eid: int) -> None:
        """Scrub and free every page owned by ``eid`` and forget its page table."""
        for ppn, owner in enumerate(self.ot.entries):
            if owner == eid:
                self.phys.fill_page(ppn)
                self.phys.write_shadow_block(ppn, bytes(SHADOW_BYTES_PER_PAGE))
                self.ot.clear(ppn)
                self._free.append(ppn)
        self.spaces.pop(eid, None)

    # -- observation ---------------------------------------------------------

    def mapped_pages(self):
        """Yield ``(eid, vpn, ppn)`` for every present mapping; eid is None for the shared window."""
        for vpn, pte in sorted(self.shared.items()):
            if pte.present:
                yield None, vpn, pte.ppn
        for eid, space in sorted(self.spaces.items()):
            for vpn, pte in sorted(space.pages.items()):
                if pte.present:
                    yield eid, vpn, pte.ppn

    def nonenclave_view(self) -> dict[tuple, bytes]:
        """Contents of every mapped unowned page, keyed by (context, virtual page)."""
        view = {}
        for eid, vpn, ppn in self.mapped_pages():
            if self.ot[ppn] == 0:
                view[("shared" if eid is None else eid, vpn)] = self.phys.read_page(ppn)
        return view

    def nonenclave_digest(self) -> str:
        h = hashlib.sha256()
        for key, page in sorted(self.nonenclave_view().items(), key=lambda kv: str(kv[0])):
            h.update(repr(key).encode())
            h.update(page)
        return h.hexdigest()

    def read_virtual(self, space: AddressSpace, vaddr: int) -> int:
        """Debug/harness read that bypasses checks; unmapped reads return 0."""
        pte = self.entry(space, vaddr)
        if pte is None:
            return 0
        return self.phys.read_word(pte.ppn * PAGE_SIZE + (vaddr & (PAGE_SIZE - 1)))


__all__ = [
    "AddressSpace", "MemorySystem", "OwnershipTable", "PageTableEntry", "PhysicalMemory",
    "SHADOW_BYTES_PER_PAGE", "SM_OWNER", "check_access", "page_align", "shadow_address",
    "shadow_region_size",
]
