"""Virtual address layout shared by the assembler and the platform.

Private addresses (below ``shared_base``) are backed per context; the shared
window at and above ``shared_base`` maps to the same unowned physical pages in
every context and is where all host/enclave communication happens.
"""
from __future__ import annotations

from dataclasses import dataclass

PAGE_SIZE = 4096
PAGE_SHIFT = 12
WORD = 8


@dataclass(frozen=True)
class Layout:
    text_base: int = 0x1000
    data_base: int = 0x10_0000
    sensitive_base: int = 0x20_0000
    shared_base: int = 0x80_0000
    # inside the shared window
    a_fixed: int = 0x80_0000
    shared_section: int = 0x80_1000
    probe_base: int = 0x90_0000
    peripheral_base: int = 0xA0_0000
    staging_base: int = 0xB0_0000

    def staging_page(self, eid: int) -> int:
        return self.staging_base + (eid - 1) * PAGE_SIZE


DEFAULT_LAYOUT = Layout()


def page_of(addr: int) -> int:
    return addr >> PAGE_SHIFT


def page_align(addr: int) -> int:
    return addr & ~(PAGE_SIZE - 1)
