import pytest
from hypothesis import given, strategies as st

from kingsguard.dift import TaintedWord
from kingsguard.errors import (
    MisalignedAccess, OutOfPhysicalMemory, OwnershipViolation, PageFault, ShadowRegionAccess,
)
from kingsguard.memory import (
    SHADOW_BYTES_PER_PAGE, MemorySystem, OwnershipTable, PhysicalMemory, check_access,
    shadow_address, shadow_region_size,
)


def test_shadow_address_examples():
    # hand-evaluated: byte = ((paddr - base) >> 6) + shadow_base, bit = paddr[5:3]
    assert shadow_address(0x0, 0x7F0000) == (0x7F0000, 0)
    assert shadow_address(0x38, 0x7F0000) == (0x7F0000, 7)
    assert shadow_address(0x40, 0x7F0000) == (0x7F0001, 0)
    assert shadow_address(0x1000, 0x7F0000) == (0x7F0040, 0)


def test_shadow_address_rejects_shadow_and_misaligned():
    with pytest.raises(ShadowRegionAccess):
        shadow_address(0x7F0000, 0x7F0000)
    with pytest.raises(MisalignedAccess):
        shadow_address(0x4, 0x7F0000)


def test_shadow_region_covers_data():
    for size in (1 << 20, 4 << 20, 16 << 20):
        shadow = shadow_region_size(size)
        data = size - shadow
        assert shadow % 4096 == 0
        assert shadow * 64 >= data  # one byte of taints per 64 data bytes
        smaller = shadow - 4096  # one page less would not cover its own data
        assert smaller * 64 < size - smaller
    assert SHADOW_BYTES_PER_PAGE == 64


def test_physical_memory_size_rules():
    with pytest.raises(ValueError):
        PhysicalMemory(3 << 20)
    mem = PhysicalMemory(1 << 20)
    with pytest.raises(ShadowRegionAccess):
        mem.read_word(mem.shadow_memory_base)


@given(st.integers(0, (1 << 20) // 8 - 1), st.integers(0, 1), st.integers(0, 1))
def test_taint_bits_are_independent(word, t1, t2):
    mem = PhysicalMemory(1 << 20)
    limit = mem.shadow_memory_base // 8
    word %= limit
    other = (word + 1) % limit
    mem.write_taint(word * 8, t1)
    mem.write_taint(other * 8, t2)
    assert mem.read_taint(word * 8) == t1
    assert mem.read_taint(other * 8) == t2


def test_check_access_examples():
    ot = OwnershipTable(4)
    ot.assign(1, 7)
    ot.assign(2, 3)
    assert check_access(ot, 0x0, 7)          # unowned
    assert check_access(ot, 0x1000, 7)       # own page
    assert not check_access(ot, 0x2000, 0)   # host on an enclave page
    assert not check_access(ot, 0x2000, 7)   # another enclave


def _ms():
    return MemorySystem(1 << 20)


def test_enclave_load_store_with_taint():
    ms = _ms()
    space = ms.new_space(1)
    ms.allocate_page(space, 0x200000)
    ms.store_word(0x200008, TaintedWord(0xABC, 1), space)
    assert ms.load_word(0x200008, space) == TaintedWord(0xABC, 1)
    ms.store_word(0x200008, TaintedWord(0xABC, 0), space)
    assert ms.load_word(0x200008, space).taint == 0
    assert ms.counters.shadow_accesses == ms.counters.enclave_loads + ms.counters.enclave_stores == 4


def test_host_access_is_untainted_and_uncounted():
    ms = _ms()
    ms.allocate_page(ms.host, 0x100000)
    ms.store_word(0x100000, TaintedWord(5, 0), ms.host)
    assert ms.load_word(0x100000, ms.host) == TaintedWord(5, 0)
    assert ms.counters.shadow_accesses == 0


def test_host_store_to_enclave_page_denied():
    ms = _ms()
    space = ms.new_space(1)
    ppn = ms.allocate_page(space, 0x200000)
    ms.map_page(ms.host, 0x300000, ppn)  # a hostile OS mapping
    with pytest.raises(OwnershipViolation):
        ms.store_word(0x300000, TaintedWord(1, 0), ms.host)
    with pytest.raises(OwnershipViolation):
        ms.load_word(0x300000, ms.host)


def test_allocate_page_ownership():
    ms = _ms()
    space = ms.new_space(4)
    ppn = ms.allocate_page(space, 0x100000)
    assert ms.ot[ppn] == 4
    host_ppn = ms.allocate_page(ms.host, 0x100000)
    assert ms.ot[host_ppn] == 0
    shared_ppn = ms.allocate_page(space, 0x801000)
    assert ms.ot[shared_ppn] == 0
    assert ms.entry(ms.host, 0x801000).ppn == shared_ppn  # the window is common to all contexts


def test_out_of_physical_memory():
    ms = _ms()
    with pytest.raises(OutOfPhysicalMemory):
        for i in range(ms.phys.n_data_pages + 1):
            ms.allocate_page(ms.host, i * 4096)


def test_unmapped_access_faults():
    ms = _ms()
    with pytest.raises(PageFault):
        ms.load_word(0x100000, ms.host)


def test_reclaim_scrubs_pages():
    ms = _ms()
    space = ms.new_space(2)
    ppn = ms.allocate_page(space, 0x100000, b"\x11" * 16)
    ms.phys.write_taint(ppn * 4096, 1)
    ms.reclaim_enclave(2)
    assert ms.ot[ppn] == 0
    assert ms.phys.read_page(ppn) == bytes(4096)
    assert ms.phys.read_taint(ppn * 4096) == 0


@given(st.lists(st.tuples(st.integers(0, 511), st.integers(0, 2**64 - 1), st.integers(0, 1)),
                min_size=1, max_size=30))
def test_taint_round_trip(ops):
    ms = _ms()
    space = ms.new_space(1)
    ms.allocate_page(space, 0x200000)
    model = {}
    for idx, value, taint in ops:
        ms.store_word(0x200000 + 8 * idx, TaintedWord(value, taint), space)
        model[idx] = (value, taint)
    for idx, (value, taint) in model.items():
        assert ms.load_word(0x200000 + 8 * idx, space) == TaintedWord(value, taint)
