"""Taint propagation and the enclave-boundary enforcement checks.

Everything here is a pure function of its arguments except the two shared
register helpers, which mutate the register they are handed.  Logging of
violations is left to the caller (the execution loop), which knows the
cycle, pc and EID of the event.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

MASK64 = (1 << 64) - 1


@dataclass(frozen=True, slots=True)
class TaintedWord:
    value: int = 0
    taint: int = 0

    def __post_init__(self):
        if not 0 <= self.value <= MASK64:
            raise ValueError(f"value out of 64-bit range: {self.value:#x}")
        if self.taint not in (0, 1):
            raise ValueError(f"taint must be a single bit, got {self.taint!r}")


ZERO = TaintedWord(0, 0)


@dataclass(slots=True)
class SharedRegister:
    """A user-accessible hardware register carrying the EID of its last enclave writer."""

    value: int = 0
    owner: int = 0


@dataclass(frozen=True)
class EnforcementConfig:
    a_fixed: int
    protections_enabled: bool = True


class Format(enum.Enum):
    REG_REG = "RegReg"
    REG_IMM = "RegImm"
    LOAD = "Load"
    STORE = "Store"


def propagate(fmt: Format, op1_t: int = 0, op2_t: int = 0, shadow_t: int = 0) -> int:
    """Output taint for one instruction.

    ``op1_t``/``op2_t`` are the source register taints (for STORE, ``op1_t`` is
    the taint of the register holding the value being stored); ``shadow_t`` is
    the taint fetched from shadow memory for a load.
    """
    if fmt is Format.REG_REG:
        return op1_t | op2_t
    if fmt is Format.REG_IMM:
        return op1_t
    if fmt is Format.LOAD:
        return shadow_t
    if fmt is Format.STORE:
        return op1_t
    raise ValueError(fmt)


PropagateFn = Callable[..., int]


class StoreDecision(enum.Enum):
    COMMIT = "Commit"
    COMMIT_DECLASSIFIED = "CommitDeclassified"
    ZEROIZE = "Zeroize"


def check_store(target_owned_by_curr: bool, value_taint: int, declass_match) -> StoreDecision:
    """Decide the fate of an enclave store.

    ``declass_match`` may be a bool or a zero-argument callable; the callable
    form is only evaluated when a tainted value heads for non-enclave memory,
    which is the single place the hash comparison is architecturally performed.
    """
    if target_owned_by_curr or not value_taint:
        return StoreDecision.COMMIT
    matched = declass_match() if callable(declass_match) else declass_match
    return StoreDecision.COMMIT_DECLASSIFIED if matched else StoreDecision.ZEROIZE


def check_address(addr: TaintedWord, target_owned_by_curr: bool, cfg: EnforcementConfig) -> int:
    """Effective address of an enclave memory access; tainted pointers into
    non-enclave memory are replaced by ``cfg.a_fixed``."""
    if addr.taint and not target_owned_by_curr:
        return cfg.a_fixed
    return addr.value


def write_shared(sr: SharedRegister, word: TaintedWord, curr_eid: int) -> None:
    # An enclave write always stamps, so any later writer restamps the register.
    sr.value = word.value
    sr.owner = curr_eid


def read_shared(sr: SharedRegister, curr_eid: int) -> tuple[int, bool]:
    """Return ``(value, denied)``.  A denied read yields 0 and scrubs the register."""
    if sr.owner == 0 or sr.owner == curr_eid:
        return sr.value, False
    sr.value = 0
    return 0, True
