"""Runtime cumulative control-flow hash and declassification queries.

The chain is ``h <- SHA256(h || be64(source) || be64(target))`` starting from
32 zero bytes.  A backward conditional branch contributes only the first time
its exact (source, target) pair is committed during one enclave entry.
The same helpers are used offline by the toolchain, so prep and runtime hash
with one definition.
"""
from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable

from .errors import IllegalLifecycleTransition

INIT = bytes(32)
_BE64 = struct.Struct(">Q")


class EdgeKind(enum.Enum):
    FORWARD_BRANCH = "ForwardBranchTaken"
    JUMP = "Jump"
    BACKWARD_BRANCH = "BackwardBranch"


def chain(h: bytes, source: int, target: int) -> bytes:
    return hashlib.sha256(h + _BE64.pack(source) + _BE64.pack(target)).digest()


def chain_edges(edges: Iterable[tuple[int, int, EdgeKind]], h: bytes = INIT) -> bytes:
    """Digest of an edge sequence under the loop-once rule."""
    seen: set[tuple[int, int]] = set()
    for s, t, kind in edges:
        if kind is EdgeKind.BACKWARD_BRANCH:
            if (s, t) in seen:
                continue
            seen.add((s, t))
        h = chain(h, s, t)
    return h


class Phase(enum.Enum):
    IDLE = "idle"
    ACTIVE = "active"
    SUSPENDED = "suspended"


class Lifecycle(enum.Enum):
    ENTER = "Enter"
    EXIT = "Exit"
    SUSPEND = "Suspend"
    RESUME = "Resume"


@dataclass
class DeclassState:
    h_current: bytes = INIT
    enabled: bool = False
    seen_loops: set = field(default_factory=set)
    initialized: bool = False
    phase: Phase = Phase.IDLE

    def copy(self) -> "DeclassState":
        return DeclassState(self.h_current, self.enabled, set(self.seen_loops),
                            self.initialized, self.phase)


@dataclass(frozen=True)
class AdpHashSet:
    digests: frozenset = frozenset()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "AdpHashSet":
        if len(blob) % 32:
            raise ValueError("hash section length is not a multiple of 32")
        return cls(frozenset(blob[i:i + 32] for i in range(0, len(blob), 32)))

    def __contains__(self, digest: bytes) -> bool:
        return digest in self.digests

    def __len__(self) -> int:
        return len(self.digests)


def on_control_flow(state: DeclassState, s: int, t: int, kind: EdgeKind) -> bool:
    """Fold one committed control transfer into ``h_current``.

    Returns False when the edge was a repeated loop back-edge and therefore
    suppressed.
    """
    if not state.enabled:
        raise IllegalLifecycleTransition("hash engine is disabled")
    if kind is EdgeKind.BACKWARD_BRANCH:
        if (s, t) in state.seen_loops:
            return False
        state.seen_loops.add((s, t))
    state.h_current = chain(state.h_current, s, t)
    state.initialized = True
    return True


def matches_adp(state: DeclassState, adps: AdpHashSet) -> bool:
    return state.h_current in adps


_ALLOWED = {
    Lifecycle.ENTER: {Phase.IDLE},
    Lifecycle.EXIT: {Phase.ACTIVE},
    Lifecycle.SUSPEND: {Phase.ACTIVE},
    Lifecycle.RESUME: {Phase.SUSPENDED},
}


def lifecycle(state: DeclassState, event: Lifecycle) -> None:
    if state.phase not in _ALLOWED[event]:
        raise IllegalLifecycleTransition(f"{event.value} while {state.phase.value}")
    if event is Lifecycle.ENTER:
        state.h_current, state.initialized = INIT, False
        state.seen_loops.clear()
        state.enabled, state.phase = True, Phase.ACTIVE
    elif event is Lifecycle.EXIT:
        state.h_current, state.initialized = INIT, False
        state.seen_loops.clear()
        state.enabled, state.phase = False, Phase.IDLE
    elif event is Lifecycle.SUSPEND:
        state.enabled, state.phase = False, Phase.SUSPENDED
    else:
        state.enabled, state.phase = True, Phase.ACTIVE
