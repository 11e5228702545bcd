"""Event counters and the trace stream."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

VIOLATION_KINDS = frozenset({"ZeroizedStore", "RedirectedAccess", "DeniedSharedRead"})


@dataclass
class Counters:
    steps: int = 0
    data_loads: int = 0
    data_stores: int = 0
    enclave_loads: int = 0
    enclave_stores: int = 0
    shadow_accesses: int = 0
    hash_updates: int = 0
    taken_enclave_transfers: int = 0
    suppressed_loop_rehashes: int = 0
    context_switches: int = 0
    page_faults: int = 0
    declassified: int = 0
    adp_matches: int = 0
    sm_word_copies: int = 0
    tainted_branches: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TraceEvent:
    cycle: int
    kind: str
    fields: tuple = ()

    @property
    def is_violation(self) -> bool:
        return self.kind in VIOLATION_KINDS

    def line(self) -> str:
        return "\t".join([str(self.cycle), self.kind, *(_fmt(f) for f in self.fields)])


def _fmt(value) -> str:
    if isinstance(value, bool) or value is None:
        return "-" if value is None else str(int(value))
    if isinstance(value, int):
        return f"{value:#x}"
    if isinstance(value, bytes):
        return value.hex()
    return str(value)


@dataclass
class Trace:
    """Append-only event stream; ``hash_updates`` additionally records every chain step."""

    events: list[TraceEvent] = field(default_factory=list)
    record_hash_updates: bool = True

    def emit(self, cycle: int, kind: str, *fields) -> TraceEvent:
        ev = TraceEvent(cycle, kind, tuple(fields))
        self.events.append(ev)
        return ev

    def violations(self) -> list[TraceEvent]:
        return [e for e in self.events if e.is_violation]

    def of_kind(self, kind: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == kind]

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ev in self.events:
                fh.write(ev.line() + "\n")
