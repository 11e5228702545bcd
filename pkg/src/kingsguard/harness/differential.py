"""Two-run noninterference oracle.

The same program is built twice with different sensitive-section contents and
run with protections on.  Everything the host can observe is compared: the
contents of every unowned mapped page, host reads of shared registers, the
sequence of accesses to non-enclave pages, the final host register file and how
the run ended.  Secret-independent observations mean the run is
Indistinguishable.
"""
from __future__ import annotations

from dataclasses import dataclass

from .. import dift
from ..binprep import prep
from ..errors import AdpMatchedDuringRun, StepBudgetExceeded
from ..isa import Mode
from ..system import Simulator, SystemConfig

DIFF_KEY = bytes.fromhex("d1ff" * 16)


@dataclass(frozen=True)
class Observation:
    outcome: tuple
    pages: tuple
    shared_reads: tuple
    accesses: tuple
    host_regs: tuple


@dataclass(frozen=True)
class Verdict:
    distinguishable: bool
    witness: str = ""

    def __bool__(self) -> bool:  # truthy when the oracle found a leak
        return self.distinguishable


INDISTINGUISHABLE = Verdict(False)


def pack_words(words) -> bytes:
    return b"".join(int(w).to_bytes(8, "little") for w in words)


def observe(source: str, sensitive: bytes, propagate=dift.propagate, interrupts=(),
            protections: bool = True, max_steps: int = 50_000, check_adp: bool = True) -> Observation:
    built = prep(source, DIFF_KEY, sensitive=sensitive)
    sim = Simulator(built.image, DIFF_KEY, SystemConfig(protections=protections), propagate)
    try:
        report = sim.run(max_steps, interrupts)
        outcome = ("halted" if report.halted else "trap", report.trap)
    except StepBudgetExceeded as exc:
        report = exc.report
        outcome = ("budget", None)
    if check_adp and sim.counters.adp_matches:
        raise AdpMatchedDuringRun("a declassification path matched; output may depend on the secret")
    st = sim.state
    host_regs = tuple(w.value for w in st.regs) if st.mode is Mode.HOST else ()
    pages = tuple(sorted(sim.memory.nonenclave_view().items(), key=lambda kv: str(kv[0])))
    return Observation(outcome, pages, report.host_outputs, report.nonenclave_accesses, host_regs)


def _witness(a: Observation, b: Observation) -> str:
    if a.outcome != b.outcome:
        return f"run outcome differs: {a.outcome} vs {b.outcome}"
    pa, pb = dict(a.pages), dict(b.pages)
    if pa.keys() != pb.keys():
        return f"mapped host pages differ: {sorted(set(pa) ^ set(pb), key=str)}"
    for key in sorted(pa, key=str):
        if pa[key] != pb[key]:
            off = next(i for i in range(len(pa[key])) if pa[key][i] != pb[key][i]) & ~7
            va = int.from_bytes(pa[key][off:off + 8], "little")
            vb = int.from_bytes(pb[key][off:off + 8], "little")
            return f"non-enclave cell differs at page {key} offset {off:#x}: {va:#x} vs {vb:#x}"
    if a.shared_reads != b.shared_reads:
        return f"host shared-register reads differ: {a.shared_reads} vs {b.shared_reads}"
    if a.accesses != b.accesses:
        for i, (x, y) in enumerate(zip(a.accesses, b.accesses)):
            if x != y:
                return f"non-enclave access #{i} differs: {x} vs {y}"
        return f"non-enclave access counts differ: {len(a.accesses)} vs {len(b.accesses)}"
    if a.host_regs != b.host_regs:
        i = next(i for i, (x, y) in enumerate(zip(a.host_regs, b.host_regs)) if x != y)
        return f"host register x{i} differs: {a.host_regs[i]:#x} vs {b.host_regs[i]:#x}"
    return ""


def differential_check(source: str, secret_a: bytes, secret_b: bytes, propagate=dift.propagate,
                       interrupts=(), protections: bool = True) -> Verdict:
    """Compare host observations of two runs that differ only in the sensitive section.

    Raises AdpMatchedDuringRun when either run declassified something: the
    oracle does not apply, because released data may legitimately depend on
    the secret.
    """
    a = observe(source, secret_a, propagate, interrupts, protections, check_adp=protections)
    b = observe(source, secret_b, propagate, interrupts, protections, check_adp=protections)
    witness = _witness(a, b)
    return Verdict(True, witness) if witness else INDISTINGUISHABLE
