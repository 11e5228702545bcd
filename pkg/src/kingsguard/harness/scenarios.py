"""Attack scenarios AV1-AV4 and the encrypted signal-processing case study.

Every AV program shares one shape.  The enclave fetches a message from the
host with an OCALL, then ``parse`` copies an attacker-chosen number of words
into a two-word stack buffer that sits just below the saved return address.
A well-formed message (two words) returns normally to ``after_parse``, which
encrypts the secret and releases it at the ``.release`` store.  A three-word
message overwrites the return address with the address of ``gadget``, a
scenario-specific leak sequence that the enclave binary happens to contain.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

from ..binprep import prep
from ..binprep.image import parse_image
from ..errors import ScenarioAssertionError, UnknownScenario
from ..isa import MASK64, RunReport
from ..layout import DEFAULT_LAYOUT, PAGE_SHIFT, PAGE_SIZE
from ..system import Simulator, SystemConfig

SCENARIO_KEY = bytes.fromhex("4b47" * 16)
SECRET = 0x5EC2E7A1
PAD = 0x0F1E2D3C4B5A6978
FILLER = (0x4141414141414141, 0x4242424242424242)
AV_NAMES = ("av1", "av2", "av3", "av4")
MAX_STEPS = 20_000

_LAY = DEFAULT_LAYOUT

_HOST = """
.text
.host host
host:
    ADDI s2, x0, 0
    ADDI a7, x0, 1
    ADDI a0, x0, 0
    ECALL                       # ECREATE -> a0 = eid
    ADDI s1, a0, 0
    ADDI a7, x0, 2
    ECALL                       # EENTER
host_back:
    ADDI t0, x0, 1
    BEQ a1, t0, host_ocall
{epilogue}
    HALT
host_ocall:
    BNE s2, x0, host_done       # only the first OCALL asks for input
    ADDI s2, s2, 1
    ADDI t2, x0, payload
    ADDI t3, x0, {n_words}
    JAL x0, hcopy_test
hcopy_body:
    LD t4, 0(t2)
    SD t4, 0(a0)
    ADDI t2, t2, 8
    ADDI a0, a0, 8
    ADDI t3, t3, -1
hcopy_test:
    BLT x0, t3, hcopy_body
    ADDI a1, x0, {n_bytes}
    JAL x0, host_oreturn
host_done:
    ADDI a1, x0, 0
host_oreturn:
    ADDI a0, s1, 0
    ADDI a7, x0, 5
    ECALL                       # ORETURN
    JAL x0, host_back
"""

_PARSE = """
{name}:
    ADDI sp, sp, -24
    SD ra, 16(sp)
    ADDI t0, x0, inbuf+{offset}
    LD t1, 0(t0)                # word count, chosen by the sender
    ADDI t2, x0, 0
    ADDI t0, t0, 8
    ADDI t3, sp, 0
    JAL x0, {name}_test
{name}_body:
    LD t4, 0(t0)
    SD t4, 0(t3)
    ADDI t0, t0, 8
    ADDI t3, t3, 8
    ADDI t2, t2, 1
{name}_test:
    BLT t2, t1, {name}_body
    LD ra, 16(sp)
    ADDI sp, sp, 24
.targets {ret}
    JALR x0, ra, 0
"""

_AV_ENCLAVE = """
.entry enclave
enclave:
    ADDI sp, x0, stack_top
    ADDI a0, x0, inbuf
    ADDI a1, x0, 32
    ADDI a7, x0, 4
    ECALL                       # OCALL: fetch the request
    JAL ra, parse
after_parse:
    ADDI t0, x0, secret
    LD t1, 0(t0)
    ADDI t0, x0, pad
    LD t2, 0(t0)
    XOR t1, t1, t2              # encrypt before release
    ADDI t3, x0, {release_target}
release:
    SD t1, 0(t3)
    ADDI a0, x0, 0
    ADDI a7, x0, 3
    ECALL
{parse}
gadget:
{gadget}
    ADDI a0, x0, 0
    ADDI a7, x0, 3
    ECALL
.release release

.data
payload: .word {payload}
inbuf: .zero 4
stack: .zero 16
stack_top:

.sensitive
secret: .word {secret:#x}
pad: .word {pad:#x}

.shared
out: .word 0
"""

_GADGETS = {
    # load the secret and store it straight into host memory
    "av1": """
    ADDI t0, x0, secret
    LD t1, 0(t0)
    ADDI t3, x0, out
    SD t1, 0(t3)""",
    # use the secret as an index into a host probe array
    "av2": f"""
    ADDI t0, x0, secret
    LD t1, 0(t0)
    ADDI t5, x0, 255
    AND t1, t1, t5
    ADDI t5, x0, {PAGE_SHIFT}
    SLL t1, t1, t5
    ADDI t5, x0, {_LAY.probe_base:#x}
    ADD t1, t1, t5
    LD t4, 0(t1)""",
    # park the secret in a shared hardware register for the host
    "av3": """
    ADDI t0, x0, secret
    LD t1, 0(t0)
    MOVSR sr0, t1""",
    # write the secret to a peripheral data register
    "av4": f"""
    ADDI t0, x0, secret
    LD t1, 0(t0)
    ADDI t3, x0, {_LAY.peripheral_base:#x}
    SD t1, 0(t3)""",
}


def av_source(name: str, attack: bool = True, secret: int = SECRET, pad: int = PAD) -> str:
    if name not in _GADGETS:
        raise UnknownScenario(name)
    payload = [3, *FILLER, "gadget"] if attack else [2, *FILLER, 0]
    host = _HOST.format(
        epilogue="    MOVRS t0, sr0" if name == "av3" else "",
        n_words=len(payload), n_bytes=8 * len(payload),
    )
    target = f"{_LAY.peripheral_base:#x}" if name == "av4" else "out"
    enclave = _AV_ENCLAVE.format(
        release_target=target,
        parse=_PARSE.format(name="parse", offset=0, ret="after_parse"),
        gadget=_GADGETS[name],
        payload=", ".join(str(p) if isinstance(p, str) else f"{p:#x}" for p in payload),
        secret=secret, pad=pad,
    )
    return host + enclave


# -- signal-processing case study -------------------------------------------

SCADA_SAMPLES = (812, 790, 1033, 1201, 640, 587, 955, 1010)
SCADA_KEY_IN = tuple((0x9E3779B97F4A7C15 * (i + 1)) & MASK64 for i in range(8))
SCADA_KEY_OUT = tuple((0xC2B2AE3D27D4EB4F * (i + 3)) & MASK64 for i in range(8))
SCADA_VARIANTS = ("none", "overflow", "shared_reg")


def walsh_hadamard(values) -> list[int]:
    """Reference 8-point integer Walsh-Hadamard transform (mod 2^64)."""
    x = list(values)
    h = 1
    while h < len(x):
        for i in range(0, len(x), 2 * h):
            for j in range(i, i + h):
                a, b = x[j], x[j + h]
                x[j], x[j + h] = (a + b) & MASK64, (a - b) & MASK64
        h *= 2
    return x


def _transform_code() -> str:
    regs = [f"s{i}" for i in range(2, 10)]
    lines = ["    ADDI t0, x0, plain"]
    lines += [f"    LD {r}, {8 * i}(t0)" for i, r in enumerate(regs)]
    h = 1
    while h < 8:
        for i in range(0, 8, 2 * h):
            for j in range(i, i + h):
                a, b = regs[j], regs[j + h]
                lines += [f"    ADD t1, {a}, {b}", f"    SUB {b}, {a}, {b}", f"    ADDI {a}, t1, 0"]
        h *= 2
    lines.append("    ADDI t0, x0, work")
    lines += [f"    SD {r}, {8 * i}(t0)" for i, r in enumerate(regs)]
    return "\n".join(lines)


def _xor_loop(name: str, src: str, key: str, dst: str) -> str:
    return f"""
    ADDI t0, x0, {src}
    ADDI t1, x0, {key}
    ADDI t2, x0, {dst}
    ADDI t3, x0, 8
    JAL x0, {name}_test
{name}_body:
    LD t4, 0(t0)
    LD t5, 0(t1)
    XOR t4, t4, t5
    SD t4, 0(t2)
    ADDI t0, t0, 8
    ADDI t1, t1, 8
    ADDI t2, t2, 8
    ADDI t3, t3, -1
{name}_test:
    BLT x0, t3, {name}_body"""


_SCADA_ENCLAVE = """
.entry enclave
enclave:
    ADDI sp, x0, stack_top
    ADDI a0, x0, inbuf
    ADDI a1, x0, 96
    ADDI a7, x0, 4
    ECALL                       # OCALL: fetch ciphertext and message trailer
{decrypt}
{leak}
{transform}
    JAL ra, log_record
after_log:
{encrypt}
    ADDI a0, x0, outbuf
    JAL x0, send
send:
    ADDI a1, x0, 64
    ADDI a7, x0, 4
release:
    ECALL                       # OCALL: hand the buffer in a0 to the host
    ADDI a0, x0, 0
    ADDI a7, x0, 3
    ECALL
{log_record}
debug_dump:
    ADDI a0, x0, plain
    JAL x0, send
.release release

.data
payload: .word {payload}
inbuf: .zero 12
plain: .zero 8
work: .zero 8
outbuf: .zero 8
stack: .zero 16
stack_top:

.sensitive
key_in: .word {key_in}
key_out: .word {key_out}
"""


def scada_source(vulnerability: str = "none") -> str:
    if vulnerability not in SCADA_VARIANTS:
        raise UnknownScenario(f"scada/{vulnerability}")
    cipher = [s ^ k for s, k in zip(SCADA_SAMPLES, SCADA_KEY_IN)]
    trailer = [3, *FILLER, "debug_dump"] if vulnerability == "overflow" else [2, *FILLER, 0]
    payload = cipher + trailer
    host = _HOST.format(
        epilogue="    MOVRS t0, sr0" if vulnerability == "shared_reg" else "",
        n_words=len(payload), n_bytes=8 * len(payload),
    )
    leak = ""
    if vulnerability == "shared_reg":
        leak = "    ADDI t0, x0, plain\n    LD t1, 0(t0)\n    MOVSR sr0, t1"
    enclave = _SCADA_ENCLAVE.format(
        decrypt=_xor_loop("dec", "inbuf", "key_in", "plain"),
        leak=leak,
        transform=_transform_code(),
        encrypt=_xor_loop("enc", "work", "key_out", "outbuf"),
        log_record=_PARSE.format(name="log_record", offset=64, ret="after_log"),
        payload=", ".join(str(p) if isinstance(p, str) else f"{p:#x}" for p in payload),
        key_in=", ".join(f"{k:#x}" for k in SCADA_KEY_IN),
        key_out=", ".join(f"{k:#x}" for k in SCADA_KEY_OUT),
    )
    return host + enclave


# -- running ------------------------------------------------------------------


@dataclass
class Check:
    description: str
    ok: bool
    detail: str = ""


@dataclass
class ScenarioReport:
    name: str
    protections: bool
    variant: str
    report: RunReport
    sim: Simulator
    elapsed: float
    checks: list[Check] = field(default_factory=list)
    observed: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    def expect(self, description: str, ok: bool, detail: str = "") -> None:
        self.checks.append(Check(description, bool(ok), detail))

    def summary(self) -> str:
        mode = "on" if self.protections else "off"
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status} {self.name}/{self.variant} protections={mode} "
                 f"steps={self.report.steps} ({self.elapsed * 1000:.1f} ms)"]
        for c in self.checks:
            mark = "ok " if c.ok else "BAD"
            lines.append(f"  [{mark}] {c.description}" + (f": {c.detail}" if c.detail else ""))
        return "\n".join(lines)

    def assert_passed(self) -> "ScenarioReport":
        if not self.passed:
            raise ScenarioAssertionError(self.summary())
        return self


def _execute(source: str, protections: bool, interrupts=()) -> tuple[Simulator, RunReport, float]:
    t0 = time.perf_counter()
    built = prep(source, SCENARIO_KEY)
    sim = Simulator(parse_image(built.image), SCENARIO_KEY, SystemConfig(protections=protections))
    report = sim.run(MAX_STEPS, interrupts)
    return sim, report, time.perf_counter() - t0


def _enclave_pages(report: RunReport, eid: int = 1) -> set[int]:
    return {vpn for who, vpn, _kind in report.nonenclave_accesses if who == eid}


def run_scenario(name: str, protections: bool = True, attack: bool = True,
                 interrupts=()) -> ScenarioReport:
    """Run AV1-AV4 (attack or legitimate-release variant) and check the expected outcome."""
    name = name.lower()
    if name not in AV_NAMES:
        raise UnknownScenario(name)
    sim, report, elapsed = _execute(av_source(name, attack), protections, interrupts)
    rep = ScenarioReport(name, protections, "attack" if attack else "legit", report, sim, elapsed)
    counts = report.violation_counts()
    out_addr = sim.layout.shared_section
    periph = sim.layout.peripheral_base
    rep.expect("run halts cleanly", report.halted and report.trap is None, str(report.trap))
    if not attack:
        target = periph if name == "av4" else out_addr
        released = sim.read(target)
        rep.observed["released"] = released
        rep.expect("release carries the encrypted secret", released == SECRET ^ PAD, f"{released:#x}")
        if protections:
            rep.expect("declassified exactly once", report.counter["declassified"] == 1,
                       str(report.counter["declassified"]))
            rep.expect("no violations", not counts, str(counts))
        return rep

    if name == "av1":
        cell = sim.read(out_addr)
        rep.observed["cell"] = cell
        if protections:
            rep.expect("host cell holds 0", cell == 0, f"{cell:#x}")
            rep.expect("one ZeroizedStore", counts.get("ZeroizedStore", 0) == 1, str(counts))
        else:
            rep.expect("secret visible in host cell", cell == SECRET, f"{cell:#x}")
    elif name == "av2":
        pages = _enclave_pages(report)
        rep.observed["pages"] = sorted(pages)
        leak_page = (_LAY.probe_base >> PAGE_SHIFT) + (SECRET & 0xFF)
        if protections:
            rep.expect("only the a_fixed page was touched", pages == {sim.layout.a_fixed >> PAGE_SHIFT},
                       ", ".join(f"{p:#x}" for p in sorted(pages)))
            rep.expect("RedirectedAccess logged", counts.get("RedirectedAccess", 0) >= 1, str(counts))
        else:
            rep.expect("secret-indexed probe page was touched", leak_page in pages,
                       ", ".join(f"{p:#x}" for p in sorted(pages)))
    elif name == "av3":
        reads = [v for idx, v in report.host_outputs if idx == 0]
        rep.observed["host_reads"] = reads
        if protections:
            rep.expect("host read of sr0 returns 0", reads == [0], str(reads))
            rep.expect("DeniedSharedRead logged", counts.get("DeniedSharedRead", 0) == 1, str(counts))
        else:
            rep.expect("host read of sr0 returns the secret", reads == [SECRET], str(reads))
    elif name == "av4":
        page = sim.read_words(periph, PAGE_SIZE // 8)
        rep.observed["peripheral"] = page[:4]
        if protections:
            rep.expect("peripheral page is all zeros", not any(page))
            rep.expect("ZeroizedStore logged", counts.get("ZeroizedStore", 0) == 1, str(counts))
        else:
            rep.expect("secret written to the peripheral", page[0] == SECRET, f"{page[0]:#x}")
    return rep


def run_scada(protections: bool = True, vulnerability: str = "none", interrupts=()) -> ScenarioReport:
    sim, report, elapsed = _execute(scada_source(vulnerability), protections, interrupts)
    rep = ScenarioReport("scada", protections, vulnerability, report, sim, elapsed)
    counts = report.violation_counts()
    staged = sim.read_words(sim.layout.staging_page(1), 8)
    expected = walsh_hadamard(SCADA_SAMPLES)
    rep.observed["staged"] = staged
    rep.expect("run halts cleanly", report.halted and report.trap is None, str(report.trap))
    if vulnerability in ("none", "shared_reg"):
        recovered = [c ^ k for c, k in zip(staged, SCADA_KEY_OUT)]
        rep.expect("host output decrypts to the transformed samples", recovered == expected,
                   str(recovered))
    if vulnerability == "overflow":
        if protections:
            rep.expect("host buffer is all zeros", not any(staged), str(staged))
            rep.expect("ZeroizedStore logged", counts.get("ZeroizedStore", 0) >= 1, str(counts))
        else:
            rep.expect("plaintext leaks to the host", staged == list(SCADA_SAMPLES), str(staged))
    if vulnerability == "shared_reg":
        reads = [v for idx, v in report.host_outputs if idx == 0]
        rep.observed["host_reads"] = reads
        want = [0] if protections else [SCADA_SAMPLES[0]]
        rep.expect(f"host read of sr0 = {want[0]}", reads == want, str(reads))
    return rep


def run_all(protections: bool = True) -> list[ScenarioReport]:
    reports = []
    for name in AV_NAMES:
        reports.append(run_scenario(name, protections, attack=True))
        reports.append(run_scenario(name, protections, attack=False))
    for variant in SCADA_VARIANTS:
        reports.append(run_scada(protections, variant))
    return reports
