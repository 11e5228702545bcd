"""Random-program noninterference fuzzing.

Generated enclaves are straight-line code with counted loops over a pool of
working registers.  A few registers are reserved: fixed base pointers for the
private buffer, the host-visible output buffer, the sensitive words and the
shared window, a loop counter, and two scratch registers for building
secret-dependent addresses.  None of them is ever written from the pool, so
the only way a secret reaches the host is through the operations under test.

Each program also carries a declassification path that can never execute (a
``BNE x0, x0`` at the entry), so its image has a non-empty hash section while
no run ever matches it.
"""
from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from .. import dift
from ..dift import Format
from ..layout import DEFAULT_LAYOUT
from .differential import differential_check, pack_words

POOL = ("t0 t1 t2 t3 t4 t5 t6 a0 a1 a2 a3 a4 a5 s3 s4 s5 s6").split()
ALU = ("ADD", "SUB", "AND", "OR", "XOR", "SLL", "SRL")
N_SECRETS = 4
N_PRIVATE = 8
N_OUT = 8

_HOST = """
.text
.host host
host:
    ADDI a7, x0, 1
    ADDI a0, x0, 0
    ECALL
    ADDI a7, x0, 2
    ECALL
    MOVRS t0, sr0
    MOVRS t1, sr1
    MOVRS t2, sr2
    MOVRS t3, sr3
    HALT
"""

_DATA = f"""
.data
priv: .zero {N_PRIVATE}
.sensitive
secret: .zero {N_SECRETS}
.shared
out: .zero {N_OUT}
"""


class ProgramGenerator:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self._labels = 0

    def _reg(self) -> str:
        return self.rng.choice(POOL)

    def op(self) -> list[str]:
        r = self.rng
        kind = r.choices(
            ["alu", "addi", "ld_sec", "ld_priv", "sd_priv", "sd_out", "ld_out", "movsr", "movrs",
             "ptr_ld", "ptr_sd"],
            weights=[6, 3, 3, 2, 2, 3, 1, 1, 1, 1, 1],
        )[0]
        if kind == "alu":
            return [f"{r.choice(ALU)} {self._reg()}, {self._reg()}, {self._reg()}"]
        if kind == "addi":
            return [f"ADDI {self._reg()}, {self._reg()}, {r.randint(-64, 64)}"]
        if kind == "ld_sec":
            return [f"LD {self._reg()}, {8 * r.randrange(N_SECRETS)}(s2)"]
        if kind == "ld_priv":
            return [f"LD {self._reg()}, {8 * r.randrange(N_PRIVATE)}(s0)"]
        if kind == "sd_priv":
            return [f"SD {self._reg()}, {8 * r.randrange(N_PRIVATE)}(s0)"]
        if kind == "sd_out":
            return [f"SD {self._reg()}, {8 * r.randrange(N_OUT)}(s1)"]
        if kind == "ld_out":
            return [f"LD {self._reg()}, {8 * r.randrange(N_OUT)}(s1)"]
        if kind == "movsr":
            return [f"MOVSR sr{r.randrange(4)}, {self._reg()}"]
        if kind == "movrs":
            return [f"MOVRS {self._reg()}, sr{r.randrange(4)}"]
        # pointer into one of 16 shared-window pages chosen by a register value
        code = ["ADDI s9, x0, 15", f"AND s9, {self._reg()}, s9", "ADDI s10, x0, 12",
                "SLL s9, s9, s10", "ADD s9, s9, s7"]
        if kind == "ptr_ld":
            return code + [f"LD {self._reg()}, 0(s9)"]
        return code + [f"SD {self._reg()}, 0(s9)"]

    def loop(self) -> list[str]:
        self._labels += 1
        n = self._labels
        body = [line for _ in range(self.rng.randint(1, 4)) for line in self.op()]
        return ([f"ADDI s8, x0, {self.rng.randint(1, 4)}", f"JAL x0, loop{n}_test", f"loop{n}_body:"]
                + body + ["ADDI s8, s8, -1", f"loop{n}_test:", f"BLT x0, s8, loop{n}_body"])

    def program(self) -> str:
        r = self.rng
        lay = DEFAULT_LAYOUT
        lines = [".entry enclave", "enclave:", "BNE x0, x0, decoy",
                 "ADDI s0, x0, priv", "ADDI s1, x0, out", "ADDI s2, x0, secret",
                 f"ADDI s7, x0, {lay.shared_base:#x}"]
        lines += [f"ADDI {reg}, x0, {r.randint(0, 255)}" for reg in r.sample(POOL, 4)]
        for _ in range(r.randint(6, 18)):
            lines += self.loop() if r.random() < 0.15 else self.op()
        lines += ["ADDI a7, x0, 3", "ECALL", "decoy:", "ADDI a7, x0, 3", "ECALL", ".release decoy"]
        return _HOST + "\n".join("    " + ln if not ln.endswith(":") and not ln.startswith(".")
                                 else ln for ln in lines) + "\n" + _DATA

    def secrets(self) -> bytes:
        return pack_words(self.rng.getrandbits(64) for _ in range(N_SECRETS))


def and_propagate(fmt: Format, op1_t: int = 0, op2_t: int = 0, shadow_t: int = 0) -> int:
    """Deliberately wrong register-register rule (AND instead of OR), for oracle sensitivity tests."""
    if fmt is Format.REG_REG:
        return op1_t & op2_t
    return dift.propagate(fmt, op1_t, op2_t, shadow_t)


@dataclass
class Counterexample:
    program: str
    secret_a: bytes
    secret_b: bytes
    witness: str


@dataclass
class FuzzSummary:
    seed: int
    programs: int
    pairs: int
    trials: int = 0
    indistinguishable: int = 0
    counterexamples: list[Counterexample] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def distinguishable(self) -> int:
        return len(self.counterexamples)

    def text(self, show: int = 1) -> str:
        lines = [f"seed={self.seed} programs={self.programs} pairs={self.pairs} trials={self.trials} "
                 f"indistinguishable={self.indistinguishable} distinguishable={self.distinguishable} "
                 f"({self.elapsed:.2f} s)"]
        for cx in self.counterexamples[:show]:
            lines += ["counterexample: " + cx.witness,
                      "secrets: " + cx.secret_a.hex() + " / " + cx.secret_b.hex(), cx.program]
        return "\n".join(lines)


def fuzz_noninterference(seed: int, n_programs: int, n_pairs: int, propagate=dift.propagate,
                         with_interrupts: bool = True, stop_at_first: bool = False) -> FuzzSummary:
    if n_programs <= 0 or n_pairs <= 0:
        raise ValueError("n_programs and n_pairs must be positive")
    t0 = time.perf_counter()
    rng = random.Random(seed)
    gen = ProgramGenerator(rng)
    summary = FuzzSummary(seed, n_programs, n_pairs)
    for _ in range(n_programs):
        source = gen.program()
        for _ in range(n_pairs):
            a, b = gen.secrets(), gen.secrets()
            irqs = tuple(sorted(rng.sample(range(5, 120), 3))) if with_interrupts else ()
            verdict = differential_check(source, a, b, propagate, irqs)
            summary.trials += 1
            if verdict.distinguishable:
                summary.counterexamples.append(Counterexample(source, a, b, verdict.witness))
                if stop_at_first:
                    summary.elapsed = time.perf_counter() - t0
                    return summary
            else:
                summary.indistinguishable += 1
    summary.elapsed = time.perf_counter() - t0
    return summary
