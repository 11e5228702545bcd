"""Small builders shared by the tests."""
from kingsguard.binprep import prep
from kingsguard.isa import A7, Mode, Opcode, decode, step
from kingsguard.system import Simulator, SystemConfig

KEY = b"test-key"

HOST_ENTER = """
.text
.host host
host:
    ADDI a7, x0, 1
    ADDI a0, x0, 0
    ECALL
    ADDI s1, a0, 0
    ADDI a7, x0, 2
    ECALL
    HALT
"""


def build(source, key=KEY, **kw):
    return prep(source, key, **kw)


def simulate(source, key=KEY, protections=True, **kw):
    built = build(source, key)
    return built, Simulator(built.image, key, SystemConfig(protections=protections), **kw)


def next_instruction(sim):
    st = sim.state
    space = sim.space(st)
    pte = sim.memory.entry(space, st.pc)
    if pte is None:
        return None
    return decode(sim.memory.phys.read_word(pte.ppn * 4096 + (st.pc & 4095)))


def run_until_eexit(sim, max_steps=100_000):
    """Step until the enclave is about to issue EEXIT; return its live hash state."""
    st = sim.state
    for _ in range(max_steps):
        ins = next_instruction(sim)
        if (st.mode is Mode.ENCLAVE and ins is not None and ins.opcode is Opcode.ECALL
                and st.read(A7).value == 3):
            return st.hash_state
        step(st, sim)
        if st.halted or st.trap:
            raise AssertionError(f"run ended before EEXIT: trap={st.trap} {st.trap_detail}")
    raise AssertionError("no EEXIT reached")


def run_to_enclave(sim, max_steps=1000):
    st = sim.state
    for _ in range(max_steps):
        if st.mode is Mode.ENCLAVE:
            return
        step(st, sim)
        if st.halted or st.trap:
            raise AssertionError(f"never entered the enclave: {st.trap} {st.trap_detail}")
    raise AssertionError("never entered the enclave")
