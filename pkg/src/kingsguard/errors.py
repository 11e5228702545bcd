"""Exception hierarchy shared by the simulator, the toolchain and the harness."""


class KingsguardError(Exception):
    """Base class for every error raised by this package."""


# -- toolchain ---------------------------------------------------------------


class ParseError(KingsguardError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnresolvedLabel(KingsguardError):
    pass


class MisalignedSection(KingsguardError):
    pass


class UnannotatedIndirectJump(KingsguardError):
    pass


class PathExplosion(KingsguardError):
    def __init__(self, bound: int):
        super().__init__(f"more than {bound} declassification paths")
        self.bound = bound


class DisconnectedAdp(KingsguardError):
    pass


# -- image loading -----------------------------------------------------------


class ImageError(KingsguardError):
    """Raised when a program image cannot be accepted by the security monitor."""


class BadMagic(ImageError):
    pass


class MacMismatch(ImageError):
    pass


class MissingSection(ImageError):
    pass


# -- security monitor --------------------------------------------------------


class MonitorError(KingsguardError):
    pass


class TooManyEnclaves(MonitorError):
    pass


class NoSuchEnclave(MonitorError):
    pass


class IllegalTransition(MonitorError):
    """An ECALL issued from the wrong mode or against an enclave in the wrong state."""


class NothingToResume(MonitorError):
    pass


class BufferOutOfEnclave(MonitorError):
    pass


class LengthExceeded(MonitorError):
    pass


class IllegalLifecycleTransition(KingsguardError):
    pass


# -- memory ------------------------------------------------------------------


class OutOfPhysicalMemory(KingsguardError):
    pass


class ShadowRegionAccess(KingsguardError):
    pass


class PageFault(KingsguardError):
    def __init__(self, vaddr: int):
        super().__init__(f"page fault at {vaddr:#x}")
        self.vaddr = vaddr


class OwnershipViolation(KingsguardError):
    def __init__(self, paddr: int, owner: int, eid: int):
        super().__init__(f"EID {eid} may not access {paddr:#x} (owner {owner})")
        self.paddr = paddr
        self.owner = owner
        self.eid = eid


class MisalignedAccess(KingsguardError):
    pass


# -- execution ---------------------------------------------------------------


class UndecodableInstruction(KingsguardError):
    pass


class StepBudgetExceeded(KingsguardError):
    """Raised by ``run`` when ``max_steps`` elapse without HALT or a fatal trap."""

    def __init__(self, report):
        super().__init__(f"no HALT within {report.steps} steps")
        self.report = report


# -- harness -----------------------------------------------------------------


class UnknownScenario(KingsguardError):
    pass


class ScenarioAssertionError(KingsguardError):
    pass


class AdpMatchedDuringRun(KingsguardError):
    pass
