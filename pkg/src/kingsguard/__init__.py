"""Simulator of an enclave platform with hardware taint tracking and path-authorized declassification."""
from .binprep import prep
from .dift import TaintedWord
from .isa import MachineState, Mode, RunReport
from .system import Simulator, SystemConfig

__version__ = "0.1.0"

__all__ = ["MachineState", "Mode", "RunReport", "Simulator", "SystemConfig", "TaintedWord", "prep"]
