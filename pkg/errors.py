"""Exception hierarchy shared by the assembler, simulator and mapper."""


class SigDlaError(Exception):
    """Base class for every error raised by the toolchain."""


class OperandRangeError(SigDlaError, ValueError):
    """A numeric operand is outside the range its field or format allows."""


class AssemblyError(SigDlaError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)
        self.message = message


class DecodeError(SigDlaError):
    """A 32-bit word is not a valid instruction encoding."""


class ConfigError(SigDlaError):
    """Machine configuration or manifest could not be parsed."""


class MemoryFault(SigDlaError):
    """Out-of-bounds or misaligned memory access."""


class ShuffleError(SigDlaError):
    """Shuffle fabric misuse (unconfigured units, staging overflow)."""


class AccumulatorOverflow(SigDlaError):
    """A PE accumulator or a requantized output left its representable range."""


class MappingError(SigDlaError):
    """A workload cannot be lowered onto the machine."""


class EngineFault(SigDlaError):
    def __init__(self, message, pc=None):
        self.pc = pc
        prefix = f"pc={pc}: " if pc is not None else ""
        super().__init__(prefix + message)


class CycleBudgetExceeded(EngineFault):
    pass


# exit codes used by the command line front end
EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_ENGINE_FAULT = 3

USAGE_ERRORS = (AssemblyError, DecodeError, ConfigError, MappingError, OperandRangeError)
ENGINE_ERRORS = (MemoryFault, AccumulatorOverflow, EngineFault, ShuffleError)


def exit_code_for(exc):
    """Map an exception to the command line exit status."""
    if isinstance(exc, ENGINE_ERRORS):
        return EXIT_ENGINE_FAULT
    if isinstance(exc, USAGE_ERRORS) or isinstance(exc, (FileNotFoundError, ValueError)):
        return EXIT_USAGE
    return EXIT_ENGINE_FAULT
