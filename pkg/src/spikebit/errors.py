"""Exception and warning classes shared across the toolchain."""


class SpikebitError(Exception):
    """Base class for all toolchain errors."""


class ParseError(SpikebitError):
    """Model bundle or artifact file is malformed."""


class ShapeError(SpikebitError):
    """Layer shapes do not chain or a tensor has the wrong dimensions."""


class MissingParams(SpikebitError):
    """A conv/linear layer has no parameter tensor."""


class EmptyCalibrationSet(SpikebitError):
    """Activation calibration was invoked without samples."""


class NegativeInput(SpikebitError):
    """Spike encoding received values below zero."""


class RequantShiftError(SpikebitError):
    """Derived requantization shift is negative (left shift unsupported)."""


class PlanError(SpikebitError):
    """Network cannot be mapped onto the planned hardware."""


class CapacityError(PlanError):
    """Required memory exceeds the configured on-chip capacity."""


class FieldOverflow(SpikebitError):
    """Instruction field value exceeds its bit width."""


class IllegalOpcode(SpikebitError):
    """Instruction word carries an unassigned opcode."""


class CodegenError(SpikebitError):
    """Layer references hardware absent from the plan."""


class SimFault(SpikebitError):
    """Machine-level fault (bad address, deadlock, unconfigured module)."""

    def __init__(self, message, cycle=None, pc=None):
        if cycle is not None:
            message = f"{message} (cycle={cycle}, pc={pc})"
        super().__init__(message)
        self.cycle = cycle
        self.pc = pc


class PsumOverflow(SimFault):
    """Partial sum exceeded the planned accumulator width."""


class DegenerateWeights(UserWarning):
    """All-zero weight tensor: scale falls back to the maximum fraction."""


class DeadLayer(UserWarning):
    """Calibration saw no activation energy for a layer."""
