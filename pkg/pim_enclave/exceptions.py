"""
Exceptions raised by the simulator, each carrying a stable error code.

On the command channel every one of these collapses into the same generic
error frame; the specific class is only visible through the local API.
"""


class SimulationError(Exception):
    """Base exception class for all simulator failures."""
    code = 'SIMULATION_ERROR'


class ConfigError(SimulationError):
    """A configuration document failed to parse or validate."""
    code = 'CONFIG_INVALID'


class SimTimeOverflow(SimulationError):
    """Simulated time moved beyond the representable range."""
    code = 'SIMTIME_OVERFLOW'


class AddressOutOfRange(SimulationError):
    """An address does not fall inside the memory module."""
    code = 'ADDRESS_OUT_OF_RANGE'


class UnauthorizedCaller(SimulationError):
    """
    A privileged register was touched by something other than the
    owning PIM core or its runtime.
    """
    code = 'UNAUTHORIZED_CALLER'


class AuthenticationFailed(SimulationError):
    """An AEAD tag, signature or wrapped key did not verify."""
    code = 'AUTHENTICATION_FAILED'


class TokenVerificationError(AuthenticationFailed):
    """An attestation token did not verify under the trusted EK."""
    code = 'TOKEN_INVALID'


class ReplayDetected(SimulationError):
    """A command frame reused or decreased the sequence number."""
    code = 'REPLAY_DETECTED'


class PhaseViolation(SimulationError):
    """A command arrived in a session phase that does not permit it."""
    code = 'PHASE_VIOLATION'


class UnknownCommand(SimulationError):
    """A command frame carried an unrecognised command identifier."""
    code = 'UNKNOWN_COMMAND'


class MalformedFrame(SimulationError):
    """A frame did not have the fixed wire size or layout."""
    code = 'MALFORMED_FRAME'


class KeySlotEmpty(SimulationError):
    """A crypto DMA transfer referenced an unprogrammed key slot."""
    code = 'KEY_SLOT_EMPTY'


class LayoutError(SimulationError):
    """A block layout or DMA request violates its invariants."""
    code = 'LAYOUT_INVALID'


class KernelTrap(SimulationError):
    """A running kernel made an invalid ABI call."""
    code = 'KERNEL_TRAP'


class UnknownKernel(SimulationError):
    """A kernel image names a kernel absent from the registry."""
    code = 'UNKNOWN_KERNEL'


class ImageTooLarge(SimulationError):
    """A kernel image does not fit in the usable local memory."""
    code = 'IMAGE_TOO_LARGE'


class BankBusy(SimulationError):
    """The bank already has a live host client."""
    code = 'BANK_BUSY'


class AllocationOverflow(SimulationError):
    """Data does not fit in its bank allocation or in the bank."""
    code = 'ALLOCATION_OVERFLOW'


class AlignmentError(SimulationError):
    """A region cannot be expressed as a base/mask register pair."""
    code = 'ALIGNMENT_INVALID'


class FrameCapacityError(SimulationError):
    """A parameter record does not fit in its parameter frames."""
    code = 'FRAME_CAPACITY'


class CommandRejected(SimulationError):
    """
    The device answered with the generic error frame. The specific
    cause, when known locally, is attached as ``cause``.
    """
    code = 'COMMAND_REJECTED'

    def __init__(self, message, cause=None):
        super(CommandRejected, self).__init__(message)
        self.cause = cause
