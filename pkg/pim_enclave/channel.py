"""
The enclave controller of a bank: attestation, session establishment and
the command state machine behind the bank's MMIO registers.

Every command is answered with one fixed-size frame. Whatever goes wrong,
the host only ever sees the generic error frame; the specific cause is
kept in ``EnclaveController.last_error`` for local, trusted inspection.
"""
import logging
import struct
from collections import namedtuple
from dataclasses import dataclass
from dataclasses import field

from pim_enclave.crypto import KEY_SIZE
from pim_enclave.crypto import PUBLIC_KEY_SIZE
from pim_enclave.crypto import SIGNATURE_SIZE
from pim_enclave.crypto import WRAPPED_KEY_SIZE
from pim_enclave.crypto import SymmetricKey
from pim_enclave.crypto import ek_sign
from pim_enclave.crypto import ek_verify
from pim_enclave.crypto import unwrap_session_key
from pim_enclave.dma import DATA
from pim_enclave.dma import SESSION
from pim_enclave.exceptions import AddressOutOfRange
from pim_enclave.exceptions import AuthenticationFailed
from pim_enclave.exceptions import FrameCapacityError
from pim_enclave.exceptions import KernelTrap
from pim_enclave.exceptions import MalformedFrame
from pim_enclave.exceptions import PhaseViolation
from pim_enclave.exceptions import ReplayDetected
from pim_enclave.exceptions import SimulationError
from pim_enclave.exceptions import TokenVerificationError
from pim_enclave.exceptions import UnknownCommand
from pim_enclave.frames import DESTROY
from pim_enclave.frames import DEVICE_TO_HOST
from pim_enclave.frames import EXECUTE
from pim_enclave.frames import GET_TOKEN
from pim_enclave.frames import HOST_COMMANDS
from pim_enclave.frames import HOST_TO_DEVICE
from pim_enclave.frames import OFFLOAD_KERNEL
from pim_enclave.frames import PARAMS
from pim_enclave.frames import PROTECT
from pim_enclave.frames import RESULT
from pim_enclave.frames import SET_DATA_KEY
from pim_enclave.frames import SET_SESSION_KEY
from pim_enclave.frames import STATUS
from pim_enclave.frames import STATUS_DONE
from pim_enclave.frames import STATUS_FAULT
from pim_enclave.frames import STATUS_IDLE
from pim_enclave.frames import CommandFrame
from pim_enclave.frames import bootstrap
from pim_enclave.frames import error_frame
from pim_enclave.frames import seal
from pim_enclave.frames import split_payload
from pim_enclave.frames import unseal
from pim_enclave.memory import COMMAND_REGISTER
from pim_enclave.memory import PARAMS_REGISTER
from pim_enclave.memory import RESPONSE_REGISTER
from pim_enclave.memory import STATUS_REGISTER
from pim_enclave.memory import AccessRange


logger = logging.getLogger(__name__)

ROM_VERSION = 1
NONCE_SIZE = 32

IDLE = 'IDLE'
ATTESTED = 'ATTESTED'
SESSION_ESTABLISHED = 'SESSION_ESTABLISHED'
KERNEL_LOADED = 'KERNEL_LOADED'
EXECUTING = 'EXECUTING'
DESTROYED = 'DESTROYED'
FAULTED = 'FAULTED'

PHASES = (IDLE, ATTESTED, SESSION_ESTABLISHED, KERNEL_LOADED, EXECUTING, DESTROYED, FAULTED)

# Phases in which a command is accepted.
PERMITTED = {
    GET_TOKEN: PHASES,
    SET_SESSION_KEY: (ATTESTED, SESSION_ESTABLISHED, KERNEL_LOADED),
    SET_DATA_KEY: (SESSION_ESTABLISHED, KERNEL_LOADED),
    OFFLOAD_KERNEL: (SESSION_ESTABLISHED, KERNEL_LOADED),
    PARAMS: (KERNEL_LOADED,),
    EXECUTE: (KERNEL_LOADED,),
    PROTECT: (SESSION_ESTABLISHED, KERNEL_LOADED),
    DESTROY: (SESSION_ESTABLISHED, KERNEL_LOADED),
}

KERNEL_LOCATION = struct.Struct('>QI')
RANGE_REGISTERS = struct.Struct('>QQ')
TOKEN_HEADER = struct.Struct('>Q')
TOKEN_VERSION = struct.Struct('>I')


class AttestationToken(namedtuple('AttestationToken', 'device_id public_key version nonce signature')):
    """
    An EK-signed statement binding the device identity, the key session
    keys are wrapped to, the ROM version and the caller's nonce.
    """
    __slots__ = ()

    SIZE = TOKEN_HEADER.size + PUBLIC_KEY_SIZE + TOKEN_VERSION.size + NONCE_SIZE + SIGNATURE_SIZE

    @staticmethod
    def signed_message(device_id, public_key, version, nonce):
        return TOKEN_HEADER.pack(device_id) + public_key + TOKEN_VERSION.pack(version) + nonce

    @property
    def message(self):
        return self.signed_message(self.device_id, self.public_key, self.version, self.nonce)

    def to_bytes(self):
        return self.message + self.signature

    @classmethod
    def from_bytes(cls, data):
        data = bytes(data)[:cls.SIZE]
        if len(data) != cls.SIZE:
            raise TokenVerificationError("Attestation token is truncated")
        (device_id,) = TOKEN_HEADER.unpack_from(data)
        position = TOKEN_HEADER.size
        public_key = data[position:position + PUBLIC_KEY_SIZE]
        position += PUBLIC_KEY_SIZE
        (version,) = TOKEN_VERSION.unpack_from(data, position)
        position += TOKEN_VERSION.size
        nonce = data[position:position + NONCE_SIZE]
        position += NONCE_SIZE
        return cls(device_id, public_key, version, nonce, data[position:position + SIGNATURE_SIZE])


def verify_token(token, trusted_ek_public_key, nonce):
    """
    Check ``token`` against the out-of-band trusted EK public key and the
    nonce the host sent. Raises ``TokenVerificationError`` on any
    mismatch and returns the token otherwise.
    """
    if token.nonce != bytes(nonce):
        raise TokenVerificationError("Token does not echo the nonce sent")
    if not ek_verify(trusted_ek_public_key, token.message, token.signature):
        raise TokenVerificationError("Token signature does not verify under the trusted EK")
    return token


@dataclass
class SessionState(object):
    phase: str = IDLE
    session_key: SymmetricKey = None
    data_key: SymmetricKey = None
    expected_seq: int = 0
    tx_seq: int = 0
    measurement: bytes = None
    params: bytearray = field(default_factory=bytearray)
    results: list = field(default_factory=list)
    status: int = STATUS_IDLE


class EnclaveController(object):
    """
    The command interface of one bank. Frames arrive through
    ``mmio_write()`` on the command or parameter window; responses, the
    status register and result frames are read back with ``mmio_read()``.
    """
    def __init__(self, config, core, ek):
        self.config = config
        self.core = core
        self.bank = core.bank
        self.__ek = ek
        self.state = SessionState()
        self.last_error = None
        self._response = None

    @property
    def phase(self):
        return self.state.phase

    # Register file

    def mmio_write(self, register, data):
        if register not in (COMMAND_REGISTER, PARAMS_REGISTER):
            raise AddressOutOfRange("Register %#x of bank %d is not writable" % (register, self.bank))
        self._response = self.dispatch(data, register)

    def mmio_read(self, register, size):
        if register == STATUS_REGISTER:
            return STATUS.pack(self.state.status, len(self.state.results))[:size]
        if register != RESPONSE_REGISTER:
            raise AddressOutOfRange("Register %#x of bank %d is not readable" % (register, self.bank))
        if self._response is not None:
            frame, self._response = self._response, None
        elif self.state.results:
            frame = self.state.results.pop(0)
        else:
            frame = error_frame()
        return frame.to_bytes()[:size]

    # Command dispatch

    def dispatch(self, frame, register=None):
        """
        Process one frame and return the response frame. Never raises:
        every failure becomes the generic error frame, with the cause
        recorded in ``last_error``.
        """
        try:
            if not isinstance(frame, CommandFrame):
                frame = CommandFrame.from_bytes(frame)
            if register is not None and (register == PARAMS_REGISTER) != (frame.command_id == PARAMS):
                raise MalformedFrame("%s frame written to the wrong window" % frame.name)
            response = self._dispatch(frame)
        except SimulationError as e:
            logger.warning("%s %s" % (e.code, e))
            self.last_error = e
            return error_frame()
        self.last_error = None
        return response

    def _dispatch(self, frame):
        command = frame.command_id
        if command not in HOST_COMMANDS:
            raise UnknownCommand("Bank %d does not know command %#04x" % (self.bank, command))
        if command == GET_TOKEN:
            return self._get_token(frame.payload[:NONCE_SIZE])
        if command == SET_SESSION_KEY:
            return self._set_session_key(frame.payload[:WRAPPED_KEY_SIZE])

        payload = self._authenticate(frame)
        self._require(frame)
        handler = {
            SET_DATA_KEY: self._set_data_key,
            OFFLOAD_KERNEL: self._offload_kernel,
            PARAMS: self._params,
            EXECUTE: self._execute,
            PROTECT: self._protect,
            DESTROY: self._destroy,
        }[command]
        return handler(payload)

    def _authenticate(self, frame):
        state = self.state
        if state.phase in (DESTROYED, FAULTED):
            raise AuthenticationFailed("Bank %d has no live session key" % self.bank)
        if state.session_key is None:
            raise PhaseViolation("%s before a session is established" % frame.name)
        payload = unseal(state.session_key, frame, HOST_TO_DEVICE)
        if frame.sequence < state.expected_seq:
            raise ReplayDetected("Sequence %d is below %d" % (frame.sequence, state.expected_seq))
        state.expected_seq = frame.sequence + 1
        return payload

    def _require(self, frame):
        if self.state.phase not in PERMITTED[frame.command_id]:
            raise PhaseViolation("%s is not permitted in %s" % (frame.name, self.state.phase))

    def _respond(self, command, payload=b''):
        frame = seal(self.state.session_key, command, self.state.tx_seq, payload, DEVICE_TO_HOST)
        self.state.tx_seq += 1
        return frame

    # Commands

    def _get_token(self, nonce):
        """Sign a fresh attestation token; the only use of the EK."""
        message = AttestationToken.signed_message(self.__ek.device_id, self.__ek.agreement_public_key,
                                                  ROM_VERSION, bytes(nonce))
        token = AttestationToken(self.__ek.device_id, self.__ek.agreement_public_key, ROM_VERSION,
                                 bytes(nonce), ek_sign(self.__ek, message))
        if self.state.phase in (IDLE, DESTROYED, FAULTED):
            self.state.phase = ATTESTED
        logger.debug("Bank %d issued an attestation token" % self.bank)
        return bootstrap(GET_TOKEN, token.to_bytes())

    def _set_session_key(self, wrapped):
        state = self.state
        if state.phase not in PERMITTED[SET_SESSION_KEY]:
            raise PhaseViolation("SET_SESSION_KEY is not permitted in %s" % state.phase)
        key = unwrap_session_key(self.__ek, wrapped)
        old = state.session_key
        self.core.program_key(SESSION, key)
        if old is not None:
            old.zeroize()
        state.session_key = key
        state.expected_seq = 0
        state.tx_seq = 0
        if state.phase == ATTESTED:
            state.phase = SESSION_ESTABLISHED
            logger.info("Bank %d session established" % self.bank)
        else:
            logger.info("Bank %d session rekeyed" % self.bank)
        return bootstrap(SET_SESSION_KEY)

    def _set_data_key(self, payload):
        key = SymmetricKey(payload[:KEY_SIZE])
        self.core.program_key(DATA, key)
        self.state.data_key = key
        return self._respond(SET_DATA_KEY)

    def _offload_kernel(self, payload):
        offset, size = KERNEL_LOCATION.unpack_from(payload)
        self.core.clock.advance_to(self.core.memory.clock.now)
        digest, _ = self.core.load_kernel_from_bank(offset, size)
        self.state.measurement = digest
        self.state.phase = KERNEL_LOADED
        return self._respond(OFFLOAD_KERNEL, digest)

    def _params(self, payload):
        if len(self.state.params) + len(payload) > self.config.runtime_reserved_bytes:
            raise FrameCapacityError("Parameter buffer of bank %d is full" % self.bank)
        self.state.params += payload
        return self._respond(PARAMS)

    def _execute(self, payload):
        state = self.state
        params, state.params = bytes(state.params), bytearray()
        state.results = []
        state.phase = EXECUTING
        try:
            result = self.core.execute(params, start=self.core.memory.clock.now)
        except KernelTrap:
            self._teardown(FAULTED)
            self.state.status = STATUS_FAULT
            raise
        state.phase = KERNEL_LOADED
        state.status = STATUS_DONE
        response = self._respond(EXECUTE)
        if result.result:
            state.results = [self._respond(RESULT, piece) for piece in split_payload(result.result)]
        return response

    def _protect(self, payload):
        base, mask = RANGE_REGISTERS.unpack_from(payload)
        limit = self.config.bank_size_bytes
        if base >= limit or mask >= limit:
            raise AddressOutOfRange("Range registers %#x/%#x exceed the bank" % (base, mask))
        self.core.set_access_range(AccessRange(base, mask))
        return self._respond(PROTECT)

    def _destroy(self, payload):
        response = self._respond(DESTROY)
        self._teardown(DESTROYED)
        logger.info("Bank %d session destroyed" % self.bank)
        return response

    def _teardown(self, phase):
        state = self.state
        self.core.zeroize()
        for key in (state.session_key, state.data_key):
            if key is not None:
                key.zeroize()
        self.state = SessionState(phase=phase, status=state.status)
