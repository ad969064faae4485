"""
The host enclave's view of a PIM-enabled bank.

A typical offload::

    handle = init(sim, 0)
    attest_and_establish(handle, sim.trusted_ek(0))
    objects = alloc(handle, size, protectable=True)
    load_data(handle, objects, data, layout)
    load_kernel(handle, KernelImage('kmeans'))
    protect(handle, objects)
    offload_and_execute(handle, params)
    output = get_output(handle, objects)

Everything the host does here goes over the bus: bulk data through the
host port of the memory module, commands as fixed-size frames through
the bank's MMIO registers.
"""
import logging
import secrets

from pim_enclave.channel import ATTESTED
from pim_enclave.channel import DESTROYED
from pim_enclave.channel import IDLE
from pim_enclave.channel import KERNEL_LOADED
from pim_enclave.channel import KERNEL_LOCATION
from pim_enclave.channel import NONCE_SIZE
from pim_enclave.channel import RANGE_REGISTERS
from pim_enclave.channel import SESSION_ESTABLISHED
from pim_enclave.channel import AttestationToken
from pim_enclave.channel import verify_token
from pim_enclave.crypto import HOST_ORIGIN
from pim_enclave.crypto import SymmetricKey
from pim_enclave.crypto import aead_encrypt
from pim_enclave.crypto import wrap_session_key
from pim_enclave.dma import EncryptedBlock
from pim_enclave.dma import decode_blocks
from pim_enclave.dma import encode_blocks
from pim_enclave.exceptions import AllocationOverflow
from pim_enclave.exceptions import AuthenticationFailed
from pim_enclave.exceptions import CommandRejected
from pim_enclave.exceptions import KernelTrap
from pim_enclave.exceptions import PhaseViolation
from pim_enclave.exceptions import ReplayDetected
from pim_enclave.frames import DESTROY
from pim_enclave.frames import DEVICE_TO_HOST
from pim_enclave.frames import EXECUTE
from pim_enclave.frames import FRAME_SIZE
from pim_enclave.frames import GET_TOKEN
from pim_enclave.frames import OFFLOAD_KERNEL
from pim_enclave.frames import PARAMS
from pim_enclave.frames import PROTECT
from pim_enclave.frames import RESULT
from pim_enclave.frames import SET_DATA_KEY
from pim_enclave.frames import SET_SESSION_KEY
from pim_enclave.frames import STATUS
from pim_enclave.frames import STATUS_FAULT
from pim_enclave.frames import CommandFrame
from pim_enclave.frames import bootstrap
from pim_enclave.frames import params_payloads
from pim_enclave.frames import seal
from pim_enclave.frames import unseal
from pim_enclave.memory import COMMAND_REGISTER
from pim_enclave.memory import PARAMS_REGISTER
from pim_enclave.memory import READ
from pim_enclave.memory import RESPONSE_REGISTER
from pim_enclave.memory import STATUS_REGISTER
from pim_enclave.memory import WRITE
from pim_enclave.memory import AccessRange
from pim_enclave.pim import KernelImage
from pim_enclave.utils import next_power_of_two
from pim_enclave.utils import round_up


logger = logging.getLogger(__name__)

ALLOC_ALIGNMENT = 4096


class BankAllocation(object):
    """
    A region of one bank handed out by the host allocator. Once data is
    loaded the allocation also remembers its layout, block count and
    plaintext length so the output can be read back.
    """
    def __init__(self, address, offset, size):
        self.address = address
        self.offset = offset
        self.size = size
        self.layout = None
        self.n_blocks = 0
        self.length = 0

    def __repr__(self):
        return '<BankAllocation %#x+%d>' % (self.address, self.size)


class PimHandle(object):
    """The host's binding to one bank and its mirror of the session."""
    def __init__(self, sim, bank_id):
        self.sim = sim
        self.bank_id = bank_id
        self.memory = sim.memory
        self.module_base = sim.config.module_base
        self.phase = IDLE
        self.session_key = None
        self.data_key = None
        self.tx_seq = 0
        self.rx_seq = 0
        self.cursor = 0
        self.token = None
        self.measurement = None

    @property
    def _device(self):
        return self.sim.bank(self.bank_id).controller

    def __repr__(self):
        return '<PimHandle bank=%d %s>' % (self.bank_id, self.phase)


def init(sim, bank_index):
    """Claim ``bank_index`` for this host. Raises ``BankBusy`` if taken."""
    handle = PimHandle(sim, bank_index)
    sim.claim(bank_index, handle)
    return handle


def release(handle):
    handle.sim.release(handle.bank_id, handle)


def _rejected(handle, frame):
    # The wire says only "error"; the trusted local API knows why.
    cause = handle._device.last_error
    if cause is not None:
        return cause
    return CommandRejected("Bank %d rejected %s" % (handle.bank_id, frame.name))


def _transact(handle, frame, register=COMMAND_REGISTER):
    """Write one frame and read back the response frame."""
    memory = handle.memory
    data = frame.to_bytes()
    memory.mmio_access(WRITE, handle.bank_id, register, len(data))
    handle._device.mmio_write(register, data)
    memory.mmio_access(READ, handle.bank_id, RESPONSE_REGISTER, FRAME_SIZE)
    response = CommandFrame.from_bytes(handle._device.mmio_read(RESPONSE_REGISTER, FRAME_SIZE))
    if response.is_error:
        raise _rejected(handle, frame)
    return response


def _open(handle, response, command):
    if response.command_id != command:
        raise AuthenticationFailed("Expected a %s response" % command)
    if response.sequence < handle.rx_seq:
        raise ReplayDetected("Response sequence %d is below %d" % (response.sequence, handle.rx_seq))
    payload = unseal(handle.session_key, response, DEVICE_TO_HOST)
    handle.rx_seq = response.sequence + 1
    return payload


def _send(handle, command, payload=b'', register=COMMAND_REGISTER):
    if handle.session_key is None:
        raise PhaseViolation("Bank %d has no session" % handle.bank_id)
    frame = seal(handle.session_key, command, handle.tx_seq, payload)
    handle.tx_seq += 1
    return _open(handle, _transact(handle, frame, register), command)


def attest_and_establish(handle, trusted_ek_public_key, data_key=None):
    """
    Attest the device and set up the session: GET_TOKEN with a fresh
    nonce, verify the token, wrap a new session key to the attested
    device key, then share the data key. Nothing secret leaves the host
    unless the token verifies.
    """
    if handle.phase not in (IDLE, DESTROYED):
        raise PhaseViolation("Bank %d is already %s" % (handle.bank_id, handle.phase))
    nonce = secrets.token_bytes(NONCE_SIZE)
    response = _transact(handle, bootstrap(GET_TOKEN, nonce))
    token = verify_token(AttestationToken.from_bytes(response.payload), trusted_ek_public_key, nonce)
    handle.token = token
    handle.phase = ATTESTED

    session_key = SymmetricKey.generate()
    _transact(handle, bootstrap(SET_SESSION_KEY, wrap_session_key(token.public_key, session_key)))
    handle.session_key = session_key
    handle.tx_seq = 0
    handle.rx_seq = 0
    handle.phase = SESSION_ESTABLISHED

    handle.data_key = data_key if data_key is not None else SymmetricKey.generate()
    _send(handle, SET_DATA_KEY, handle.data_key.material)
    logger.info("Session established with bank %d" % handle.bank_id)
    return token


def alloc(handle, size, protectable=False):
    """
    Reserve ``size`` bytes of the bank. Protectable allocations are
    rounded up to a power of two and aligned to their size so a single
    base/mask pair covers them exactly.
    """
    if size <= 0:
        raise AllocationOverflow("Cannot allocate %d bytes" % size)
    if protectable:
        size = next_power_of_two(max(size, ALLOC_ALIGNMENT))
        offset = round_up(handle.cursor, size)
    else:
        offset = round_up(handle.cursor, ALLOC_ALIGNMENT)
    if offset + size > handle.sim.config.bank_size_bytes:
        raise AllocationOverflow("Bank %d has no room for %d bytes" % (handle.bank_id, size))
    handle.cursor = offset + size
    return BankAllocation(handle.memory.host_address(handle.bank_id, offset), offset, size)


def sub_allocation(parent, offset, size):
    """A view of part of an existing allocation."""
    if offset < 0 or offset + size > parent.size:
        raise AllocationOverflow("%d bytes at %d do not fit in %r" % (size, offset, parent))
    return BankAllocation(parent.address + offset, parent.offset + offset, size)


def load_blocks(handle, allocation, blocks, layout, length=None):
    """Write already encoded blocks into ``allocation`` through the host port."""
    content = b''.join(block.to_bytes() if isinstance(block, EncryptedBlock) else bytes(block)
                       for block in blocks)
    if len(content) > allocation.size:
        raise AllocationOverflow("%d bytes of blocks exceed %r" % (len(content), allocation))
    if content:
        handle.memory.host_access(WRITE, allocation.address, len(content), content)
    allocation.layout = layout
    allocation.n_blocks = len(blocks)
    allocation.length = length if length is not None else len(blocks) * layout.size_block
    return allocation


def load_data(handle, allocation, data, layout):
    """
    Encrypt ``data`` under the session's data key and place it in
    ``allocation``. Nothing is written if it does not fit.
    """
    if layout.encrypted and handle.data_key is None:
        raise PhaseViolation("Bank %d has no data key" % handle.bank_id)
    needed = layout.n_blocks(len(data)) * layout.wire_size
    if needed > allocation.size:
        raise AllocationOverflow("%d bytes of blocks exceed %r" % (needed, allocation))
    blocks = encode_blocks(data, layout, handle.data_key)
    return load_blocks(handle, allocation, blocks, layout, len(data))


def load_kernel(handle, image):
    """
    Seal ``image`` under the session key, stage it in the bank and send
    OFFLOAD_KERNEL. Returns the measurement, after checking it against
    the host's own measurement of the image.
    """
    if not isinstance(image, KernelImage):
        image = KernelImage.from_bytes(image)
    if handle.session_key is None:
        raise PhaseViolation("Bank %d has no session" % handle.bank_id)
    iv = handle.session_key.iv_sequence(HOST_ORIGIN).next()
    ciphertext, tag = aead_encrypt(handle.session_key, iv, image.to_bytes())
    sealed = iv + ciphertext + tag
    staging = alloc(handle, len(sealed))
    handle.memory.host_access(WRITE, staging.address, len(sealed), sealed)

    payload = _send(handle, OFFLOAD_KERNEL, KERNEL_LOCATION.pack(staging.offset, len(sealed)))
    digest = payload[:32]
    if digest != image.measurement:
        raise AuthenticationFailed("Bank %d reports a different kernel measurement" % handle.bank_id)
    handle.measurement = digest
    handle.phase = KERNEL_LOADED
    return digest


def protect(handle, allocation):
    """Arm the bank's access range over ``allocation``."""
    access_range = AccessRange.for_region(allocation.offset, allocation.size, handle.sim.config.bank_size_bytes)
    _send(handle, PROTECT, RANGE_REGISTERS.pack(*access_range))
    return access_range


def unprotect(handle):
    _send(handle, PROTECT, RANGE_REGISTERS.pack(0, 0))


def offload_and_execute(handle, params, frames=1, wait=True):
    """
    Send ``params`` in exactly ``frames`` parameter frames followed by
    EXECUTE. Only handles, sizes and scalars belong in ``params``; the
    data stays in the bank. With ``wait`` the result bytes are returned.
    """
    payloads = params_payloads(params, frames)
    for payload in payloads:
        _send(handle, PARAMS, payload, register=PARAMS_REGISTER)
    _send(handle, EXECUTE)
    if wait:
        return wait_for(handle)


def wait_for(handle):
    """
    Block until the bank's kernel completes: one status read, then one
    read per result frame. Returns the concatenated result payloads.
    """
    memory = handle.memory
    handle.sim.join([handle.bank_id])
    memory.mmio_access(READ, handle.bank_id, STATUS_REGISTER, STATUS.size)
    status, count = STATUS.unpack(handle._device.mmio_read(STATUS_REGISTER, STATUS.size))
    if status == STATUS_FAULT:
        raise KernelTrap("Kernel on bank %d faulted" % handle.bank_id)
    content = b''
    for _ in range(count):
        memory.mmio_access(READ, handle.bank_id, RESPONSE_REGISTER, FRAME_SIZE)
        frame = CommandFrame.from_bytes(handle._device.mmio_read(RESPONSE_REGISTER, FRAME_SIZE))
        content += _open(handle, frame, RESULT)
    return content


def get_output(handle, allocation, size=None):
    """
    Read the blocks of ``allocation`` back through the host port and
    decrypt them. Tampered blocks, or blocks still hidden behind an armed
    range, fail authentication.
    """
    layout = allocation.layout
    if layout is None:
        raise AllocationOverflow("%r holds no blocks" % allocation)
    total = allocation.n_blocks * layout.wire_size
    if not total:
        return b''
    content, _ = handle.memory.host_access(READ, allocation.address, total)
    blocks = [content[i:i + layout.wire_size] for i in range(0, total, layout.wire_size)]
    return decode_blocks(blocks, layout, handle.data_key, allocation.length if size is None else size)


def destroy(handle):
    """Kill the session; the bank zeroizes its keys and local memory."""
    _send(handle, DESTROY)
    for key in (handle.session_key, handle.data_key):
        if key is not None:
            key.zeroize()
    handle.session_key = None
    handle.data_key = None
    handle.measurement = None
    handle.phase = DESTROYED
    logger.info("Session with bank %d destroyed" % handle.bank_id)
