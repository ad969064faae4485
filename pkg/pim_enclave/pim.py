"""
The PIM core of a bank: kernel images, the kernel registry, the device
ABI handed to running kernels and the core that ties them together.
"""
import logging
import struct
from collections import namedtuple
from dataclasses import dataclass
from dataclasses import replace

from django.conf import settings
from django.utils.module_loading import import_string

from pim_enclave.clock import Clock
from pim_enclave.clock import SimTime
from pim_enclave.clock import ZERO
from pim_enclave.crypto import IV_SIZE
from pim_enclave.crypto import TAG_SIZE
from pim_enclave.crypto import aead_decrypt
from pim_enclave.crypto import measure
from pim_enclave.dma import BANK_READ
from pim_enclave.dma import SESSION
from pim_enclave.dma import AesDmaEngine
from pim_enclave.exceptions import ImageTooLarge
from pim_enclave.exceptions import KernelTrap
from pim_enclave.exceptions import LayoutError
from pim_enclave.exceptions import SimulationError
from pim_enclave.exceptions import UnknownKernel
from pim_enclave.memory import DISABLED
from pim_enclave.memory import AccessRange
from pim_enclave.memory import LocalMemory
from pim_enclave.utils import load_params


logger = logging.getLogger(__name__)

MAGIC = b'PIMK'
NAME_LENGTH = struct.Struct('>H')
VERSION = struct.Struct('>I')

DEFAULT_KERNELS = {
    'kmeans': 'pim_enclave.kernels.kmeans_kernel',
    'hashtable_search': 'pim_enclave.kernels.hashtable_search_kernel',
    'spin': 'pim_enclave.kernels.spin_kernel',
}

DONE = 'DONE'
FAULT = 'FAULT'


def get_kernel(name):
    """
    Resolve a kernel name through the ``PIM_ENCLAVE_KERNELS`` setting,
    a mapping of names to dotted paths of ``kernel(ctx, params)``
    callables.
    """
    kernels = getattr(settings, 'PIM_ENCLAVE_KERNELS', DEFAULT_KERNELS)
    try:
        return import_string(kernels[name])
    except (KeyError, ImportError):
        raise UnknownKernel("No kernel is registered as %r" % name)


@dataclass(frozen=True)
class KernelImage(object):
    """
    A serialised kernel::

        b'PIMK' || name length (2) || name || version (4) || payload
    """
    kernel_name: str
    version: int = 1
    payload: bytes = b''

    def to_bytes(self):
        name = self.kernel_name.encode('utf-8')
        return MAGIC + NAME_LENGTH.pack(len(name)) + name + VERSION.pack(self.version) + bytes(self.payload)

    @classmethod
    def from_bytes(cls, data):
        data = bytes(data)
        if data[:4] != MAGIC:
            raise LayoutError("Kernel image does not start with %r" % MAGIC)
        try:
            (length,) = NAME_LENGTH.unpack_from(data, 4)
            start = 4 + NAME_LENGTH.size
            name = data[start:start + length]
            if len(name) != length:
                raise LayoutError("Kernel image is truncated")
            (version,) = VERSION.unpack_from(data, start + length)
            name = name.decode('utf-8')
        except (struct.error, UnicodeDecodeError):
            raise LayoutError("Kernel image header is malformed")
        return cls(name, version, data[start + length + VERSION.size:])

    @property
    def measurement(self):
        return measure(self.to_bytes())

    def __len__(self):
        return len(self.to_bytes())


ExecutionResult = namedtuple('ExecutionResult', [
    'status', 'result', 'compute_cycles', 'abi_cycles', 'dma_time', 'aes_time',
    'inflation_time', 'local_time', 'total_time', 'started', 'finished'])


class KernelContext(object):
    """
    The device ABI a kernel runs against. It reaches its own bank through
    the DMA engine, its own slice of local memory and the bank's range
    registers, and nothing else. Key use is implicit through the DMA key
    slots.

    Local-memory offsets are relative to the kernel heap, which starts
    just after the resident image.
    """
    def __init__(self, core, raw_params):
        self._core = core
        self._raw_params = raw_params
        self._costs = core.config.kernel_cost_table
        self.compute_cycles = 0
        self.abi_cycles = 0
        self.dma_time = ZERO
        self.local_accesses = 0
        self.result = b''

    def _abi(self, extra=0):
        self.abi_cycles += self._costs['abi_call'] + extra

    @property
    def bank_id(self):
        return self._core.bank

    @property
    def bank_size(self):
        return self._core.config.bank_size_bytes

    @property
    def local_capacity(self):
        return self._core.config.local_mem_bytes - self._core.heap_base

    def cost(self, name):
        """The configured cycle cost of a named kernel step."""
        return self._costs[name]

    def get_params(self):
        """The decrypted parameter bytes sent with EXECUTE."""
        self._abi()
        return self._raw_params

    def consume_cycles(self, n):
        if n < 0:
            raise KernelTrap("Cannot consume %d cycles" % n)
        self.compute_cycles += n

    def dma_request(self, req):
        self._abi()
        if req.direction == BANK_READ:
            req = replace(req, dst=req.dst + self._core.heap_base)
        else:
            req = replace(req, src=req.src + self._core.heap_base)
        if req.local_offset < self._core.heap_base:
            raise KernelTrap("DMA into the runtime region of bank %d" % self.bank_id)
        try:
            latency = self._core.engine.dma_transfer(req)
        except SimulationError as e:
            raise KernelTrap("DMA failed on bank %d: %s %s" % (self.bank_id, e.code, e))
        self.dma_time += latency
        return latency

    def _local(self, offset, size):
        if offset < 0 or size < 0 or offset + size > self.local_capacity:
            raise KernelTrap("Local access at [%#x, %#x) is out of bounds" % (offset, offset + size))
        self.local_accesses += 1
        return self._core.heap_base + offset

    def local_read(self, offset, size):
        self._abi()
        return self._core.local.read(self._local(offset, size), size)

    def local_write(self, offset, data):
        self._abi()
        self._core.local.write(self._local(offset, len(data)), data)

    def read_u32(self, offset):
        (value,) = struct.unpack('<I', self.local_read(offset, 4))
        return value

    def set_protect(self, base, mask):
        self._abi()
        self._core.set_access_range(AccessRange(base, mask))

    def clear_protect(self):
        self._abi()
        self._core.set_access_range(DISABLED)

    def post_result(self, data):
        self._abi(self._costs['result_post'])
        self.result = bytes(data)

    @property
    def local_time(self):
        return self._core.config.local_mem_latency_ns * self.local_accesses

    @property
    def elapsed(self):
        cycles = SimTime.from_cycles(self.compute_cycles + self.abi_cycles, self._core.config.pim_clock_hz)
        return cycles + self.dma_time + self.local_time


class PimCore(object):
    """
    The processor of one bank, with its local memory, its DMA engine and
    its own clock. Only the core's runtime programs keys and range
    registers; kernels go through ``KernelContext``.
    """
    def __init__(self, config, memory, bank):
        self.config = config
        self.memory = memory
        self.bank = bank
        self.clock = Clock('bank%d' % bank)
        self.local = LocalMemory(config.local_mem_bytes, config.local_mem_latency_ns)
        self.engine = AesDmaEngine(config, memory, bank, self.local, owner=self)
        memory.attach(bank, self)
        self.image = None
        self.kernel = None
        self.measurement = None
        self.last_result = None

    @property
    def heap_base(self):
        size = len(self.image) if self.image is not None else 0
        return self.config.runtime_reserved_bytes + size

    def program_key(self, slot, key):
        self.engine.program_key(slot, key, caller=self)

    def set_access_range(self, access_range):
        self.memory.set_access_range(self.bank, access_range, caller=self)

    def _check_size(self, size):
        if size > self.config.kernel_capacity:
            raise ImageTooLarge("A %d-byte image does not fit in %d bytes of local memory" % (
                size, self.config.kernel_capacity))

    def load_kernel(self, image_ciphertext):
        """
        Decrypt a sealed kernel image (``iv || ciphertext || tag`` under
        the session key), validate it and make it resident. Returns the
        measurement of the plaintext image. Local memory is left as it
        was if anything fails.
        """
        sealed = bytes(image_ciphertext)
        self._check_size(len(sealed) - IV_SIZE - TAG_SIZE)
        key = self.engine.key(SESSION)
        plaintext = aead_decrypt(key, sealed[:IV_SIZE], sealed[IV_SIZE:-TAG_SIZE], sealed[-TAG_SIZE:])
        return self._install(plaintext)

    def load_kernel_from_bank(self, offset, size):
        """
        DMA a sealed kernel image staged in the bank and install it.
        Returns ``(measurement, latency)``.
        """
        self._check_size(size - IV_SIZE - TAG_SIZE)
        plaintext, latency = self.engine.fetch(offset, size, SESSION)
        digest = self._install(plaintext)
        self.clock.advance(latency)
        return digest, latency

    def _install(self, plaintext):
        self._check_size(len(plaintext))
        image = KernelImage.from_bytes(plaintext)
        kernel = get_kernel(image.kernel_name)
        base = self.config.runtime_reserved_bytes
        self.local.fill(base, self.config.kernel_capacity)
        self.local.write(base, plaintext)
        self.image = image
        self.kernel = kernel
        self.measurement = measure(plaintext)
        logger.info("Bank %d loaded kernel %s v%d" % (self.bank, image.kernel_name, image.version))
        return self.measurement

    def execute(self, raw_params=b'', start=ZERO):
        """
        Run the resident kernel to completion no earlier than ``start``.
        Any failure inside the kernel surfaces as ``KernelTrap``; the
        caller decides what a fault tears down.
        """
        if self.kernel is None:
            raise KernelTrap("Bank %d has no kernel loaded" % self.bank)
        try:
            params = load_params(raw_params) if bytes(raw_params).strip(b'\x00') else {}
        except ValueError:
            raise KernelTrap("Bank %d received unparseable parameters" % self.bank)

        started = self.clock.advance_to(start)
        aes_before = self.engine.stats.aes_time
        inflation_before = self.engine.stats.inflation_time
        ctx = KernelContext(self, bytes(raw_params))
        try:
            self.kernel(ctx, params)
        except KernelTrap as e:
            self.clock.advance(ctx.elapsed)
            logger.warning("%s %s" % (e.code, e))
            raise
        except SimulationError as e:
            self.clock.advance(ctx.elapsed)
            logger.warning("%s %s" % (e.code, e))
            raise KernelTrap("Kernel %s on bank %d failed: %s" % (self.image.kernel_name, self.bank, e))
        except (KeyError, TypeError, ValueError) as e:
            self.clock.advance(ctx.elapsed)
            raise KernelTrap("Kernel %s on bank %d rejected its parameters: %r" % (
                self.image.kernel_name, self.bank, e))
        except Exception as e:
            self.clock.advance(ctx.elapsed)
            raise KernelTrap("Kernel %s on bank %d crashed: %r" % (self.image.kernel_name, self.bank, e))

        finished = self.clock.advance(ctx.elapsed)
        self.last_result = ExecutionResult(
            status=DONE,
            result=ctx.result,
            compute_cycles=ctx.compute_cycles,
            abi_cycles=ctx.abi_cycles,
            dma_time=ctx.dma_time,
            aes_time=self.engine.stats.aes_time - aes_before,
            inflation_time=self.engine.stats.inflation_time - inflation_before,
            local_time=ctx.local_time,
            total_time=ctx.elapsed,
            started=started,
            finished=finished,
        )
        logger.debug("Bank %d finished %s in %s" % (self.bank, self.image.kernel_name, ctx.elapsed))
        return self.last_result

    def zeroize(self):
        """Clear keys, local memory and the access range."""
        self.engine.clear_keys()
        self.local.zeroize()
        self.set_access_range(DISABLED)
        self.image = None
        self.kernel = None
        self.measurement = None
        self.last_result = None
