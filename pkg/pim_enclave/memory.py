"""
The memory module: bank storage, row-buffer timing, the per-bank
access-control registers, the host access port and the bus tracer.
"""
import csv
import logging
from collections import namedtuple

import numpy as np

from pim_enclave.clock import Clock
from pim_enclave.clock import ZERO
from pim_enclave.exceptions import AddressOutOfRange
from pim_enclave.exceptions import AlignmentError
from pim_enclave.exceptions import UnauthorizedCaller
from pim_enclave.utils import ceil_div
from pim_enclave.utils import is_power_of_two


logger = logging.getLogger(__name__)

READ = 'READ'
WRITE = 'WRITE'

PAGE_SIZE = 4096

# Register windows inside each bank's MMIO slot.
COMMAND_REGISTER = 0x000
PARAMS_REGISTER = 0x400
RESPONSE_REGISTER = 0x800
STATUS_REGISTER = 0xC00

TRACE_HEADER = ['timestamp_ns', 'op', 'address_hex', 'size', 'blocked']


BankAddress = namedtuple('BankAddress', 'bank_id offset')


class AccessRange(namedtuple('AccessRange', 'base mask')):
    """
    A range base/mask register pair. A bank offset ``a`` is protected
    when ``a & mask == base``; both registers at zero turn protection
    off.
    """
    __slots__ = ()

    @property
    def enabled(self):
        return bool(self.base or self.mask)

    def covers(self, offset):
        return self.enabled and (offset & self.mask) == self.base

    def covered(self, offsets):
        """Vectorised ``covers()`` over an array of offsets."""
        if not self.enabled:
            return np.zeros(len(offsets), dtype=bool)
        return (offsets & self.mask) == self.base

    @classmethod
    def for_region(cls, offset, size, bank_size):
        """
        The register pair protecting exactly ``[offset, offset + size)``.
        The region must be a power of two in size, aligned to its size
        and smaller than the bank.
        """
        if not is_power_of_two(size):
            raise AlignmentError("Region size %d is not a power of two" % size)
        if offset % size:
            raise AlignmentError("Region at %#x is not aligned to its size %d" % (offset, size))
        if size >= bank_size:
            raise AlignmentError("A whole-bank region has no base/mask encoding")
        return cls(offset, ~(size - 1) & (bank_size - 1))


DISABLED = AccessRange(0, 0)


class TraceEvent(namedtuple('TraceEvent', 'timestamp op address size blocked')):
    __slots__ = ()

    def as_row(self):
        return [self.timestamp.format_ns(), self.op, '%016x' % self.address,
                self.size, 'true' if self.blocked else 'false']

    @property
    def signature(self):
        """The part of an event visible to a bus observer, minus timing."""
        return (self.address, self.op, self.size)


class Tracer(object):
    """
    An in-memory bus trace. Events must arrive in timestamp order; a
    disabled tracer silently discards them.
    """
    def __init__(self, enabled=True):
        self.enabled = enabled
        self.events = []

    def __len__(self):
        return len(self.events)

    def trace_sink(self, event):
        if not self.enabled:
            return
        if self.events and event.timestamp < self.events[-1].timestamp:
            raise ValueError("Trace event at %s precedes %s" % (event.timestamp, self.events[-1].timestamp))
        self.events.append(event)

    def mark(self):
        """A position to pass to ``since()`` later."""
        return len(self.events)

    def since(self, mark):
        return self.events[mark:]

    def clear(self):
        self.events = []

    def write_csv(self, f, events=None):
        """Write ``events`` (default: the whole trace) as CSV to ``f``."""
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(TRACE_HEADER)
        for event in self.events if events is None else events:
            writer.writerow(event.as_row())


class MemoryModule(object):
    """
    ``n_banks`` contiguous banks starting at ``module_base``, each with an
    open-page row buffer and a single access-control register pair.

    Host accesses go through ``host_access()`` and ``mmio_access()``,
    advance the host clock and are traced. The PIM side of each bank
    uses ``pim_read()`` and ``pim_write()``, which are never filtered or
    traced.
    """
    def __init__(self, config, tracer=None, clock=None):
        self.config = config
        self.tracer = tracer if tracer is not None else Tracer(config.trace_enabled)
        self.clock = clock if clock is not None else Clock('host')
        self._pages = [{} for _ in range(config.n_banks)]
        self._open_rows = [None] * config.n_banks
        self._ranges = [DISABLED] * config.n_banks
        self._owners = [None] * config.n_banks

    # Addressing

    def translate(self, host_addr):
        offset = host_addr - self.config.module_base
        if offset < 0 or offset >= self.config.module_size:
            raise AddressOutOfRange("Address %#x is outside the memory module" % host_addr)
        return BankAddress(*divmod(offset, self.config.bank_size_bytes))

    def host_address(self, bank, offset):
        self.check_range(bank, offset, 1)
        return self.config.module_base + bank * self.config.bank_size_bytes + offset

    def mmio_address(self, bank, register):
        self._check_bank(bank)
        return self.config.mmio_base + bank * self.config.mmio_stride + register

    def _check_bank(self, bank):
        if not 0 <= bank < self.config.n_banks:
            raise AddressOutOfRange("Bank %s does not exist" % bank)

    def check_range(self, bank, offset, size):
        self._check_bank(bank)
        if offset < 0 or size < 0 or offset + size > self.config.bank_size_bytes:
            raise AddressOutOfRange("Bank %d has no bytes at [%#x, %#x)" % (bank, offset, offset + size))

    # Storage

    def _read(self, bank, offset, size):
        pages = self._pages[bank]
        out = bytearray(size)
        position = 0
        while position < size:
            page, start = divmod(offset + position, PAGE_SIZE)
            length = min(PAGE_SIZE - start, size - position)
            content = pages.get(page)
            if content is not None:
                out[position:position + length] = content[start:start + length]
            position += length
        return bytes(out)

    def _write(self, bank, offset, data):
        pages = self._pages[bank]
        position = 0
        while position < len(data):
            page, start = divmod(offset + position, PAGE_SIZE)
            length = min(PAGE_SIZE - start, len(data) - position)
            content = pages.get(page)
            if content is None:
                content = pages[page] = bytearray(PAGE_SIZE)
            content[start:start + length] = data[position:position + length]
            position += length

    def snapshot(self, bank, offset=0, size=None):
        """
        Raw bank bytes, as a physical attacker pulling the DIMM would see
        them. Bypasses access control and tracing and costs no time.
        """
        if size is None:
            size = self.config.bank_size_bytes - offset
        self.check_range(bank, offset, size)
        return self._read(bank, offset, size)

    def touched_pages(self, bank):
        """Offsets of the pages of ``bank`` that have ever been written."""
        return sorted(page * PAGE_SIZE for page in self._pages[bank])

    # Timing

    def _latency(self, bank, offset, size, commit=True):
        config = self.config
        first = offset // config.burst_bytes
        last = (offset + size - 1) // config.burst_bytes
        first_row = first * config.burst_bytes // config.row_buffer_bytes
        last_row = last * config.burst_bytes // config.row_buffer_bytes
        misses = last_row - first_row + 1
        if first_row == self._open_rows[bank]:
            misses -= 1
        if commit:
            self._open_rows[bank] = last_row
        return misses * config.row_miss_ns + (last - first + 1) * config.tBURST_ns

    def dram_latency(self, bank, offset, size):
        """
        Row-buffer latency of touching ``size`` bytes at ``offset``, one
        burst at a time: a hit costs tBURST, a miss additionally costs
        tRP + tRCD + tCL and opens the row.
        """
        if size <= 0:
            raise ValueError("DRAM access of %d bytes" % size)
        self.check_range(bank, offset, size)
        return self._latency(bank, offset, size)

    def stream_latency(self, bank, offset, size):
        """
        Split a bank-side transfer into the latency of its leading burst
        and the latency of the bursts that follow it.
        """
        self.check_range(bank, offset, size)
        lead_size = min(size, self.config.burst_bytes - offset % self.config.burst_bytes)
        lead = self._latency(bank, offset, lead_size)
        rest = ZERO
        if size > lead_size:
            rest = self._latency(bank, offset + lead_size, size - lead_size)
        return lead, rest

    def open_row(self, bank):
        return self._open_rows[bank]

    def close_rows(self):
        self._open_rows = [None] * self.config.n_banks

    # Access control

    def attach(self, bank, owner):
        """Register the PIM core allowed to program ``bank``'s range registers."""
        self._check_bank(bank)
        self._owners[bank] = owner

    def access_range(self, bank):
        self._check_bank(bank)
        return self._ranges[bank]

    def set_access_range(self, bank, access_range, caller):
        self._check_bank(bank)
        if caller is None or caller is not self._owners[bank]:
            raise UnauthorizedCaller("Only the PIM core of bank %d may set its access range" % bank)
        self._ranges[bank] = AccessRange(*access_range)
        if self._ranges[bank].enabled:
            logger.info("Bank %d access range armed base=%#x mask=%#x" % (bank, access_range[0], access_range[1]))
        else:
            logger.info("Bank %d access range cleared" % bank)

    def _blocked(self, bank, offset, size):
        offsets = np.arange(offset, offset + size, dtype=np.int64)
        return self._ranges[bank].covered(offsets)

    # Host port

    def host_access(self, op, addr, size=None, payload=None):
        """
        Perform a host READ or WRITE of ``size`` bytes at host address
        ``addr``, split into bursts. Returns ``(data, latency)``; ``data``
        is ``None`` for writes.

        Bytes inside an armed access range read as zeros and are not
        written. Any burst touching such bytes is traced as blocked and
        leaves the row buffer as it was, but costs the same time.
        """
        if op not in (READ, WRITE):
            raise ValueError("Unknown host operation %r" % op)
        if op == WRITE:
            payload = bytes(payload)
            size = len(payload) if size is None else size
            if len(payload) != size:
                raise ValueError("Write of %d bytes carries %d" % (size, len(payload)))
        if not size:
            raise ValueError("Host access of zero bytes")
        self.translate(addr)
        self.translate(addr + size - 1)

        burst = self.config.burst_bytes
        out = bytearray() if op == READ else None
        total = ZERO
        position = 0
        while position < size:
            host_addr = addr + position
            length = min(burst - host_addr % burst, size - position)
            bank, offset = self.translate(host_addr)
            blocked = self._blocked(bank, offset, length)
            hit = bool(blocked.any())
            latency = self._latency(bank, offset, length, commit=not hit)

            if op == READ:
                data = np.frombuffer(self._read(bank, offset, length), dtype=np.uint8).copy()
                data[blocked] = 0
                out += data.tobytes()
            else:
                chunk = payload[position:position + length]
                if hit:
                    current = np.frombuffer(self._read(bank, offset, length), dtype=np.uint8).copy()
                    incoming = np.frombuffer(chunk, dtype=np.uint8)
                    current[~blocked] = incoming[~blocked]
                    chunk = current.tobytes()
                self._write(bank, offset, chunk)

            self.tracer.trace_sink(TraceEvent(self.clock.now, op, host_addr, length, hit))
            self.clock.advance(latency)
            total += latency
            position += length
        return (bytes(out) if out is not None else None), total

    def mmio_access(self, op, bank, register, size):
        """
        Charge and trace one host access to a bank's MMIO register. The
        register file itself lives with the enclave controller.
        """
        address = self.mmio_address(bank, register)
        bursts = ceil_div(size, self.config.burst_bytes)
        latency = self.config.row_miss_ns + bursts * self.config.tBURST_ns
        self.tracer.trace_sink(TraceEvent(self.clock.now, op, address, size, False))
        self.clock.advance(latency)
        return latency

    # PIM side

    def pim_read(self, bank, offset, size):
        self.check_range(bank, offset, size)
        return self._read(bank, offset, size)

    def pim_write(self, bank, offset, data):
        self.check_range(bank, offset, len(data))
        self._write(bank, offset, bytes(data))


class LocalMemory(object):
    """
    The scratch memory inside a PIM core package. It has no cache in
    front of it; every access costs ``latency``.
    """
    def __init__(self, size, latency):
        self.size = size
        self.latency = latency
        self._data = bytearray(size)

    def check(self, offset, size):
        if offset < 0 or size < 0 or offset + size > self.size:
            raise AddressOutOfRange("Local memory has no bytes at [%#x, %#x)" % (offset, offset + size))

    def read(self, offset, size):
        self.check(offset, size)
        return bytes(self._data[offset:offset + size])

    def write(self, offset, data):
        self.check(offset, len(data))
        self._data[offset:offset + len(data)] = data

    def fill(self, offset, size, value=0):
        self.check(offset, size)
        self._data[offset:offset + size] = bytes([value]) * size

    def zeroize(self):
        self._data[:] = bytes(self.size)

    @property
    def zeroized(self):
        return not any(self._data)
