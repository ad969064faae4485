import io

import numpy as np
from django.test import SimpleTestCase

from hypothesis import given
from hypothesis import settings as hypothesis_settings
from hypothesis import strategies as st

from pim_enclave.clock import SimTime
from pim_enclave.exceptions import AddressOutOfRange
from pim_enclave.exceptions import AlignmentError
from pim_enclave.exceptions import UnauthorizedCaller
from pim_enclave.memory import DISABLED
from pim_enclave.memory import READ
from pim_enclave.memory import STATUS_REGISTER
from pim_enclave.memory import TRACE_HEADER
from pim_enclave.memory import WRITE
from pim_enclave.memory import AccessRange
from pim_enclave.memory import LocalMemory
from pim_enclave.memory import MemoryModule
from pim_enclave.memory import TraceEvent
from pim_enclave.memory import Tracer

from .factories import SimulatorFactory
from .factories import SmallSimConfigFactory
from .utils import reference_dram_latency


class AccessRangeTests(SimpleTestCase):
    def test_disabled(self):
        """A zero base and mask should protect nothing."""
        self.assertFalse(DISABLED.enabled)
        self.assertFalse(DISABLED.covers(0))

    def test_exhaustive_twelve_bit(self):
        """
        Over a 12-bit offset space, the vectorised check should agree
        with the scalar rule for every offset, and a mask with ``z``
        clear bits should cover exactly ``2 ** z`` offsets when the base
        has no bits outside the mask.
        """
        offsets = np.arange(4096, dtype=np.int64)
        for mask in (0xFFF, 0xF00, 0xFF0, 0x0F0, 0x800, 0x001, 0xAAA):
            for base in (0x000, 0x100, 0x0A0, 0x800):
                access_range = AccessRange(base & mask, mask)
                covered = access_range.covered(offsets)
                expected = [access_range.enabled and (offset & mask) == (base & mask) for offset in range(4096)]
                self.assertEqual(covered.tolist(), expected)
                if access_range.enabled:
                    zero_bits = 12 - bin(mask).count('1')
                    self.assertEqual(int(covered.sum()), 2 ** zero_bits)

    def test_literal_rule_over_documented_pair(self):
        """
        The base/mask pair ``(0x1000, 0xFFFFF000)`` should protect exactly
        the offsets whose masked bits equal the base.
        """
        access_range = AccessRange(0x1000, 0xFFFFF000)
        self.assertTrue(access_range.covers(0x1000))
        self.assertTrue(access_range.covers(0x1FFF))
        self.assertFalse(access_range.covers(0x2000))
        self.assertFalse(access_range.covers(0x0FFF))

    def test_for_region(self):
        """``for_region()`` should protect exactly an aligned power-of-two region."""
        access_range = AccessRange.for_region(0x4000, 0x2000, 1 << 20)
        self.assertTrue(access_range.covers(0x4000))
        self.assertTrue(access_range.covers(0x5FFF))
        self.assertFalse(access_range.covers(0x3FFF))
        self.assertFalse(access_range.covers(0x6000))

    def test_for_region_invalid(self):
        """Misaligned, odd-sized or whole-bank regions have no encoding."""
        with self.assertRaises(AlignmentError):
            AccessRange.for_region(0x1000, 0x3000, 1 << 20)
        with self.assertRaises(AlignmentError):
            AccessRange.for_region(0x1000, 0x2000, 1 << 20)
        with self.assertRaises(AlignmentError):
            AccessRange.for_region(0, 1 << 20, 1 << 20)


class DramTimingTests(SimpleTestCase):
    def setUp(self):
        self.config = SmallSimConfigFactory()
        self.memory = MemoryModule(self.config)

    def test_row_miss_then_hit(self):
        """
        A burst to a closed row should cost 44.45 ns and a second burst
        in the same row 3.2 ns.
        """
        self.assertEqual(self.memory.dram_latency(0, 0, 32), SimTime('44.45'))
        self.assertEqual(self.memory.dram_latency(0, 32, 32), SimTime('3.2'))
        self.assertEqual(self.memory.open_row(0), 0)

    def test_full_row(self):
        """Streaming a whole closed 256-byte row should cost 66.85 ns."""
        self.assertEqual(self.memory.dram_latency(0, 256, 256), SimTime('66.85'))

    def test_banks_have_their_own_rows(self):
        """Opening a row in one bank should not affect another bank."""
        self.memory.dram_latency(0, 0, 32)
        self.assertEqual(self.memory.dram_latency(1, 0, 32), SimTime('44.45'))
        self.assertEqual(self.memory.dram_latency(0, 64, 32), SimTime('3.2'))

    def test_zero_sized_access(self):
        """An access of no bytes should be rejected."""
        with self.assertRaises(ValueError):
            self.memory.dram_latency(0, 0, 0)

    def test_stream_latency_splits_lead(self):
        """
        ``stream_latency()`` should charge the leading burst separately
        and sum to the same total as a single access.
        """
        lead, rest = self.memory.stream_latency(0, 16, 512)
        self.memory.close_rows()
        self.assertEqual(lead, SimTime('44.45'))
        self.assertEqual(lead + rest, self.memory.dram_latency(0, 16, 512))

    @hypothesis_settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 64 * 1024), st.integers(1, 2048)), min_size=1, max_size=12))
    def test_matches_reference(self, accesses):
        """
        Any sequence of accesses should cost what a burst-by-burst
        walk of the row buffer says it costs.
        """
        memory = MemoryModule(self.config)
        total = sum((memory.dram_latency(0, offset, size) for offset, size in accesses), SimTime(0))
        expected, open_row = reference_dram_latency(self.config, accesses)
        self.assertEqual(total, expected)
        self.assertEqual(memory.open_row(0), open_row)


class MemoryModuleTests(SimpleTestCase):
    def setUp(self):
        self.sim = SimulatorFactory()
        self.config = self.sim.config
        self.memory = self.sim.memory
        self.owner = self.sim.bank(0).core

    def test_translate(self):
        """Host addresses should map to a bank and an offset inside it."""
        base = self.config.module_base
        self.assertEqual(self.memory.translate(base), (0, 0))
        self.assertEqual(self.memory.translate(base + self.config.bank_size_bytes + 5), (1, 5))
        with self.assertRaises(AddressOutOfRange):
            self.memory.translate(base - 1)
        with self.assertRaises(AddressOutOfRange):
            self.memory.translate(base + self.config.module_size)

    def test_host_round_trip_and_timing(self):
        """
        A host write followed by a read should return the data, and each
        burst should be charged and traced.
        """
        address = self.memory.host_address(0, 0)
        _, written = self.memory.host_access(WRITE, address, payload=b'x' * 64)
        data, read = self.memory.host_access(READ, address, 64)
        self.assertEqual(data, b'x' * 64)
        self.assertEqual(written, SimTime('44.45') + SimTime('3.2'))
        self.assertEqual(read, SimTime('3.2') * 2)
        self.assertEqual(len(self.sim.tracer), 4)
        self.assertEqual(self.sim.host_clock.now, written + read)

    def test_set_access_range_requires_owner(self):
        """Only the bank's own PIM core may program its range registers."""
        with self.assertRaises(UnauthorizedCaller):
            self.memory.set_access_range(0, AccessRange(0, 0xFFF000), caller=None)
        with self.assertRaises(UnauthorizedCaller):
            self.memory.set_access_range(0, AccessRange(0, 0xFFF000), caller=self.sim.bank(1).core)

    def test_protected_bytes_are_hidden(self):
        """
        Inside an armed range, host reads should see zeros and host
        writes should be dropped, while the PIM side still sees the data.
        """
        self.memory.pim_write(0, 0x1000, b'secret!!' * 4)
        self.memory.set_access_range(0, AccessRange.for_region(0x1000, 0x1000, self.config.bank_size_bytes),
                                     caller=self.owner)
        address = self.memory.host_address(0, 0x1000)
        data, _ = self.memory.host_access(READ, address, 32)
        self.assertEqual(data, bytes(32))
        self.memory.host_access(WRITE, address, payload=b'z' * 32)
        self.assertEqual(self.memory.pim_read(0, 0x1000, 32), b'secret!!' * 4)
        self.assertTrue(all(event.blocked for event in self.sim.tracer.events))

    def test_partially_blocked_burst(self):
        """
        A burst only partly inside the range should return real bytes
        outside it and zeros inside it, and be traced as blocked.
        """
        self.memory.pim_write(0, 0x1000, b'a' * 32)
        self.memory.set_access_range(0, AccessRange.for_region(0x1010, 0x10, self.config.bank_size_bytes),
                                     caller=self.owner)
        data, _ = self.memory.host_access(READ, self.memory.host_address(0, 0x1000), 32)
        self.assertEqual(data, b'a' * 16 + bytes(16))
        self.assertTrue(self.sim.tracer.events[-1].blocked)

    def test_blocked_access_costs_the_same(self):
        """A blocked access should take the same time as an allowed one."""
        address = self.memory.host_address(0, 0x2000)
        _, allowed = self.memory.host_access(READ, address, 32)
        self.memory.close_rows()
        self.memory.set_access_range(0, AccessRange.for_region(0x2000, 0x1000, self.config.bank_size_bytes),
                                     caller=self.owner)
        _, blocked = self.memory.host_access(READ, address, 32)
        self.assertEqual(allowed, blocked)

    def test_disabled_range_allows_everything(self):
        """Clearing both registers should lift protection."""
        self.memory.set_access_range(0, AccessRange.for_region(0, 0x1000, self.config.bank_size_bytes),
                                     caller=self.owner)
        self.memory.set_access_range(0, DISABLED, caller=self.owner)
        address = self.memory.host_address(0, 0)
        self.memory.host_access(WRITE, address, payload=b'open')
        self.assertEqual(self.memory.host_access(READ, address, 4)[0], b'open')

    def test_random_register_pairs(self):
        """
        For random base/mask pairs over a 4 KiB window, host reads should
        hide exactly the offsets the rule covers, blocked writes should
        leave them untouched and a burst should be traced as blocked
        exactly when it touches a covered offset.
        """
        rng = np.random.default_rng(12)
        size = 4096
        offsets = np.arange(size)
        address = self.memory.host_address(0, 0)
        for index in range(50):
            mask = int(rng.integers(0, size))
            base = int(rng.integers(0, size)) & mask if index % 5 else int(rng.integers(0, size))
            covered = (offsets & mask) == base if base or mask else np.zeros(size, dtype=bool)
            before = rng.bytes(size)
            after = rng.bytes(size)
            with self.subTest(base=base, mask=mask):
                self.owner.set_access_range(DISABLED)
                self.memory.host_access(WRITE, address, payload=before)
                self.owner.set_access_range(AccessRange(base, mask))

                mark = self.sim.tracer.mark()
                data, _ = self.memory.host_access(READ, address, size)
                expected = np.frombuffer(before, dtype=np.uint8).copy()
                expected[covered] = 0
                self.assertEqual(data, expected.tobytes())
                for event in self.sim.tracer.since(mark):
                    start = event.address - address
                    self.assertEqual(event.blocked, bool(covered[start:start + event.size].any()))

                self.memory.host_access(WRITE, address, payload=after)
                self.owner.set_access_range(DISABLED)
                written = np.where(covered, np.frombuffer(before, dtype=np.uint8),
                                   np.frombuffer(after, dtype=np.uint8))
                self.assertEqual(self.memory.snapshot(0, 0, size), written.tobytes())

    def test_mmio_access(self):
        """
        A frame-sized register access should cost a row miss plus one
        burst per 32 bytes and be traced at the register address.
        """
        latency = self.memory.mmio_access(READ, 1, STATUS_REGISTER, 281)
        self.assertEqual(latency, SimTime('41.25') + SimTime('3.2') * 9)
        event = self.sim.tracer.events[-1]
        self.assertEqual(event.address, self.config.mmio_base + self.config.mmio_stride + STATUS_REGISTER)
        self.assertEqual(event.size, 281)

    def test_snapshot_is_free(self):
        """Pulling raw bank contents should cost no time and leave no trace."""
        self.memory.pim_write(1, 100, b'raw')
        self.assertEqual(self.memory.snapshot(1, 100, 3), b'raw')
        self.assertEqual(len(self.sim.tracer), 0)
        self.assertEqual(self.memory.touched_pages(1), [0])


class TracerTests(SimpleTestCase):
    def test_out_of_order(self):
        """Events must be appended in timestamp order."""
        tracer = Tracer()
        tracer.trace_sink(TraceEvent(SimTime(5), READ, 0, 32, False))
        with self.assertRaises(ValueError):
            tracer.trace_sink(TraceEvent(SimTime(4), READ, 0, 32, False))

    def test_disabled(self):
        """A disabled tracer should record nothing."""
        tracer = Tracer(enabled=False)
        tracer.trace_sink(TraceEvent(SimTime(5), READ, 0, 32, False))
        self.assertEqual(len(tracer), 0)

    def test_write_csv(self):
        """
        The CSV dump should carry the header, nanosecond timestamps with
        three decimals and hexadecimal addresses.
        """
        tracer = Tracer()
        tracer.trace_sink(TraceEvent(SimTime('44.45'), WRITE, 0x100000020, 32, True))
        f = io.StringIO()
        tracer.write_csv(f)
        lines = f.getvalue().splitlines()
        self.assertEqual(lines[0], ','.join(TRACE_HEADER))
        self.assertEqual(lines[1], '44.450,WRITE,0000000100000020,32,true')

    def test_mark_and_since(self):
        """``since()`` should return the events recorded after a mark."""
        tracer = Tracer()
        tracer.trace_sink(TraceEvent(SimTime(1), READ, 0, 32, False))
        mark = tracer.mark()
        tracer.trace_sink(TraceEvent(SimTime(2), READ, 32, 32, False))
        self.assertEqual([event.address for event in tracer.since(mark)], [32])


class LocalMemoryTests(SimpleTestCase):
    def test_bounds(self):
        """Accesses outside local memory should raise ``AddressOutOfRange``."""
        local = LocalMemory(64, SimTime('0.01'))
        with self.assertRaises(AddressOutOfRange):
            local.read(60, 8)
        with self.assertRaises(AddressOutOfRange):
            local.write(-1, b'x')

    def test_zeroize(self):
        """``zeroize()`` should clear every byte."""
        local = LocalMemory(64, SimTime('0.01'))
        local.write(10, b'key material')
        self.assertFalse(local.zeroized)
        local.zeroize()
        self.assertTrue(local.zeroized)
