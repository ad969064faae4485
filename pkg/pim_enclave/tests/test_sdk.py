from mock import patch

from django.test import SimpleTestCase

from pim_enclave import sdk
from pim_enclave.channel import DESTROYED
from pim_enclave.channel import KERNEL_LOADED
from pim_enclave.channel import SESSION_ESTABLISHED
from pim_enclave.dma import DATA
from pim_enclave.dma import BlockLayout
from pim_enclave.exceptions import AllocationOverflow
from pim_enclave.exceptions import AuthenticationFailed
from pim_enclave.exceptions import BankBusy
from pim_enclave.exceptions import KernelTrap
from pim_enclave.exceptions import PhaseViolation
from pim_enclave.exceptions import TokenVerificationError
from pim_enclave.frames import FRAME_SIZE
from pim_enclave.kernels import LOOKUP
from pim_enclave.kernels import TABLE_LAYOUT
from pim_enclave.kernels import build_table
from pim_enclave.memory import STATUS_REGISTER
from pim_enclave.pim import KernelImage

from .factories import KeyFactory
from .factories import SimulatorFactory
from .utils import established


class HandleTests(SimpleTestCase):
    def setUp(self):
        self.sim = SimulatorFactory()

    def test_single_client(self):
        """A bank should serve one host handle at a time."""
        handle = sdk.init(self.sim, 0)
        with self.assertRaises(BankBusy):
            sdk.init(self.sim, 0)
        sdk.release(handle)
        sdk.release(sdk.init(self.sim, 0))

    def test_attest_and_establish(self):
        """
        Attestation should verify the token and leave the host and the
        bank with a shared session.
        """
        handle = sdk.init(self.sim, 1)
        token = sdk.attest_and_establish(handle, self.sim.trusted_ek(1))
        self.assertEqual(token.device_id, 1)
        self.assertEqual(handle.phase, SESSION_ESTABLISHED)
        self.assertEqual(self.sim.bank(1).controller.phase, SESSION_ESTABLISHED)
        self.assertEqual(handle.rx_seq, 1)

    def test_wrong_ek_sends_no_keys(self):
        """
        Trusting the wrong EK should fail verification before any key
        leaves the host.
        """
        handle = sdk.init(self.sim, 0)
        with patch('pim_enclave.sdk.wrap_session_key') as wrap:
            with self.assertRaises(TokenVerificationError):
                sdk.attest_and_establish(handle, self.sim.trusted_ek(1))
            self.assertFalse(wrap.called)
        self.assertIsNone(handle.session_key)
        self.assertIsNone(self.sim.bank(0).controller.state.session_key)

    def test_attest_twice(self):
        """Establishing a session on a handle that has one should be refused."""
        handle = established(self.sim)
        with self.assertRaises(PhaseViolation):
            sdk.attest_and_establish(handle, self.sim.trusted_ek(0))

    def test_commands_need_a_session(self):
        """Commands on a handle without a session should be refused locally."""
        handle = sdk.init(self.sim, 0)
        with self.assertRaises(PhaseViolation):
            sdk.load_kernel(handle, KernelImage('spin'))

    def test_every_control_access_is_a_frame(self):
        """
        Every command written and every response read on the bus should be
        a full-size frame.
        """
        handle = established(self.sim)
        sdk.load_kernel(handle, KernelImage('spin'))
        sdk.offload_and_execute(handle, {'cycles': 10})
        config = self.sim.config
        sizes = set(event.size for event in self.sim.tracer.events
                    if event.address >= config.mmio_base and
                    (event.address - config.mmio_base) % config.mmio_stride != STATUS_REGISTER)
        self.assertEqual(sizes, {FRAME_SIZE})


class AllocationTests(SimpleTestCase):
    def setUp(self):
        self.sim = SimulatorFactory()
        self.handle = established(self.sim)

    def test_alignment(self):
        """
        Plain allocations should be page aligned; protectable ones should be
        a power of two aligned to their size.
        """
        first = sdk.alloc(self.handle, 100)
        second = sdk.alloc(self.handle, 5000, protectable=True)
        self.assertEqual(first.offset, 0)
        self.assertEqual(second.size, 8192)
        self.assertEqual(second.offset, 8192)
        self.assertEqual(sdk.alloc(self.handle, 1).offset, 16384)

    def test_overflow(self):
        """Allocating beyond the bank should fail."""
        with self.assertRaises(AllocationOverflow):
            sdk.alloc(self.handle, self.sim.config.bank_size_bytes + 1)
        with self.assertRaises(AllocationOverflow):
            sdk.alloc(self.handle, 0)

    def test_sub_allocation(self):
        """A sub-allocation must stay inside its parent."""
        parent = sdk.alloc(self.handle, 8192)
        child = sdk.sub_allocation(parent, 4096, 100)
        self.assertEqual(child.offset, parent.offset + 4096)
        with self.assertRaises(AllocationOverflow):
            sdk.sub_allocation(parent, 8000, 500)

    def test_load_data_does_not_fit(self):
        """Data larger than its allocation should not be written at all."""
        allocation = sdk.alloc(self.handle, 4096)
        with self.assertRaises(AllocationOverflow):
            sdk.load_data(self.handle, allocation, bytes(5000), BlockLayout.for_block_size(1024))
        self.assertEqual(self.sim.memory.touched_pages(0), [])


class OffloadTests(SimpleTestCase):
    def setUp(self):
        self.sim = SimulatorFactory()
        self.handle = established(self.sim)
        self.layout = BlockLayout.for_block_size(1024)

    def test_data_is_ciphertext_in_the_bank(self):
        """Loaded data should only ever sit in the bank encrypted."""
        allocation = sdk.alloc(self.handle, 8192, protectable=True)
        sdk.load_data(self.handle, allocation, b'top secret ' * 200, self.layout)
        self.assertNotIn(b'top secret', self.sim.memory.snapshot(0, 0, 8192))
        self.assertEqual(sdk.get_output(self.handle, allocation), b'top secret ' * 200)

    def test_load_kernel(self):
        """Loading a kernel should return its measurement and move to KERNEL_LOADED."""
        image = KernelImage('spin')
        self.assertEqual(sdk.load_kernel(self.handle, image), image.measurement)
        self.assertEqual(self.handle.phase, KERNEL_LOADED)
        self.assertEqual(self.sim.bank(0).controller.state.measurement, image.measurement)

    def test_protect(self):
        """
        A protected allocation should read back as zeros to the host, so
        decrypting it fails until protection is lifted.
        """
        allocation = sdk.alloc(self.handle, 8192, protectable=True)
        sdk.load_data(self.handle, allocation, b'p' * 3000, self.layout)
        sdk.protect(self.handle, allocation)
        with self.assertRaises(AuthenticationFailed):
            sdk.get_output(self.handle, allocation)
        sdk.unprotect(self.handle)
        self.assertEqual(sdk.get_output(self.handle, allocation), b'p' * 3000)

    def test_offload_and_execute(self):
        """Executing a kernel should advance the host to the bank's completion."""
        sdk.load_kernel(self.handle, KernelImage('spin'))
        self.assertEqual(sdk.offload_and_execute(self.handle, {'cycles': 5000}), b'')
        self.assertGreaterEqual(self.sim.host_clock.now, self.sim.bank(0).clock.now)
        self.assertEqual(self.sim.bank(0).core.last_result.compute_cycles, 5000)

    def test_execute_before_kernel(self):
        """EXECUTE before a kernel is loaded should be refused with the local cause."""
        with self.assertRaises(PhaseViolation):
            sdk.offload_and_execute(self.handle, {})

    def test_kernel_trap(self):
        """A kernel that traps should surface as ``KernelTrap`` on the host."""
        sdk.load_kernel(self.handle, KernelImage('kmeans'))
        with self.assertRaises(KernelTrap):
            sdk.offload_and_execute(self.handle, {'k': 2})

    def test_hash_lookup_result(self):
        """A kernel's result frames should be reassembled for the host."""
        table = sdk.alloc(self.handle, TABLE_LAYOUT.wire_size, protectable=True)
        sdk.load_data(self.handle, table, build_table([('plum', 42)]), TABLE_LAYOUT)
        sdk.load_kernel(self.handle, KernelImage('hashtable_search'))
        content = sdk.offload_and_execute(self.handle, {'crypto': 1, 'key': 'plum', 'table': table.offset})
        self.assertEqual(LOOKUP.unpack(content[:LOOKUP.size]), (1, 42))

    def test_destroy(self):
        """Destroying a session should zeroize the keys on both sides."""
        session_key = self.handle.session_key
        data_key = self.handle.data_key
        core = self.sim.bank(0).core
        sdk.destroy(self.handle)
        self.assertEqual(self.handle.phase, DESTROYED)
        self.assertTrue(session_key.zeroized)
        self.assertTrue(data_key.zeroized)
        self.assertTrue(core.local.zeroized)
        self.assertEqual(self.sim.bank(0).controller.phase, DESTROYED)

    def test_shared_data_key(self):
        """A caller-supplied data key should be shared with the bank."""
        sim = SimulatorFactory()
        key = KeyFactory()
        handle = established(sim, 1, data_key=key)
        self.assertEqual(sim.bank(1).engine.key(DATA), key)
        self.assertIs(handle.data_key, key)
