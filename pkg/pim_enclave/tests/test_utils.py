from django.test import SimpleTestCase

from pim_enclave.utils import ceil_div
from pim_enclave.utils import chunks
from pim_enclave.utils import dump_params
from pim_enclave.utils import is_power_of_two
from pim_enclave.utils import load_params
from pim_enclave.utils import next_power_of_two
from pim_enclave.utils import pad
from pim_enclave.utils import round_up


class UtilsTests(SimpleTestCase):
    def test_ceil_div(self):
        """``ceil_div()`` should round up, and leave exact quotients alone."""
        self.assertEqual(ceil_div(281, 32), 9)
        self.assertEqual(ceil_div(256, 32), 8)
        self.assertEqual(ceil_div(0, 32), 0)

    def test_round_up(self):
        """``round_up()`` should return the next multiple."""
        self.assertEqual(round_up(8220, 4096), 12288)
        self.assertEqual(round_up(4096, 4096), 4096)

    def test_powers_of_two(self):
        """Only positive powers of two should be recognised."""
        self.assertTrue(is_power_of_two(1))
        self.assertTrue(is_power_of_two(4096))
        self.assertFalse(is_power_of_two(0))
        self.assertFalse(is_power_of_two(12288))
        self.assertEqual(next_power_of_two(0), 1)
        self.assertEqual(next_power_of_two(4096), 4096)
        self.assertEqual(next_power_of_two(4097), 8192)

    def test_chunks(self):
        """The last chunk may be short."""
        self.assertEqual(chunks(b'abcde', 2), [b'ab', b'cd', b'e'])
        self.assertEqual(chunks(b'', 2), [])

    def test_pad(self):
        """``pad()`` should zero-fill to size and refuse oversized data."""
        self.assertEqual(pad(b'ab', 4), b'ab\x00\x00')
        with self.assertRaises(ValueError):
            pad(b'abcde', 4)

    def test_params(self):
        """
        Parameter records should serialise canonically, whatever the key
        order, and parse back with the frame padding ignored.
        """
        self.assertEqual(dump_params({'k': 4, 'crypto': 1}), b'{"crypto":1,"k":4}')
        self.assertEqual(dump_params({'crypto': 1, 'k': 4}), dump_params({'k': 4, 'crypto': 1}))
        self.assertEqual(load_params(pad(dump_params({'k': 4}), 256)), {'k': 4})
