from django.test import SimpleTestCase

from pim_enclave.config import DEFAULTS
from pim_enclave.config import HOST_COST_TABLE
from pim_enclave.config import KERNEL_COST_TABLE
from pim_enclave.forms import SimConfigForm


def config_form(**overrides):
    data = dict(DEFAULTS)
    data.update(overrides)
    return SimConfigForm(data=data, kernel_costs=KERNEL_COST_TABLE, host_costs=HOST_COST_TABLE)


class SimConfigFormTests(SimpleTestCase):
    def test_defaults_are_valid(self):
        """The default configuration should validate and fill in ``mmio_base``."""
        form = config_form()
        self.assertTrue(form.is_valid())
        self.assertEqual(form.cleaned_data['mmio_base'], DEFAULTS['module_base'] + 8 * DEFAULTS['bank_size_bytes'])

    def test_power_of_two_bank(self):
        """A bank size that is not a power of two should be an error on that field."""
        form = config_form(bank_size_bytes=3 * 1024 * 1024)
        self.assertFalse(form.is_valid())
        self.assertIn('bank_size_bytes', form.errors)

    def test_mmio_overlap(self):
        """MMIO registers inside the bank range should be an error on ``mmio_base``."""
        form = config_form(mmio_base=DEFAULTS['module_base'] + 4096)
        self.assertFalse(form.is_valid())
        self.assertIn('mmio_base', form.errors)

    def test_unknown_cost(self):
        """A cost name that does not exist should be rejected."""
        form = config_form(host_cost_table={'teleport': 1})
        self.assertFalse(form.is_valid())
        self.assertIn('host_cost_table', form.errors)

    def test_boolean_cost_rejected(self):
        """A boolean is not a cycle count."""
        form = config_form(kernel_cost_table={'probe': True})
        self.assertFalse(form.is_valid())

    def test_cost_table_defaults(self):
        """An empty cost table should clean to the full default table."""
        form = config_form(kernel_cost_table={})
        self.assertTrue(form.is_valid())
        self.assertEqual(form.cleaned_data['kernel_cost_table'], KERNEL_COST_TABLE)
