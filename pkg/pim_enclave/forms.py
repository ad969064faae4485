import logging

from django import forms
from django.utils.translation import gettext_lazy as _

from pim_enclave.utils import is_power_of_two


logger = logging.getLogger(__name__)


class CostTableField(forms.Field):
    """
    A mapping of cost names to non-negative integer cycle counts.
    Only the names present in ``defaults`` are accepted; missing names
    take their default value.
    """
    default_error_messages = {
        'invalid': _("Enter a mapping of cost names to cycle counts"),
        'unknown': _("Unknown cost %(name)s"),
        'negative': _("Cost %(name)s must be a non-negative integer"),
    }

    def __init__(self, defaults, *args, **kwargs):
        self.defaults = dict(defaults)
        kwargs.setdefault('required', False)
        super(CostTableField, self).__init__(*args, **kwargs)

    def to_python(self, value):
        if value in self.empty_values:
            return dict(self.defaults)
        if not isinstance(value, dict):
            raise forms.ValidationError(self.error_messages['invalid'], code='invalid')
        table = dict(self.defaults)
        for name, cycles in value.items():
            if name not in self.defaults:
                raise forms.ValidationError(self.error_messages['unknown'],
                                            code='unknown', params={'name': name})
            if isinstance(cycles, bool) or not isinstance(cycles, int) or cycles < 0:
                raise forms.ValidationError(self.error_messages['negative'],
                                            code='negative', params={'name': name})
            table[name] = cycles
        return table


class SimConfigForm(forms.Form):
    """
    Validates a fully merged configuration document. Every invariant of
    the simulated system is checked here so the rest of the simulator
    can trust its ``SimConfig``.
    """
    host_clock_hz = forms.IntegerField(min_value=1)
    pim_clock_hz = forms.IntegerField(min_value=1)
    aes_clock_hz = forms.IntegerField(min_value=1)
    aes_blocks_per_cycle = forms.IntegerField(min_value=1)
    n_banks = forms.IntegerField(min_value=1)
    bank_size_bytes = forms.IntegerField(min_value=1)
    local_mem_bytes = forms.IntegerField(min_value=1)
    runtime_reserved_bytes = forms.IntegerField(min_value=0)
    local_mem_latency_ns = forms.DecimalField()
    row_buffer_bytes = forms.IntegerField(min_value=1)
    burst_bytes = forms.IntegerField(min_value=1)
    tRP_ns = forms.DecimalField()
    tRCD_ns = forms.DecimalField()
    tCL_ns = forms.DecimalField()
    tBURST_ns = forms.DecimalField()
    dma_raw_bandwidth_bytes_per_ns = forms.DecimalField()
    module_base = forms.IntegerField(min_value=0)
    mmio_base = forms.IntegerField(min_value=0, required=False)
    mmio_stride = forms.IntegerField(min_value=4096)
    trace_enabled = forms.BooleanField(required=False)
    seed = forms.IntegerField(min_value=0)

    def __init__(self, *args, **kwargs):
        kernel_costs = kwargs.pop('kernel_costs')
        host_costs = kwargs.pop('host_costs')
        super(SimConfigForm, self).__init__(*args, **kwargs)
        self.fields['kernel_cost_table'] = CostTableField(kernel_costs)
        self.fields['host_cost_table'] = CostTableField(host_costs)

    def _clean_positive(self, name):
        value = self.cleaned_data.get(name)
        if value is not None and value <= 0:
            raise forms.ValidationError(_("Must be strictly positive"))
        return value

    def clean_local_mem_latency_ns(self):
        return self._clean_positive('local_mem_latency_ns')

    def clean_tRP_ns(self):
        return self._clean_positive('tRP_ns')

    def clean_tRCD_ns(self):
        return self._clean_positive('tRCD_ns')

    def clean_tCL_ns(self):
        return self._clean_positive('tCL_ns')

    def clean_tBURST_ns(self):
        return self._clean_positive('tBURST_ns')

    def clean_dma_raw_bandwidth_bytes_per_ns(self):
        return self._clean_positive('dma_raw_bandwidth_bytes_per_ns')

    def clean_bank_size_bytes(self):
        value = self.cleaned_data.get('bank_size_bytes')
        if not is_power_of_two(value):
            raise forms.ValidationError(_("Bank size must be a power of two"))
        return value

    def clean_mmio_stride(self):
        value = self.cleaned_data.get('mmio_stride')
        if not is_power_of_two(value):
            raise forms.ValidationError(_("MMIO stride must be a power of two"))
        return value

    def clean(self):
        """
        Check the invariants that span more than one key. Errors are
        attached to the key most likely at fault so the caller can
        report it.
        """
        cleaned_data = super(SimConfigForm, self).clean()
        bank_size = cleaned_data.get('bank_size_bytes')
        local_mem = cleaned_data.get('local_mem_bytes')
        reserved = cleaned_data.get('runtime_reserved_bytes')
        row_buffer = cleaned_data.get('row_buffer_bytes')
        burst = cleaned_data.get('burst_bytes')
        n_banks = cleaned_data.get('n_banks')
        module_base = cleaned_data.get('module_base')

        if bank_size and local_mem and local_mem >= bank_size:
            self.add_error('local_mem_bytes', _("Local memory must be smaller than a bank"))
        if local_mem and reserved is not None and reserved >= local_mem:
            self.add_error('runtime_reserved_bytes',
                           _("The runtime reservation must leave local memory for kernels"))
        if row_buffer and burst and row_buffer % burst:
            self.add_error('row_buffer_bytes', _("Row buffer must hold a whole number of bursts"))
        if bank_size and row_buffer and bank_size % row_buffer:
            self.add_error('row_buffer_bytes', _("Bank size must hold a whole number of rows"))

        if None not in (bank_size, n_banks, module_base):
            module_end = module_base + n_banks * bank_size
            mmio_base = cleaned_data.get('mmio_base')
            stride = cleaned_data.get('mmio_stride')
            if mmio_base is None:
                cleaned_data['mmio_base'] = module_end
            elif stride and mmio_base < module_end and mmio_base + n_banks * stride > module_base:
                self.add_error('mmio_base', _("MMIO registers overlap the bank address range"))
        return cleaned_data
