"""
Simulator configuration.

A configuration is assembled from three layers, later layers winning:
``DEFAULTS``, the ``PIM_ENCLAVE_CONFIG`` Django setting and a per-run JSON
document handed to ``load_config()``. The merged result is validated by
``SimConfigForm`` and frozen into a ``SimConfig``.
"""
import json
import logging
import os
from collections.abc import Mapping
from dataclasses import dataclass
from dataclasses import field
from fractions import Fraction

from django.conf import settings

from pim_enclave.clock import SimTime
from pim_enclave.exceptions import ConfigError
from pim_enclave.forms import SimConfigForm


logger = logging.getLogger(__name__)

KiB = 1024
MiB = 1024 * KiB

KERNEL_COST_TABLE = {
    'abi_call': 8,
    'distance_eval': 20,
    'membership_update': 4,
    'accumulate': 16,
    'batch_setup': 100,
    'hash_byte': 4,
    'probe': 10,
    'result_post': 50,
}

HOST_COST_TABLE = {
    'distance_eval': 4,
    'membership_update': 4,
    'aggregate': 4,
}

DEFAULTS = {
    'host_clock_hz': 4000000000,
    'pim_clock_hz': 1000000000,
    'aes_clock_hz': 300000000,
    'aes_blocks_per_cycle': 4,
    'n_banks': 8,
    'bank_size_bytes': 64 * MiB,
    'local_mem_bytes': 4 * MiB,
    'runtime_reserved_bytes': 64 * KiB,
    'local_mem_latency_ns': '0.01',
    'row_buffer_bytes': 256,
    'burst_bytes': 32,
    'tRP_ns': '13.75',
    'tRCD_ns': '13.75',
    'tCL_ns': '13.75',
    'tBURST_ns': '3.2',
    'dma_raw_bandwidth_bytes_per_ns': '3.6',
    'module_base': 0x100000000,
    'mmio_base': None,
    'mmio_stride': 4 * KiB,
    'trace_enabled': True,
    'seed': 0,
    'kernel_cost_table': KERNEL_COST_TABLE,
    'host_cost_table': HOST_COST_TABLE,
}

DURATION_KEYS = ('local_mem_latency_ns', 'tRP_ns', 'tRCD_ns', 'tCL_ns', 'tBURST_ns')


@dataclass(frozen=True)
class SimConfig(object):
    """
    A validated, immutable simulator configuration. Durations are
    ``SimTime`` values and the DMA bandwidth is an exact ``Fraction``.
    """
    host_clock_hz: int
    pim_clock_hz: int
    aes_clock_hz: int
    aes_blocks_per_cycle: int
    n_banks: int
    bank_size_bytes: int
    local_mem_bytes: int
    runtime_reserved_bytes: int
    local_mem_latency_ns: SimTime
    row_buffer_bytes: int
    burst_bytes: int
    tRP_ns: SimTime
    tRCD_ns: SimTime
    tCL_ns: SimTime
    tBURST_ns: SimTime
    dma_raw_bandwidth_bytes_per_ns: Fraction
    module_base: int
    mmio_base: int
    mmio_stride: int
    trace_enabled: bool
    seed: int
    kernel_cost_table: dict = field(default_factory=lambda: dict(KERNEL_COST_TABLE))
    host_cost_table: dict = field(default_factory=lambda: dict(HOST_COST_TABLE))

    @property
    def module_size(self):
        return self.n_banks * self.bank_size_bytes

    @property
    def kernel_capacity(self):
        """Local memory left for a kernel image once the runtime is resident."""
        return self.local_mem_bytes - self.runtime_reserved_bytes

    @property
    def row_miss_ns(self):
        """Precharge, activate and column access of a closed row."""
        return self.tRP_ns + self.tRCD_ns + self.tCL_ns

    def kernel_cost(self, name):
        return self.kernel_cost_table[name]

    def host_cost(self, name):
        return self.host_cost_table[name]


def _parse(source):
    if source is None:
        return {}
    if isinstance(source, Mapping):
        return dict(source)
    if hasattr(source, 'read'):
        source = source.read()
    elif isinstance(source, str) and os.path.isfile(source):
        with open(source) as f:
            source = f.read()
    if isinstance(source, bytes):
        source = source.decode('utf-8')
    if not source.strip():
        return {}
    try:
        document = json.loads(source)
    except ValueError as e:
        raise ConfigError("Config document does not parse: %s" % e)
    if not isinstance(document, dict):
        raise ConfigError("Config document must be a key-value mapping")
    return document


def _check_keys(document, origin):
    for key in document:
        if key not in DEFAULTS:
            raise ConfigError("Unknown config key %s in %s" % (key, origin))


def load_config(source=None):
    """
    Build a validated ``SimConfig``. ``source`` may be ``None``, a
    mapping, a JSON string, a path to a JSON file or an open file.

    Raises ``ConfigError`` naming the offending key when the document
    does not parse, contains an unknown key or violates an invariant.
    """
    document = _parse(source)
    overrides = getattr(settings, 'PIM_ENCLAVE_CONFIG', {})
    _check_keys(overrides, 'PIM_ENCLAVE_CONFIG')
    _check_keys(document, 'config document')

    merged = dict(DEFAULTS)
    merged.update(overrides)
    merged.update(document)
    for key in DURATION_KEYS + ('dma_raw_bandwidth_bytes_per_ns',):
        # Keep decimal text exact; 13.75 and '13.75' mean the same thing.
        if isinstance(merged[key], float):
            merged[key] = repr(merged[key])

    form = SimConfigForm(data=merged, kernel_costs=KERNEL_COST_TABLE,
                         host_costs=HOST_COST_TABLE)
    if not form.is_valid():
        key, errors = next(iter(form.errors.items()))
        raise ConfigError("%s: %s" % (key, errors[0]))

    values = dict(form.cleaned_data)
    for key in DURATION_KEYS:
        values[key] = SimTime(values[key])
    values['dma_raw_bandwidth_bytes_per_ns'] = Fraction(values['dma_raw_bandwidth_bytes_per_ns'])
    config = SimConfig(**values)
    logger.debug("Loaded config with %d banks of %d bytes" % (config.n_banks, config.bank_size_bytes))
    return config
