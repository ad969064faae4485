"""
The experiments: secure k-means across banks, the hash-table lookup
side-channel demonstration and the AES-DMA microbenchmark, with their
report records and CSV writers.
"""
import csv
import logging
from collections import namedtuple
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from pim_enclave import sdk
from pim_enclave.clock import NS_PER_SECOND
from pim_enclave.clock import SimTime
from pim_enclave.clock import ZERO
from pim_enclave.crypto import SymmetricKey
from pim_enclave.dataset import PreprocessedDataset
from pim_enclave.dma import BANK_READ
from pim_enclave.dma import BANK_WRITE
from pim_enclave.dma import DATA
from pim_enclave.dma import DECRYPT
from pim_enclave.dma import ENCRYPT
from pim_enclave.dma import PLAIN
from pim_enclave.dma import BlockLayout
from pim_enclave.dma import DmaRequest
from pim_enclave.dma import encode_blocks
from pim_enclave.exceptions import ConfigError
from pim_enclave.exceptions import SimulationError
from pim_enclave.frames import PAYLOAD_SIZE
from pim_enclave.kernels import DIMS
from pim_enclave.kernels import EMPTY
from pim_enclave.kernels import LOOKUP
from pim_enclave.kernels import MEMBERSHIP_BLOCK
from pim_enclave.kernels import MEMBERSHIP_LAYOUT
from pim_enclave.kernels import OBJECT_SIZE
from pim_enclave.kernels import OBJECTS_PER_BLOCK
from pim_enclave.kernels import SLOT_SIZE
from pim_enclave.kernels import TABLE_LAYOUT
from pim_enclave.kernels import build_table
from pim_enclave.kernels import key_bytes
from pim_enclave.kernels import nearest
from pim_enclave.kernels import pack_memberships
from pim_enclave.kernels import partials_size
from pim_enclave.kernels import probe_sequence
from pim_enclave.kernels import unpack_memberships
from pim_enclave.kernels import unpack_partials
from pim_enclave.memory import READ
from pim_enclave.memory import WRITE
from pim_enclave.memory import MemoryModule
from pim_enclave.memory import Tracer
from pim_enclave.pim import KernelImage
from pim_enclave.utils import ceil_div
from pim_enclave.utils import dump_params
from pim_enclave.utils import round_up


logger = logging.getLogger(__name__)

HOST_ONLY = 'host'
PIM_ASSISTED = 'pim'

SEQ = 'seq'
RAND = 'rand'

PLAIN_MODE = 'plain'
AEAD_MODE = 'aead'

BENCH_SIZES = (1024, 4096, 8192, 65536)
BENCH_SLOTS = 64

BENCH_HEADER = ['scenario', 'block_size', 'crypto', 'mean_latency_ns', 'throughput_Bps']
KMEANS_HEADER = ['scenario', 'banks', 'k', 'objects', 'rounds', 'crypto', 'total_ns',
                 'pim_compute_ns', 'aes_ns', 'overhead_pct']

DICTIONARY = (
    'apple', 'apricot', 'avocado', 'banana', 'bilberry', 'blackberry', 'blueberry', 'boysenberry',
    'cantaloupe', 'cherry', 'clementine', 'cloudberry', 'coconut', 'cranberry', 'currant', 'damson',
    'date', 'dragonfruit', 'durian', 'elderberry', 'feijoa', 'fig', 'gooseberry', 'grape',
    'grapefruit', 'guava', 'honeydew', 'huckleberry', 'jackfruit', 'jambul', 'jujube', 'kiwano',
    'kiwifruit', 'kumquat', 'lemon', 'lime', 'loganberry', 'longan', 'loquat', 'lychee',
    'mandarin', 'mango', 'mangosteen', 'marionberry', 'melon', 'mulberry', 'nectarine', 'olive',
    'orange', 'papaya', 'passionfruit', 'peach', 'pear', 'persimmon', 'pineapple', 'plantain',
    'plum', 'pomegranate', 'pomelo', 'quince', 'raspberry', 'redcurrant', 'salak', 'satsuma',
    'soursop', 'strawberry', 'tamarillo', 'tamarind', 'tangerine', 'watermelon', 'yuzu',
)


# k-means

@dataclass(frozen=True)
class KMeansParams(object):
    """
    One k-means job. Initial centroids are the first ``k`` objects and
    every membership starts unassigned.
    """
    k: int
    rounds: int = 20
    early_stop: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k: must be at least 1, not %d" % self.k)
        if self.rounds < 1:
            raise ConfigError("rounds: must be at least 1, not %d" % self.rounds)

    dims = DIMS
    objects_per_block = OBJECTS_PER_BLOCK


class KMeansReport(namedtuple('KMeansReport', [
        'centroids', 'memberships', 'deltas', 'banks', 'crypto', 'total_time', 'setup_time',
        'pim_compute_time', 'aes_time', 'inflation_time', 'aggregate_time'])):
    __slots__ = ()

    @property
    def rounds(self):
        return len(self.deltas)

    @property
    def crypto_time(self):
        """Time on the critical path spent on AES and on moving IVs and tags."""
        return self.aes_time + self.inflation_time

    @property
    def predicted_overhead(self):
        """Encrypted over plain run time minus one, predicted from the crypto share."""
        plain = self.total_time - self.crypto_time
        if not plain:
            return Fraction(0)
        return self.crypto_time / plain


def _check_objects(objects, params):
    objects = np.asarray(objects, dtype=np.int64)
    if objects.ndim != 2 or objects.shape[1] != DIMS:
        raise ConfigError("objects: expected rows of %d coordinates" % DIMS)
    if len(objects) < params.k:
        raise ConfigError("k: %d clusters need at least as many objects, got %d" % (params.k, len(objects)))
    return objects


def update_centroids(centroids, counts, sums):
    """
    New centroids as the floor of sum over count. A cluster that lost
    all its members keeps its previous centroid.
    """
    updated = np.array(centroids, dtype=np.int64)
    live = counts > 0
    updated[live] = np.floor_divide(sums[live], counts[live][:, None])
    return updated


def kmeans_oracle(objects, params):
    """
    Single-process k-means in the same fixed-point arithmetic as the
    kernel. Returns ``(centroids, memberships, deltas)``.
    """
    objects = _check_objects(objects, params)
    centroids = objects[:params.k].copy()
    memberships = np.full(len(objects), -1, dtype=np.int64)
    deltas = []
    for _ in range(params.rounds):
        assigned = nearest(objects, centroids)
        delta = int((assigned != memberships).sum())
        counts = np.bincount(assigned, minlength=params.k)
        sums = np.zeros((params.k, DIMS), dtype=np.int64)
        np.add.at(sums, assigned, objects)
        memberships = assigned
        centroids = update_centroids(centroids, counts, sums)
        deltas.append(delta)
        if params.early_stop and delta == 0:
            break
    return centroids, memberships, deltas


def params_frames(config, k):
    """
    The number of parameter frames a k-means job with ``k`` clusters
    always uses, sized for the longest record it could send.
    """
    worst = {
        'blocks': config.bank_size_bytes,
        'centroids': [-2 ** 31] * (k * DIMS),
        'crypto': 1,
        'k': k,
        'memberships': config.bank_size_bytes,
        'objects': config.bank_size_bytes,
        'unlock': 1,
    }
    return ceil_div(len(dump_params(worst)), PAYLOAD_SIZE)


class _BankJob(object):
    """The blocks one bank holds and where they sit."""
    def __init__(self, handle, blocks):
        self.handle = handle
        self.blocks = blocks
        self.region = None
        self.objects = None
        self.memberships = None

    @property
    def core(self):
        return self.handle.sim.bank(self.handle.bank_id).core


def _place(job, object_blocks, membership_blocks, object_layout, membership_layout):
    handle = job.handle
    objects_size = len(job.blocks) * object_layout.wire_size
    members_offset = round_up(objects_size, sdk.ALLOC_ALIGNMENT)
    members_size = len(job.blocks) * membership_layout.wire_size
    job.region = sdk.alloc(handle, members_offset + members_size, protectable=True)
    job.objects = sdk.sub_allocation(job.region, 0, objects_size)
    job.memberships = sdk.sub_allocation(job.region, members_offset, members_size)
    sdk.load_blocks(handle, job.objects, [object_blocks[i] for i in job.blocks], object_layout)
    sdk.load_blocks(handle, job.memberships, [membership_blocks[i] for i in job.blocks], membership_layout,
                    length=len(job.blocks) * MEMBERSHIP_BLOCK)


def kmeans_host_driver(sim, objects, params, n_banks_used=1, crypto=True, dataset=None, data_key=None):
    """
    Run ``params.rounds`` rounds of k-means over ``objects`` on the
    first ``n_banks_used`` banks of ``sim``.

    The host attests every bank, places the object and membership blocks
    round-robin, then per round arms each bank's range, sends the
    centroids and EXECUTE to all banks, waits for all of them and
    aggregates the partial sums into new global centroids. ``dataset``
    supplies already encoded object blocks, with their ``data_key``.

    Returns a ``KMeansReport``; ``total_time`` covers the rounds only.
    """
    objects = _check_objects(objects, params)
    config = sim.config
    if dataset is None:
        if crypto and data_key is None:
            data_key = SymmetricKey.generate()
        dataset = PreprocessedDataset.encode(objects, data_key if crypto else None, crypto)
    crypto = dataset.layout.encrypted
    object_layout = dataset.layout
    membership_layout = MEMBERSHIP_LAYOUT if crypto else MEMBERSHIP_LAYOUT.plain()
    n_blocks = len(dataset.blocks)
    block_counts = [min(OBJECTS_PER_BLOCK, len(objects) - i * OBJECTS_PER_BLOCK) for i in range(n_blocks)]
    membership_blocks = encode_blocks(
        b''.join(pack_memberships([-1] * count) for count in block_counts), membership_layout,
        data_key if crypto else None)

    n_banks = min(n_banks_used, n_blocks)
    if n_banks < 1:
        raise ConfigError("banks: at least one bank is needed")
    frames = params_frames(config, params.k)
    image = KernelImage('kmeans')

    setup_start = sim.host_clock.now
    jobs = []
    try:
        for bank in range(n_banks):
            handle = sdk.init(sim, bank)
            jobs.append(_BankJob(handle, list(range(bank, n_blocks, n_banks))))
            sdk.attest_and_establish(handle, sim.trusted_ek(bank),
                                     data_key=SymmetricKey(data_key.material) if crypto else None)
            _place(jobs[-1], dataset.blocks, membership_blocks, object_layout, membership_layout)
            sdk.load_kernel(handle, image)
        setup_time = sim.host_clock.now - setup_start

        start = sim.host_clock.now
        centroids = objects[:params.k].copy()
        deltas = []
        pim_compute = aes = inflation = aggregate = ZERO
        aggregate_cycles = config.host_cost('aggregate') * n_banks * params.k * DIMS
        for _ in range(params.rounds):
            record = {
                'k': params.k,
                'centroids': [int(value) for value in centroids.ravel()],
                'crypto': int(crypto),
                'unlock': 1,
            }
            for job in jobs:
                sdk.protect(job.handle, job.region)
                sdk.offload_and_execute(job.handle, dict(
                    record, blocks=len(job.blocks), objects=job.objects.offset,
                    memberships=job.memberships.offset), frames=frames, wait=False)
            partials = [sdk.wait_for(job.handle)[:partials_size(params.k)] for job in jobs]

            results = [job.core.last_result for job in jobs]
            slowest = max(results, key=lambda result: result.finished)
            pim_compute += SimTime.from_cycles(max(result.compute_cycles for result in results),
                                               config.pim_clock_hz)
            aes += slowest.aes_time
            inflation += slowest.inflation_time

            delta = 0
            counts = np.zeros(params.k, dtype=np.int64)
            sums = np.zeros((params.k, DIMS), dtype=np.int64)
            for content in partials:
                bank_delta, bank_counts, bank_sums = unpack_partials(content, params.k)
                delta += bank_delta
                counts += bank_counts
                sums += bank_sums
            spent = SimTime.from_cycles(aggregate_cycles, config.host_clock_hz)
            sim.host_clock.advance(spent)
            aggregate += spent
            centroids = update_centroids(centroids, counts, sums)
            deltas.append(delta)
            logger.debug("k-means round %d delta %d" % (len(deltas), delta))
            if params.early_stop and delta == 0:
                break
        total_time = sim.host_clock.now - start

        memberships = np.zeros(len(objects), dtype=np.int64)
        for job in jobs:
            content = sdk.get_output(job.handle, job.memberships)
            for position, block in enumerate(job.blocks):
                piece = content[position * MEMBERSHIP_BLOCK:(position + 1) * MEMBERSHIP_BLOCK]
                first = block * OBJECTS_PER_BLOCK
                memberships[first:first + block_counts[block]] = unpack_memberships(piece, block_counts[block])
    finally:
        for job in jobs:
            try:
                sdk.destroy(job.handle)
            except SimulationError as e:
                logger.warning("%s %s" % (e.code, e))
            sdk.release(job.handle)

    return KMeansReport(centroids, memberships, deltas, n_banks, crypto, total_time, setup_time,
                        pim_compute, aes, inflation, aggregate)


def kmeans_host_baseline(config, objects, params):
    """
    The host enclave running k-means itself on plaintext in uncached
    host memory: every round streams the objects and memberships from
    DRAM and pays host cycles for every distance and aggregation.
    """
    objects = _check_objects(objects, params)
    memory = MemoryModule(config, tracer=Tracer(False))
    n = len(objects)
    objects_size = n * OBJECT_SIZE
    members_offset = round_up(objects_size, sdk.ALLOC_ALIGNMENT)
    cycles = (n * (params.k * config.host_cost('distance_eval') + config.host_cost('membership_update')) +
              params.k * DIMS * config.host_cost('aggregate'))
    compute = SimTime.from_cycles(cycles, config.host_clock_hz)

    centroids, memberships, deltas = kmeans_oracle(objects, params)
    total = ZERO
    for _ in deltas:
        total += memory.dram_latency(0, 0, objects_size)
        total += memory.dram_latency(0, members_offset, n * 4)
        total += memory.dram_latency(0, members_offset, n * 4)
        total += compute
    return KMeansReport(centroids, memberships, deltas, 0, False, total, ZERO, ZERO, ZERO, ZERO, ZERO)


def crossover_banks(sim_factory, objects, params, max_banks=None):
    """
    The smallest bank count at which the encrypted PIM run beats the
    host-only baseline, or ``None``. ``sim_factory`` builds a fresh
    simulator per run.
    """
    sim = sim_factory()
    host = kmeans_host_baseline(sim.config, objects, params)
    for banks in range(1, (max_banks or sim.config.n_banks) + 1):
        report = kmeans_host_driver(sim_factory(), objects, params, n_banks_used=banks)
        if report.total_time < host.total_time:
            return banks
    return None


def fit_line(xs, ys):
    """Least-squares line through ``(xs, ys)``. Returns ``(slope, intercept, max relative residual)``."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(xs, ys, 1)
    residuals = np.abs(ys - (slope * xs + intercept)) / np.abs(ys)
    return float(slope), float(intercept), float(residuals.max())


def project_times(sizes, times, targets):
    """Extrapolate measured run times to larger dataset sizes along a fitted line."""
    slope, intercept, _ = fit_line(sizes, times)
    return [slope * target + intercept for target in targets]


# Hash table side channel

def default_items():
    return [(word, index) for index, word in enumerate(DICTIONARY)]


class HostTable(object):
    """A plaintext table the host probes itself, slot by slot, uncached."""
    def __init__(self, sim, items, bank=0, offset=0):
        self.sim = sim
        self.address = sim.memory.host_address(bank, offset)
        content = build_table(items)
        self.size = len(content)
        sim.memory.host_access(WRITE, self.address, self.size, content)

    def _slot(self, index):
        data, _ = self.sim.memory.host_access(READ, self.address + index * SLOT_SIZE, SLOT_SIZE)
        return data

    def lookup(self, key):
        for _, stored, value in probe_sequence(self._slot, key):
            if value != EMPTY and stored == key_bytes(key):
                return True, value
        return False, -1

    def close(self):
        """Scrub the table image from host memory."""
        self.sim.memory.host_access(WRITE, self.address, self.size, bytes(self.size))


class PimTable(object):
    """An encrypted, protected table searched by the bank's own kernel."""
    def __init__(self, sim, items, bank=0):
        self.handle = sdk.init(sim, bank)
        try:
            sdk.attest_and_establish(self.handle, sim.trusted_ek(bank))
            self.table = sdk.alloc(self.handle, TABLE_LAYOUT.wire_size, protectable=True)
            sdk.load_data(self.handle, self.table, build_table(items), TABLE_LAYOUT)
            sdk.load_kernel(self.handle, KernelImage('hashtable_search'))
            sdk.protect(self.handle, self.table)
        except SimulationError:
            sdk.release(self.handle)
            raise

    def lookup(self, key):
        content = sdk.offload_and_execute(self.handle, {'crypto': 1, 'key': key, 'table': self.table.offset})
        found, value = LOOKUP.unpack(content[:LOOKUP.size])
        return bool(found), value

    def close(self):
        sdk.destroy(self.handle)
        sdk.release(self.handle)


TraceSegment = namedtuple('TraceSegment', 'query found value events')


def trace_experiment(sim, mode, queries, items=None):
    """
    Populate a hash table and look up each query, returning one
    ``TraceSegment`` per query with the bus events it caused.
    """
    if mode not in (HOST_ONLY, PIM_ASSISTED):
        raise ConfigError("mode: expected %s or %s, not %s" % (HOST_ONLY, PIM_ASSISTED, mode))
    items = default_items() if items is None else items
    table = HostTable(sim, items) if mode == HOST_ONLY else PimTable(sim, items)
    segments = []
    try:
        for query in queries:
            mark = sim.tracer.mark()
            found, value = table.lookup(query)
            segments.append(TraceSegment(query, found, value, sim.tracer.since(mark)))
    finally:
        table.close()
    return segments


# DMA microbenchmark

class BenchRecord(namedtuple('BenchRecord', 'scenario block_size crypto iterations total_time')):
    __slots__ = ()

    @property
    def mean_latency(self):
        return self.total_time / self.iterations

    @property
    def throughput(self):
        """Payload bytes per second, exact."""
        return Fraction(self.block_size * self.iterations) * NS_PER_SECOND / self.total_time.exact

    def as_row(self):
        return [self.scenario, self.block_size, self.crypto, self.mean_latency.format_ns(),
                round(self.throughput)]


def _bench_size(sim, pattern, op, size, crypto, iterations, rng, key):
    config = sim.config
    core = sim.bank(0).core
    engine = core.engine
    layout = BlockLayout.for_block_size(size, encrypted=crypto)
    stride = round_up(layout.wire_size, config.row_buffer_bytes)
    n_slots = min(BENCH_SLOTS, config.bank_size_bytes // stride)
    local = config.runtime_reserved_bytes

    if op == READ:
        for slot in range(n_slots):
            block = encode_blocks(rng.bytes(size), layout, key)[0]
            sim.memory.pim_write(0, slot * stride, block.to_bytes())
    else:
        core.local.write(local, rng.bytes(size))

    if pattern == SEQ:
        slots = np.arange(iterations) % n_slots
    else:
        slots = rng.integers(0, n_slots, size=iterations)

    sim.memory.close_rows()
    total = ZERO
    for slot in slots:
        offset = int(slot) * stride
        if op == READ:
            req = DmaRequest(offset, local, layout.wire_size, BANK_READ, DECRYPT if crypto else PLAIN, DATA)
        else:
            req = DmaRequest(local, offset, size, BANK_WRITE, ENCRYPT if crypto else PLAIN, DATA)
        total += engine.dma_transfer(req)
    scenario = '%s-%s' % (pattern, op.lower())
    return BenchRecord(scenario, size, AEAD_MODE if crypto else PLAIN_MODE, iterations, total)


def dma_bench(sim, pattern, op, sizes=BENCH_SIZES, crypto=False, iterations=1000, seed=None):
    """
    Time ``iterations`` DMA transfers of each size in ``sizes`` on bank
    0. Requests land on row-aligned slots, in order for ``SEQ`` and
    drawn from a generator seeded with ``seed`` (default: the config
    seed) for ``RAND``.
    """
    if pattern not in (SEQ, RAND):
        raise ConfigError("pattern: expected %s or %s, not %s" % (SEQ, RAND, pattern))
    if op not in (READ, WRITE):
        raise ConfigError("op: expected %s or %s, not %s" % (READ, WRITE, op))
    rng = np.random.default_rng(sim.config.seed if seed is None else seed)
    key = SymmetricKey(rng.bytes(16))
    core = sim.bank(0).core
    core.program_key(DATA, key)
    return [_bench_size(sim, pattern, op, size, crypto, iterations, rng, key) for size in sizes]


def bench_sweep(sim, sizes=BENCH_SIZES, iterations=1000, seed=None):
    """Every pattern, operation and crypto mode over ``sizes``."""
    records = []
    for pattern in (SEQ, RAND):
        for op in (READ, WRITE):
            for crypto in (False, True):
                records += dma_bench(sim, pattern, op, sizes, crypto, iterations, seed)
    return records


def mean_overhead(records):
    """
    Mean relative increase of encrypted over plain latency across every
    scenario and size present in both modes.
    """
    plain = dict(((r.scenario, r.block_size), r) for r in records if r.crypto == PLAIN_MODE)
    increases = [r.mean_latency / plain[(r.scenario, r.block_size)].mean_latency - 1
                 for r in records if r.crypto == AEAD_MODE and (r.scenario, r.block_size) in plain]
    if not increases:
        return Fraction(0)
    return sum(increases, Fraction(0)) / len(increases)


# CSV output

def write_bench_csv(f, records):
    writer = csv.writer(f, lineterminator='\n')
    writer.writerow(BENCH_HEADER)
    for record in records:
        writer.writerow(record.as_row())


def kmeans_row(scenario, report, k, n_objects, overhead=None):
    return [scenario, report.banks, k, n_objects, report.rounds,
            (AEAD_MODE if report.crypto else PLAIN_MODE) if scenario == PIM_ASSISTED else '-',
            report.total_time.format_ns(), report.pim_compute_time.format_ns(), report.aes_time.format_ns(),
            '' if overhead is None else '%.3f' % (float(overhead) * 100)]


def write_kmeans_csv(f, rows):
    writer = csv.writer(f, lineterminator='\n')
    writer.writerow(KMEANS_HEADER)
    for row in rows:
        writer.writerow(row)
