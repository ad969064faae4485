import io
from fractions import Fraction

import numpy as np
from django.test import SimpleTestCase
from mock import patch

import pytest

from pim_enclave import sdk
from pim_enclave.clock import SimTime
from pim_enclave.dataset import PreprocessedDataset
from pim_enclave.exceptions import ConfigError
from pim_enclave.kernels import DIMS
from pim_enclave.kernels import OBJECT_SIZE
from pim_enclave.kernels import OBJECTS_PER_BLOCK
from pim_enclave.kernels import TABLE_SIZE
from pim_enclave.memory import READ
from pim_enclave.memory import WRITE
from pim_enclave.workloads import AEAD_MODE
from pim_enclave.workloads import BENCH_HEADER
from pim_enclave.workloads import BENCH_SIZES
from pim_enclave.workloads import DICTIONARY
from pim_enclave.workloads import HOST_ONLY
from pim_enclave.workloads import KMEANS_HEADER
from pim_enclave.workloads import PIM_ASSISTED
from pim_enclave.workloads import PLAIN_MODE
from pim_enclave.workloads import RAND
from pim_enclave.workloads import SEQ
from pim_enclave.workloads import BenchRecord
from pim_enclave.workloads import KMeansParams
from pim_enclave.workloads import bench_sweep
from pim_enclave.workloads import crossover_banks
from pim_enclave.workloads import dma_bench
from pim_enclave.workloads import fit_line
from pim_enclave.workloads import kmeans_host_baseline
from pim_enclave.workloads import kmeans_host_driver
from pim_enclave.workloads import kmeans_oracle
from pim_enclave.workloads import kmeans_row
from pim_enclave.workloads import mean_overhead
from pim_enclave.workloads import params_frames
from pim_enclave.workloads import project_times
from pim_enclave.workloads import trace_experiment
from pim_enclave.workloads import update_centroids
from pim_enclave.workloads import write_bench_csv
from pim_enclave.workloads import write_kmeans_csv

from .factories import KeyFactory
from .factories import KMeansParamsFactory
from .factories import MultiBankConfigFactory
from .factories import ObjectsFactory
from .factories import SimConfigFactory
from .factories import SimulatorFactory


class KMeansOracleTests(SimpleTestCase):
    def test_params(self):
        """A job needs at least one cluster and one round."""
        with self.assertRaises(ConfigError):
            KMeansParams(k=0)
        with self.assertRaises(ConfigError):
            KMeansParams(k=2, rounds=0)

    def test_too_few_objects(self):
        """More clusters than objects should be refused."""
        with self.assertRaises(ConfigError):
            kmeans_oracle(ObjectsFactory(n_objects=3), KMeansParamsFactory(k=4))

    def test_first_round_assigns_everything(self):
        """Every object starts unassigned, so the first delta counts them all."""
        _, _, deltas = kmeans_oracle(ObjectsFactory(n_objects=500), KMeansParamsFactory())
        self.assertEqual(deltas[0], 500)

    def test_early_stop(self):
        """With early stopping the run should end at the first round without changes."""
        params = KMeansParamsFactory(rounds=100, early_stop=True)
        _, _, deltas = kmeans_oracle(ObjectsFactory(n_objects=500), params)
        self.assertEqual(deltas[-1], 0)
        self.assertLess(len(deltas), 100)

    def test_empty_cluster_keeps_centroid(self):
        """A cluster with no members should keep its previous centroid."""
        centroids = np.array([[5] * DIMS, [9] * DIMS], dtype=np.int64)
        counts = np.array([2, 0])
        sums = np.array([[-3] * DIMS, [0] * DIMS], dtype=np.int64)
        updated = update_centroids(centroids, counts, sums)
        self.assertEqual(updated[0].tolist(), [-2] * DIMS)
        self.assertEqual(updated[1].tolist(), [9] * DIMS)

    def test_params_frames_is_constant(self):
        """The parameter frame count should depend on ``k`` only."""
        config = MultiBankConfigFactory()
        self.assertEqual(params_frames(config, 4), params_frames(config, 4))
        self.assertGreater(params_frames(config, 16), params_frames(config, 1))


class KMeansDriverTests(SimpleTestCase):
    def setUp(self):
        self.config = MultiBankConfigFactory()

    def simulator(self):
        return SimulatorFactory(config=self.config)

    def assertMatchesOracle(self, report, objects, params):
        centroids, memberships, deltas = kmeans_oracle(objects, params)
        self.assertEqual(report.centroids.tolist(), centroids.tolist())
        self.assertEqual(report.memberships.tolist(), memberships.tolist())
        self.assertEqual(report.deltas, deltas)

    def test_matches_oracle(self):
        """
        Encrypted and plain runs on one or several banks should produce
        exactly the single-process result, partial last block included.
        """
        objects = ObjectsFactory(n_objects=1000)
        params = KMeansParamsFactory(rounds=4)
        for banks, crypto in ((1, True), (3, True), (3, False)):
            report = kmeans_host_driver(self.simulator(), objects, params, banks, crypto)
            self.assertMatchesOracle(report, objects, params)
            self.assertEqual(report.banks, banks)
            self.assertEqual(report.crypto, crypto)

    def test_preprocessed_dataset(self):
        """A dataset encoded ahead of time should give the same result."""
        objects = ObjectsFactory(n_objects=600)
        params = KMeansParamsFactory(rounds=2)
        key = KeyFactory()
        dataset = PreprocessedDataset.encode(objects, key)
        report = kmeans_host_driver(self.simulator(), objects, params, 2, dataset=dataset, data_key=key)
        self.assertMatchesOracle(report, objects, params)

    def test_compute_scales_with_banks(self):
        """Spreading 16 full blocks over 8 banks should cut compute time by exactly 8."""
        objects = ObjectsFactory(n_objects=16 * OBJECTS_PER_BLOCK)
        params = KMeansParamsFactory(rounds=2)
        single = kmeans_host_driver(self.simulator(), objects, params, 1)
        spread = kmeans_host_driver(self.simulator(), objects, params, 8)
        self.assertEqual(single.pim_compute_time / spread.pim_compute_time, 8)
        self.assertLess(spread.total_time, single.total_time)

    def test_crypto_overhead(self):
        """
        Encryption should add a few percent to the run time, in line with
        the overhead predicted from the AES and IV/tag time.
        """
        objects = ObjectsFactory(n_objects=16 * OBJECTS_PER_BLOCK)
        params = KMeansParamsFactory(rounds=2)
        encrypted = kmeans_host_driver(self.simulator(), objects, params, 1, crypto=True)
        plain = kmeans_host_driver(self.simulator(), objects, params, 1, crypto=False)
        overhead = encrypted.total_time / plain.total_time - 1
        self.assertGreater(overhead, Fraction(2, 100))
        self.assertLess(overhead, Fraction(5, 100))
        self.assertLess(abs(overhead - encrypted.predicted_overhead), Fraction(1, 100))
        self.assertEqual(plain.aes_time, SimTime(0))

    def test_sessions_are_torn_down(self):
        """After a run every bank used should be destroyed and released."""
        sim = self.simulator()
        kmeans_host_driver(sim, ObjectsFactory(n_objects=600), KMeansParamsFactory(rounds=1), 3)
        for index in range(3):
            self.assertEqual(sim.bank(index).controller.phase, 'DESTROYED')
            self.assertIsNone(sim.client(index))
            self.assertTrue(sim.bank(index).core.local.zeroized)

    def test_setup_is_reported_separately(self):
        """Setup time should be reported apart from the rounds."""
        sim = self.simulator()
        report = kmeans_host_driver(sim, ObjectsFactory(n_objects=300), KMeansParamsFactory(rounds=1), 1)
        self.assertGreater(report.setup_time, SimTime(0))
        self.assertLessEqual(report.setup_time + report.total_time, sim.host_clock.now)

    def test_host_baseline(self):
        """The host-only run should compute the same clustering."""
        objects = ObjectsFactory(n_objects=500)
        params = KMeansParamsFactory()
        self.assertMatchesOracle(kmeans_host_baseline(self.config, objects, params), objects, params)

    def test_crossover(self):
        """The PIM run should overtake the host-only run at five or six banks."""
        objects = ObjectsFactory(n_objects=48 * OBJECTS_PER_BLOCK)
        self.assertIn(crossover_banks(self.simulator, objects, KMeansParamsFactory(rounds=2)), (5, 6))


class ProjectionTests(SimpleTestCase):
    def test_fit_line(self):
        """Points on a line should fit it exactly."""
        slope, intercept, residual = fit_line([1, 2, 3], [3, 5, 7])
        self.assertAlmostEqual(slope, 2)
        self.assertAlmostEqual(intercept, 1)
        self.assertAlmostEqual(residual, 0)

    def test_project_times(self):
        """Projection should extend the fitted line."""
        self.assertAlmostEqual(project_times([1, 2, 3], [3, 5, 7], [10])[0], 21)


class HashTableTraceTests(SimpleTestCase):
    queries = ['apple', 'quince', 'no-such-fruit', 'plum', 'apple']

    def test_pim_trace_is_query_independent(self):
        """
        With the kernel doing the lookups, every query should leave the
        same pattern of addresses, operations and sizes on the bus.
        """
        sim = SimulatorFactory()
        segments = trace_experiment(sim, PIM_ASSISTED, self.queries)
        patterns = set(tuple(event.signature for event in segment.events) for segment in segments)
        self.assertEqual(len(patterns), 1)
        self.assertTrue(all(event.address >= sim.config.mmio_base
                            for segment in segments for event in segment.events))
        self.assertEqual([(segment.found, segment.value) for segment in segments],
                         [(True, 0), (True, DICTIONARY.index('quince')), (False, -1),
                          (True, DICTIONARY.index('plum')), (True, 0)])

    def test_host_trace_leaks_the_query(self):
        """
        With the host probing the table itself, different queries should
        touch different addresses and repeated queries the same ones.
        """
        segments = trace_experiment(SimulatorFactory(), HOST_ONLY, self.queries)
        patterns = [tuple(event.signature for event in segment.events) for segment in segments]
        self.assertGreater(len(set(patterns)), 1)
        self.assertEqual(patterns[0], patterns[-1])
        self.assertEqual((segments[3].found, segments[3].value), (True, DICTIONARY.index('plum')))

    def test_unstorable_queries(self):
        """
        Queries too long or too short for a slot should come back as not
        found in either mode, and leave the PIM session serving later
        lookups with the same bus pattern.
        """
        queries = ['apple', 'supercalifragilisticexpialidocious', '', 'plum']
        expected = [(True, 0), (False, -1), (False, -1), (True, DICTIONARY.index('plum'))]
        for mode in (HOST_ONLY, PIM_ASSISTED):
            with self.subTest(mode=mode):
                segments = trace_experiment(SimulatorFactory(), mode, queries)
                self.assertEqual([(segment.found, segment.value) for segment in segments], expected)
        patterns = set(tuple(event.signature for event in segment.events) for segment in segments)
        self.assertEqual(len(patterns), 1)

    def test_host_table_is_scrubbed(self):
        """Closing the host table should leave no trace of it in the bank."""
        sim = SimulatorFactory()
        trace_experiment(sim, HOST_ONLY, ['apple'])
        self.assertEqual(sim.memory.snapshot(0, 0, TABLE_SIZE), bytes(TABLE_SIZE))

    def test_unknown_mode(self):
        """An unknown mode should be refused."""
        with self.assertRaises(ConfigError):
            trace_experiment(SimulatorFactory(), 'psychic', ['apple'])


class DmaBenchTests(SimpleTestCase):
    def test_plain_throughput(self):
        """Plain 64 KiB reads should run just under the link bandwidth."""
        record = dma_bench(SimulatorFactory(), SEQ, READ, sizes=(65536,), iterations=20)[0]
        self.assertGreater(record.throughput, Fraction(355, 100) * 10 ** 9)
        self.assertLess(record.throughput, Fraction(36, 10) * 10 ** 9)

    def test_patterns_agree(self):
        """Row-aligned slots should make sequential and random access cost the same."""
        seq = dma_bench(SimulatorFactory(), SEQ, WRITE, sizes=(4096,), iterations=30)[0]
        rand = dma_bench(SimulatorFactory(), RAND, WRITE, sizes=(4096,), iterations=30)[0]
        self.assertEqual(seq.mean_latency, rand.mean_latency)

    def test_crypto_increase(self):
        """AES-GCM should add roughly a fifth to the access time on average."""
        records = bench_sweep(SimulatorFactory(), sizes=(1024, 8192), iterations=10)
        self.assertEqual(len(records), 16)
        increase = mean_overhead(records)
        self.assertGreater(increase, Fraction(17, 100))
        self.assertLess(increase, Fraction(21, 100))

    def test_unknown_pattern(self):
        """Unknown patterns and operations should be refused."""
        with self.assertRaises(ConfigError):
            dma_bench(SimulatorFactory(), 'zigzag', READ)
        with self.assertRaises(ConfigError):
            dma_bench(SimulatorFactory(), SEQ, 'ERASE')

    def test_record(self):
        """A bench record should report exact mean latency and throughput."""
        record = BenchRecord('seq-read', 1000, PLAIN_MODE, 2, SimTime(1000))
        self.assertEqual(record.mean_latency, SimTime(500))
        self.assertEqual(record.throughput, 2 * 10 ** 9)
        self.assertEqual(record.as_row(), ['seq-read', 1000, PLAIN_MODE, '500.000', 2000000000])


class CsvTests(SimpleTestCase):
    def test_bench_csv(self):
        """The bench CSV should start with its header."""
        f = io.StringIO()
        write_bench_csv(f, [BenchRecord('rand-write', 1024, AEAD_MODE, 1, SimTime(400))])
        lines = f.getvalue().splitlines()
        self.assertEqual(lines[0], ','.join(BENCH_HEADER))
        self.assertEqual(lines[1], 'rand-write,1024,aead,400.000,2560000000')

    def test_kmeans_csv(self):
        """A k-means row should carry times in nanoseconds and the overhead in percent."""
        objects = ObjectsFactory(n_objects=300)
        params = KMeansParamsFactory(rounds=1)
        report = kmeans_host_baseline(MultiBankConfigFactory(), objects, params)
        f = io.StringIO()
        write_kmeans_csv(f, [kmeans_row(PIM_ASSISTED, report, 4, 300, Fraction(33, 1000))])
        lines = f.getvalue().splitlines()
        self.assertEqual(lines[0], ','.join(KMEANS_HEADER))
        fields = lines[1].split(',')
        self.assertEqual(fields[:6], ['pim', '0', '4', '300', '1', 'plain'])
        self.assertEqual(fields[-1], '3.300')


class ColdBootTests(SimpleTestCase):
    def scan_during_run(self, crypto):
        """
        Run k-means on three banks, pulling every bank's raw contents each
        time the host waits on a kernel. Returns whether the first packed
        objects ever showed up.
        """
        objects = ObjectsFactory(n_objects=600)
        needle = np.ascontiguousarray(objects[:8], dtype='<i4').tobytes()
        sim = SimulatorFactory(config=MultiBankConfigFactory())
        wait_for = sdk.wait_for
        seen = []

        def scan(handle):
            seen.extend(needle in sim.memory.snapshot(bank) for bank in range(3))
            return wait_for(handle)

        with patch('pim_enclave.sdk.wait_for', side_effect=scan):
            kmeans_host_driver(sim, objects, KMeansParamsFactory(rounds=2), 3, crypto=crypto)
        self.assertTrue(seen)
        return any(seen)

    def test_encrypted_run_leaves_no_plaintext(self):
        """Raw bank contents should never hold plaintext objects mid-run."""
        self.assertFalse(self.scan_during_run(crypto=True))

    def test_plain_run_is_exposed(self):
        """Without encryption the same scan should find the objects."""
        self.assertTrue(self.scan_during_run(crypto=False))


@pytest.mark.slow
class FullScaleTests(SimpleTestCase):
    def test_dma_sweep(self):
        """
        With the default configuration and a thousand transfers per point,
        AES-GCM should add 17 to 21 percent to access time on average and
        keep 77 to 87 percent of the plain throughput at every point.
        """
        records = bench_sweep(SimulatorFactory(config=SimConfigFactory()), sizes=BENCH_SIZES, iterations=1000)
        self.assertEqual(len(records), 32)
        increase = mean_overhead(records)
        self.assertGreater(increase, Fraction(17, 100))
        self.assertLess(increase, Fraction(21, 100))
        plain = dict(((r.scenario, r.block_size), r) for r in records if r.crypto == PLAIN_MODE)
        for record in records:
            if record.crypto != AEAD_MODE:
                continue
            ratio = record.throughput / plain[(record.scenario, record.block_size)].throughput
            with self.subTest(scenario=record.scenario, size=record.block_size):
                self.assertGreaterEqual(ratio, Fraction(77, 100))
                self.assertLessEqual(ratio, Fraction(87, 100))

    def test_kmeans_matches_oracle(self):
        """Twenty rounds on four banks should match the single-process result at every scale."""
        config = MultiBankConfigFactory()
        for k, n_objects in ((4, 1000), (10, 5000), (26, 20000)):
            objects = ObjectsFactory(n_objects=n_objects, centers=k)
            params = KMeansParamsFactory(k=k, rounds=20)
            centroids, memberships, deltas = kmeans_oracle(objects, params)
            for crypto in (True, False):
                with self.subTest(k=k, objects=n_objects, crypto=crypto):
                    report = kmeans_host_driver(SimulatorFactory(config=config), objects, params, 4, crypto)
                    self.assertEqual(report.centroids.tolist(), centroids.tolist())
                    self.assertEqual(report.memberships.tolist(), memberships.tolist())
                    self.assertEqual(report.deltas, deltas)

    def test_kmeans_time_is_linear(self):
        """Run time on one bank should grow linearly with the dataset, 0.16 MB to 1.28 MB."""
        config = MultiBankConfigFactory()
        sizes, times = [], []
        for n_objects in (2500, 5000, 10000, 20000):
            report = kmeans_host_driver(SimulatorFactory(config=config), ObjectsFactory(n_objects=n_objects),
                                        KMeansParamsFactory(rounds=3), 1)
            sizes.append(n_objects * OBJECT_SIZE)
            times.append(report.total_time.exact)
        _, _, residual = fit_line(sizes, times)
        self.assertLess(residual, 0.01)

    def test_twenty_query_trace(self):
        """Twenty mixed hits and misses should leave one bus pattern with the kernel searching."""
        queries = [DICTIONARY[i * 3 % len(DICTIONARY)] for i in range(15)] + ['miss%d' % i for i in range(5)]
        segments = trace_experiment(SimulatorFactory(), PIM_ASSISTED, queries)
        self.assertEqual(len(segments), 20)
        self.assertEqual(len(set(tuple(event.signature for event in segment.events) for segment in segments)), 1)
        self.assertEqual(sum(segment.found for segment in segments), 15)
