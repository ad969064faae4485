from pim_enclave.engine import Simulator
from pim_enclave.management.base import SimulationCommand
from pim_enclave.management.base import int_list
from pim_enclave.memory import READ
from pim_enclave.memory import WRITE
from pim_enclave.workloads import AEAD_MODE
from pim_enclave.workloads import BENCH_SIZES
from pim_enclave.workloads import PLAIN_MODE
from pim_enclave.workloads import RAND
from pim_enclave.workloads import SEQ
from pim_enclave.workloads import dma_bench
from pim_enclave.workloads import mean_overhead
from pim_enclave.workloads import write_bench_csv


class Command(SimulationCommand):
    """
    Time AES-DMA transfers on bank 0 for every combination of the
    selected access patterns, operations, sizes and crypto modes, and
    write one ``BenchRecord`` per combination as CSV.
    """
    help = "Measure plain and AES-GCM DMA access latency and throughput"

    def add_arguments(self, parser):
        super(Command, self).add_arguments(parser)
        parser.add_argument('--pattern', choices=[SEQ, RAND, 'all'], default='all')
        parser.add_argument('--op', choices=['read', 'write', 'all'], default='all')
        parser.add_argument('--sizes', type=int_list, default=list(BENCH_SIZES),
                            help="Comma-separated block sizes in bytes")
        parser.add_argument('--crypto', choices=[PLAIN_MODE, AEAD_MODE, 'both'], default='both')
        parser.add_argument('--iters', type=int, default=1000)
        parser.add_argument('--seed', type=int, default=None)
        parser.add_argument('--out', default=None, help="CSV file to write instead of stdout")

    def run(self, config, **options):
        patterns = [SEQ, RAND] if options['pattern'] == 'all' else [options['pattern']]
        ops = [READ, WRITE] if options['op'] == 'all' else [options['op'].upper()]
        modes = [False, True] if options['crypto'] == 'both' else [options['crypto'] == AEAD_MODE]
        if options['iters'] < 1:
            raise ValueError("--iters must be positive")

        sim = Simulator(config)
        records = []
        for pattern in patterns:
            for op in ops:
                for crypto in modes:
                    records += dma_bench(sim, pattern, op, options['sizes'], crypto,
                                         options['iters'], options['seed'])

        with self.output(options['out']) as f:
            write_bench_csv(f, records)
        if options['out'] and len(modes) == 2:
            self.stdout.write("mean AES-GCM access time increase: %.2f%%" % (float(mean_overhead(records)) * 100))
