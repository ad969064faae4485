import os

import numpy as np

from pim_enclave.engine import Simulator
from pim_enclave.management.base import SimulationCommand
from pim_enclave.workloads import DICTIONARY
from pim_enclave.workloads import HOST_ONLY
from pim_enclave.workloads import PIM_ASSISTED
from pim_enclave.workloads import trace_experiment


class Command(SimulationCommand):
    """
    Look words up in a hash table either on the host or with the
    bank's kernel, and dump what a bus observer sees. Without
    ``--queries``, twenty dictionary words are drawn with the config
    seed.
    """
    help = "Record the bus trace of hash table lookups in host or PIM mode"

    def add_arguments(self, parser):
        super(Command, self).add_arguments(parser)
        parser.add_argument('--mode', choices=[HOST_ONLY, PIM_ASSISTED], default=PIM_ASSISTED)
        parser.add_argument('--queries', default=None, help="File with one query per line")
        parser.add_argument('--count', type=int, default=20)
        parser.add_argument('--out', default=None, help="CSV file to write instead of stdout")
        parser.add_argument('--segment-dir', default=None, help="Directory for one CSV per query")

    def run(self, config, **options):
        if options['queries']:
            with open(options['queries']) as f:
                queries = [line.strip() for line in f if line.strip()]
        else:
            rng = np.random.default_rng(config.seed)
            queries = [DICTIONARY[i] for i in rng.integers(0, len(DICTIONARY), size=options['count'])]

        sim = Simulator(config)
        segments = trace_experiment(sim, options['mode'], queries)
        with self.output(options['out']) as f:
            sim.tracer.write_csv(f)

        if options['segment_dir']:
            os.makedirs(options['segment_dir'], exist_ok=True)
            for index, segment in enumerate(segments):
                path = os.path.join(options['segment_dir'], '%03d.csv' % index)
                with open(path, 'w', newline='') as f:
                    sim.tracer.write_csv(f, segment.events)
        if options['out']:
            addresses = set(tuple(event.signature for event in segment.events) for segment in segments)
            self.stdout.write("%d queries, %d distinct bus patterns" % (len(segments), len(addresses)))
