from pim_enclave.dataset import load_dataset
from pim_enclave.dataset import make_dataset
from pim_enclave.engine import Simulator
from pim_enclave.kernels import OBJECT_SIZE
from pim_enclave.management.base import SimulationCommand
from pim_enclave.management.base import int_list
from pim_enclave.workloads import AEAD_MODE
from pim_enclave.workloads import HOST_ONLY
from pim_enclave.workloads import PIM_ASSISTED
from pim_enclave.workloads import PLAIN_MODE
from pim_enclave.workloads import KMeansParams
from pim_enclave.workloads import kmeans_host_baseline
from pim_enclave.workloads import kmeans_host_driver
from pim_enclave.workloads import kmeans_row
from pim_enclave.workloads import project_times
from pim_enclave.workloads import write_kmeans_csv


class Command(SimulationCommand):
    """
    Run secure k-means on one or more banks and report simulated run
    times. With ``--crypto both`` the encrypted row also carries its
    overhead over the plain PIM run; ``--baseline`` adds the host-only
    run, and ``--project-mb`` fits a line through runs on fractions of
    the dataset and extrapolates it.
    """
    help = "Run k-means on PIM-enabled banks and report simulated time"

    def add_arguments(self, parser):
        super(Command, self).add_arguments(parser)
        parser.add_argument('--banks', type=int, default=1)
        parser.add_argument('--k', type=int, default=4)
        parser.add_argument('--rounds', type=int, default=20)
        parser.add_argument('--objects', type=int, default=20000)
        parser.add_argument('--crypto', choices=[PLAIN_MODE, AEAD_MODE, 'both'], default=AEAD_MODE)
        parser.add_argument('--seed', type=int, default=None)
        parser.add_argument('--dataset', default=None, help="Preprocessed dataset written by gen_dataset")
        parser.add_argument('--baseline', action='store_true', help="Also run the host-only baseline")
        parser.add_argument('--project-mb', type=int_list, default=None,
                            help="Comma-separated dataset sizes in MB to project run time to")
        parser.add_argument('--out', default=None, help="CSV file to write instead of stdout")

    def run(self, config, **options):
        params = KMeansParams(k=options['k'], rounds=options['rounds'])
        dataset, key = None, None
        if options['dataset']:
            dataset, key = load_dataset(options['dataset'])
            objects = dataset.decode(key)
            modes = [dataset.layout.encrypted]
        else:
            seed = config.seed if options['seed'] is None else options['seed']
            objects = make_dataset(options['objects'], centers=options['k'], seed=seed)
            modes = [False, True] if options['crypto'] == 'both' else [options['crypto'] == AEAD_MODE]

        rows = []
        totals = {}
        for crypto in modes:
            report = kmeans_host_driver(Simulator(config), objects, params, options['banks'], crypto,
                                        dataset=dataset, data_key=key)
            totals[crypto] = report.total_time
            overhead = None
            if crypto and False in totals:
                overhead = report.total_time / totals[False] - 1
            rows.append(kmeans_row(PIM_ASSISTED, report, params.k, len(objects), overhead))
        if options['baseline']:
            rows.append(kmeans_row(HOST_ONLY, kmeans_host_baseline(config, objects, params),
                                   params.k, len(objects)))

        with self.output(options['out']) as f:
            write_kmeans_csv(f, rows)

        if options['project_mb']:
            sizes, times = [], []
            for fraction in (8, 4, 2, 1):
                subset = objects[:max(params.k, len(objects) // fraction)]
                report = kmeans_host_driver(Simulator(config), subset, params, options['banks'], modes[-1])
                sizes.append(len(subset) * OBJECT_SIZE / 1e6)
                times.append(float(report.total_time.exact))
            for target, projected in zip(options['project_mb'], project_times(sizes, times, options['project_mb'])):
                self.stdout.write("projected %d MB: %.3f ns" % (target, projected))
