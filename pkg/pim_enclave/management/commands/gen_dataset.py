from pim_enclave.crypto import SymmetricKey
from pim_enclave.dataset import PreprocessedDataset
from pim_enclave.dataset import key_path
from pim_enclave.dataset import make_dataset
from pim_enclave.dataset import save_dataset
from pim_enclave.management.base import SimulationCommand


class Command(SimulationCommand):
    """
    Generate a seeded k-means dataset and write it as a preprocessed
    dataset file, encrypted under a fresh data key unless ``--plain``.
    """
    help = "Generate and encrypt a k-means dataset"

    def add_arguments(self, parser):
        super(Command, self).add_arguments(parser)
        parser.add_argument('--objects', type=int, default=20000)
        parser.add_argument('--centers', type=int, default=4)
        parser.add_argument('--seed', type=int, default=None)
        parser.add_argument('--plain', action='store_true')
        parser.add_argument('--out', required=True)

    def run(self, config, **options):
        seed = config.seed if options['seed'] is None else options['seed']
        objects = make_dataset(options['objects'], centers=options['centers'], seed=seed)
        key = None if options['plain'] else SymmetricKey.generate()
        dataset = PreprocessedDataset.encode(objects, key, encrypted=key is not None)
        save_dataset(options['out'], dataset, key)
        self.stdout.write("%d objects in %d blocks written to %s" % (
            len(objects), len(dataset.blocks), options['out']))
        if key is not None:
            self.stdout.write("data key written to %s" % key_path(options['out']))
