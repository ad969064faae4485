import logging
from contextlib import contextmanager

from django.core.management.base import BaseCommand
from django.core.management.base import CommandError

from pim_enclave.config import load_config
from pim_enclave.exceptions import SimulationError


logger = logging.getLogger(__name__)


def error_line(code, message):
    return "error code=%s message=%s" % (code, message)


class SimulationCommand(BaseCommand):
    """
    Base for the experiment commands. Adds ``--config``, loads the
    configuration and turns every failure into a ``CommandError``
    carrying one machine-readable line, so the process exits nonzero.
    """
    def add_arguments(self, parser):
        parser.add_argument('--config', default=None,
                            help="JSON document overriding the simulator configuration")

    def handle(self, *args, **options):
        try:
            config = load_config(options.pop('config'))
            self.run(config, **options)
        except SimulationError as e:
            logger.warning("%s %s" % (e.code, e))
            raise CommandError(error_line(e.code, e))
        except OSError as e:
            raise CommandError(error_line('IO_ERROR', e))
        except ValueError as e:
            raise CommandError(error_line('INVALID_ARGUMENT', e))

    def run(self, config, **options):
        raise NotImplementedError

    @contextmanager
    def output(self, path):
        """The file at ``path``, or the command's stdout when ``path`` is empty."""
        if not path:
            yield self.stdout
            return
        with open(path, 'w', newline='') as f:
            yield f


def int_list(value):
    """Parse a comma-separated list of integers."""
    try:
        return [int(item) for item in value.split(',') if item.strip()]
    except ValueError:
        raise ValueError("Expected a comma-separated list of integers, got %r" % value)
