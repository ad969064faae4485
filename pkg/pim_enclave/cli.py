"""
The ``pim-enclave`` console script. Runs the experiment management
commands without a Django project: when no settings module is given a
minimal configuration with only this app is installed.
"""
import os
import sys

import django
from django.conf import settings
from django.core.management import execute_from_command_line


COMMANDS = ('bench_dma', 'kmeans', 'trace_hashtable', 'attest_demo', 'gen_dataset')


def configure():
    if not settings.configured and 'DJANGO_SETTINGS_MODULE' not in os.environ:
        settings.configure(
            INSTALLED_APPS=['pim_enclave'],
            USE_TZ=True,
            LOGGING={
                'version': 1,
                'disable_existing_loggers': False,
                'handlers': {'console': {'class': 'logging.StreamHandler'}},
                'loggers': {'pim_enclave': {'handlers': ['console'], 'level': 'WARNING'}},
            },
        )
    django.setup()


def main(argv=None):
    argv = list(sys.argv if argv is None else argv)
    if len(argv) > 1 and argv[1].replace('-', '_') in COMMANDS:
        argv[1] = argv[1].replace('-', '_')
    configure()
    execute_from_command_line(argv)


if __name__ == '__main__':
    main()
