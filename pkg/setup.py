#!/usr/bin/env python

from setuptools import find_packages
from setuptools import setup

from pim_enclave import __version__ as version


with open('README.rst') as f:
    readme = f.read()

setup(
    name='django-pim-enclave',
    version=version,
    description='A deterministic simulator of trusted execution on processing-in-memory banks',
    long_description=readme,
    license='BSD',
    packages=find_packages(),
    include_package_data=True,
    install_requires=[
        'Django>=3.2',
        'cryptography>=3.4',
        'numpy>=1.20',
    ],
    entry_points={
        'console_scripts': ['pim-enclave=pim_enclave.cli:main'],
    },
    python_requires='>=3.8',
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Environment :: Console',
        'Framework :: Django',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: BSD License',
        'Operating System :: OS Independent',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Topic :: Security :: Cryptography',
        'Topic :: System :: Emulators',
    ],
    keywords=['aes-gcm', 'attestation', 'django', 'enclave', 'pim', 'processing-in-memory', 'simulator'],
)
