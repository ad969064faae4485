"""
k-means datasets: generation, fixed-point quantisation and the
preprocessed dataset (PEDS) file format.

A PEDS file is a small plaintext header followed by the raw
concatenation of the dataset's blocks, exactly as they will sit in bank
memory::

    b'PEDS' || version (2) || size_iv (1) || size_tag (1) || n_split (4)
            || size_block (4) || n_blocks (4) || n_objects (4) || length (8)
            || block 0 || block 1 || ...

The data key is kept beside the file, never inside it.
"""
import json
import logging
import struct
from collections import namedtuple

import numpy as np

from pim_enclave.crypto import HOST_ORIGIN
from pim_enclave.crypto import SymmetricKey
from pim_enclave.dma import BlockLayout
from pim_enclave.dma import EncryptedBlock
from pim_enclave.dma import decode_blocks
from pim_enclave.dma import encode_blocks
from pim_enclave.exceptions import LayoutError
from pim_enclave.kernels import DIMS
from pim_enclave.kernels import OBJECT_LAYOUT
from pim_enclave.kernels import OBJECTS_PER_BLOCK
from pim_enclave.kernels import pack_objects
from pim_enclave.kernels import unpack_objects
from pim_enclave.utils import chunks


logger = logging.getLogger(__name__)

# Coordinates are int32 fixed point with 12 fractional bits.
SCALE = 2 ** 12

MAGIC = b'PEDS'
VERSION = 1
HEADER = struct.Struct('>4sHBBIIIIQ')


def quantize(points):
    """Round real coordinates onto the fixed-point grid, half to even."""
    return np.rint(np.asarray(points, dtype=np.float64) * SCALE).astype(np.int32)


def make_dataset(n_objects, centers=4, seed=0, spread=1.0, box=8.0):
    """
    ``n_objects`` points of ``DIMS`` coordinates drawn from ``centers``
    Gaussian blobs whose means are uniform in ``[-box, box)``.
    """
    rng = np.random.default_rng(seed)
    means = rng.uniform(-box, box, size=(centers, DIMS))
    labels = rng.integers(0, centers, size=n_objects)
    points = means[labels] + rng.normal(0.0, spread, size=(n_objects, DIMS))
    return quantize(points)


def object_blocks(objects):
    """Pack ``objects`` into consecutive 8 KiB object block payloads."""
    objects = np.asarray(objects, dtype=np.int32)
    return [pack_objects(objects[i:i + OBJECTS_PER_BLOCK]) for i in range(0, len(objects), OBJECTS_PER_BLOCK)]


class PreprocessedDataset(namedtuple('PreprocessedDataset', 'layout blocks n_objects length')):
    __slots__ = ()

    @classmethod
    def encode(cls, objects, key=None, encrypted=True):
        layout = OBJECT_LAYOUT if encrypted else OBJECT_LAYOUT.plain()
        payload = b''.join(object_blocks(objects))
        return cls(layout, encode_blocks(payload, layout, key), len(objects), len(payload))

    def decode(self, key=None):
        """The plaintext objects, given the data key for encrypted datasets."""
        payload = decode_blocks(self.blocks, self.layout, key, self.length)
        objects = [unpack_objects(piece) for piece in chunks(payload, self.layout.size_block)]
        if not objects:
            return np.zeros((0, DIMS), dtype=np.int64)
        return np.concatenate(objects)

    def to_bytes(self):
        layout = self.layout
        header = HEADER.pack(MAGIC, VERSION, layout.size_iv, layout.size_tag, layout.n_split,
                             layout.size_block, len(self.blocks), self.n_objects, self.length)
        return header + b''.join(block.to_bytes() for block in self.blocks)

    @classmethod
    def from_bytes(cls, data):
        data = bytes(data)
        try:
            magic, version, size_iv, size_tag, n_split, size_block, n_blocks, n_objects, length = \
                HEADER.unpack_from(data)
        except struct.error:
            raise LayoutError("Dataset header is truncated")
        if magic != MAGIC or version != VERSION:
            raise LayoutError("Not a version %d dataset file" % VERSION)
        layout = BlockLayout(n_split * (size_block + size_iv + size_tag), n_split, size_block, size_iv, size_tag)
        body = data[HEADER.size:]
        if len(body) != n_blocks * layout.wire_size:
            raise LayoutError("Dataset holds %d bytes of blocks, expected %d" % (
                len(body), n_blocks * layout.wire_size))
        blocks = [EncryptedBlock.from_bytes(piece, layout) for piece in chunks(body, layout.wire_size)]
        return cls(layout, blocks, n_objects, length)


def key_path(path):
    return '%s.key' % path


def save_dataset(path, dataset, key=None):
    """
    Write ``dataset`` to ``path`` and, for encrypted datasets, the data
    key with its host IV counter to ``path + '.key'``.
    """
    with open(path, 'wb') as f:
        f.write(dataset.to_bytes())
    if key is not None:
        with open(key_path(path), 'w') as f:
            json.dump({'key': key.material.hex(), 'iv_counter': key.iv_sequence(HOST_ORIGIN).counter}, f)
    logger.info("Wrote %d blocks to %s" % (len(dataset.blocks), path))


def load_dataset(path):
    """
    Read a PEDS file and its key file. Returns ``(dataset, key)``;
    ``key`` is ``None`` for plain datasets. The key resumes its host IV
    counter where the writer left it.
    """
    with open(path, 'rb') as f:
        dataset = PreprocessedDataset.from_bytes(f.read())
    key = None
    if dataset.layout.encrypted:
        try:
            with open(key_path(path)) as f:
                record = json.load(f)
            key = SymmetricKey(bytes.fromhex(record['key']))
            key.iv_sequence(HOST_ORIGIN, start=int(record['iv_counter']))
        except (OSError, ValueError, KeyError) as e:
            raise LayoutError("Cannot read the data key for %s: %s" % (path, e))
    return dataset, key
