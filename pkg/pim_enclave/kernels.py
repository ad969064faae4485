"""
Built-in PIM kernels and the data formats they share with the host.

A kernel is a callable ``kernel(ctx, params)`` where ``ctx`` is the
``KernelContext`` of the bank it runs on and ``params`` the decoded
parameter record. Kernels are registered by name through the
``PIM_ENCLAVE_KERNELS`` setting.
"""
import logging
import struct

import numpy as np

from pim_enclave.dma import BANK_READ
from pim_enclave.dma import BANK_WRITE
from pim_enclave.dma import DECRYPT
from pim_enclave.dma import ENCRYPT
from pim_enclave.dma import PLAIN
from pim_enclave.dma import BlockLayout
from pim_enclave.dma import DmaRequest
from pim_enclave.exceptions import KernelTrap


logger = logging.getLogger(__name__)

# k-means object blocks: 127 objects of 16 int32 coordinates, then 64
# bytes of metadata whose first word is the object count.
DIMS = 16
OBJECTS_PER_BLOCK = 127
OBJECT_SIZE = DIMS * 4
OBJECT_BLOCK = 8192
OBJECT_DATA = OBJECTS_PER_BLOCK * OBJECT_SIZE
MEMBERSHIP_BLOCK = 512

OBJECT_LAYOUT = BlockLayout.for_block_size(OBJECT_BLOCK)
MEMBERSHIP_LAYOUT = BlockLayout.for_block_size(MEMBERSHIP_BLOCK)

# Hash table: open addressing with linear probing over fixed slots.
SLOTS = 256
SLOT_SIZE = 32
KEY_SIZE = 24
TABLE_SIZE = SLOTS * SLOT_SIZE
EMPTY = -1
ENTRY = struct.Struct('<24si4x')
LOOKUP = struct.Struct('<ii')

TABLE_LAYOUT = BlockLayout.for_block_size(TABLE_SIZE)


def _rotl32(x, r):
    return ((x << r) | (x >> (32 - r))) & 0xFFFFFFFF


def murmur3_32(data, seed=0):
    """MurmurHash3, x86 32-bit variant."""
    data = bytes(data)
    c1, c2 = 0xcc9e2d51, 0x1b873593
    h = seed & 0xFFFFFFFF
    tail = len(data) & ~3
    for (k,) in struct.iter_unpack('<I', data[:tail]):
        k = _rotl32((k * c1) & 0xFFFFFFFF, 15)
        h ^= (k * c2) & 0xFFFFFFFF
        h = (_rotl32(h, 13) * 5 + 0xe6546b64) & 0xFFFFFFFF
    k = 0
    rest = data[tail:]
    for i in reversed(range(len(rest))):
        k = (k << 8) | rest[i]
    if rest:
        k = _rotl32((k * c1) & 0xFFFFFFFF, 15)
        h ^= (k * c2) & 0xFFFFFFFF
    h ^= len(data)
    h ^= h >> 16
    h = (h * 0x85ebca6b) & 0xFFFFFFFF
    h ^= h >> 13
    h = (h * 0xc2b2ae35) & 0xFFFFFFFF
    h ^= h >> 16
    return h


def key_bytes(key):
    return key.encode('utf-8') if isinstance(key, str) else bytes(key)


def storable(raw):
    """Whether ``raw`` fits a table slot. Other keys are never present."""
    return 0 < len(raw) <= KEY_SIZE


def encode_key(key):
    raw = key_bytes(key)
    if not storable(raw):
        raise ValueError("Hash table keys are 1 to %d bytes" % KEY_SIZE)
    return raw


def home_slot(key):
    return murmur3_32(encode_key(key)) % SLOTS


def build_table(items):
    """
    Lay out ``items`` (key, value) pairs as a hash table image. Values
    must be non-negative; -1 marks an empty slot.
    """
    slots = [None] * SLOTS
    for key, value in items:
        raw = encode_key(key)
        if value < 0:
            raise ValueError("Value %d collides with the empty marker" % value)
        index = home_slot(raw)
        for _ in range(SLOTS):
            if slots[index] is None or slots[index][0] == raw:
                slots[index] = (raw, value)
                break
            index = (index + 1) % SLOTS
        else:
            raise ValueError("Hash table is full")
    return b''.join(ENTRY.pack(*(entry or (b'', EMPTY))) for entry in slots)


def parse_entry(raw):
    key, value = ENTRY.unpack(raw)
    return key.rstrip(b'\x00'), value


def probe_sequence(table, key):
    """
    Yield ``(slot, stored_key, value)`` in probe order for ``key`` until
    the key or an empty slot is found. ``table`` is a callable returning
    the raw bytes of a slot, so host and kernel probe the same way.
    """
    raw = key_bytes(key)
    if not storable(raw):
        return
    index = home_slot(raw)
    for _ in range(SLOTS):
        stored, value = parse_entry(table(index))
        yield index, stored, value
        if value == EMPTY or stored == raw:
            return
        index = (index + 1) % SLOTS


def pack_objects(objects):
    """One object block payload holding up to 127 objects."""
    objects = np.ascontiguousarray(objects, dtype='<i4')
    if len(objects) > OBJECTS_PER_BLOCK or (objects.size and objects.shape[1] != DIMS):
        raise ValueError("An object block holds %d objects of %d dims" % (OBJECTS_PER_BLOCK, DIMS))
    data = objects.tobytes()
    meta = struct.pack('<I', len(objects))
    return data + bytes(OBJECT_DATA - len(data)) + meta + bytes(OBJECT_BLOCK - OBJECT_DATA - len(meta))


def unpack_objects(payload):
    (count,) = struct.unpack_from('<I', payload, OBJECT_DATA)
    if count > OBJECTS_PER_BLOCK:
        raise KernelTrap("Object block claims %d objects" % count)
    return np.frombuffer(payload, dtype='<i4', count=count * DIMS).reshape(count, DIMS).astype(np.int64)


def pack_memberships(memberships):
    data = np.ascontiguousarray(memberships, dtype='<i4').tobytes()
    return data + bytes(MEMBERSHIP_BLOCK - len(data))


def unpack_memberships(payload, count):
    return np.frombuffer(payload, dtype='<i4', count=count).astype(np.int64)


def nearest(objects, centroids):
    """
    Index of the nearest centroid to each object by squared Euclidean
    distance in int64; ties go to the lowest index.
    """
    distances = ((objects[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return distances.argmin(axis=1)


def pack_partials(delta, counts, sums):
    return (struct.pack('<I', delta) + np.asarray(counts, dtype='<u4').tobytes() +
            np.asarray(sums, dtype='<i8').tobytes())


def unpack_partials(content, k):
    (delta,) = struct.unpack_from('<I', content)
    counts = np.frombuffer(content, dtype='<u4', count=k, offset=4).astype(np.int64)
    sums = np.frombuffer(content, dtype='<i8', count=k * DIMS, offset=4 + 4 * k).reshape(k, DIMS)
    return delta, counts, sums.astype(np.int64)


def partials_size(k):
    return 4 + 4 * k + 8 * k * DIMS


def spin_kernel(ctx, params):
    """Burn a fixed number of cycles and nothing else."""
    ctx.consume_cycles(params.get('cycles', 0))


def kmeans_kernel(ctx, params):
    """
    One k-means round over the blocks resident in this bank. For every
    block: DMA in the objects and their memberships, assign each object
    to its nearest centroid, DMA the memberships back out. Posts the
    number of changed memberships with per-cluster counts and coordinate
    sums.
    """
    k = params['k']
    centroids = np.array(params['centroids'], dtype=np.int64).reshape(k, DIMS)
    crypto = bool(params.get('crypto', 1))
    objects_wire = OBJECT_LAYOUT.wire_size if crypto else OBJECT_BLOCK
    members_wire = MEMBERSHIP_LAYOUT.wire_size if crypto else MEMBERSHIP_BLOCK
    inbound, outbound = (DECRYPT, ENCRYPT) if crypto else (PLAIN, PLAIN)
    per_object = k * ctx.cost('distance_eval') + ctx.cost('membership_update') + ctx.cost('accumulate')

    delta = 0
    counts = np.zeros(k, dtype=np.int64)
    sums = np.zeros((k, DIMS), dtype=np.int64)
    for block in range(params['blocks']):
        ctx.consume_cycles(ctx.cost('batch_setup'))
        ctx.dma_request(DmaRequest(params['objects'] + block * objects_wire, 0, objects_wire,
                                   BANK_READ, inbound))
        ctx.dma_request(DmaRequest(params['memberships'] + block * members_wire, OBJECT_BLOCK, members_wire,
                                   BANK_READ, inbound))
        objects = unpack_objects(ctx.local_read(0, OBJECT_BLOCK))
        previous = unpack_memberships(ctx.local_read(OBJECT_BLOCK, MEMBERSHIP_BLOCK), len(objects))

        assigned = nearest(objects, centroids)
        ctx.consume_cycles(len(objects) * per_object)
        delta += int((assigned != previous).sum())
        counts += np.bincount(assigned, minlength=k)
        np.add.at(sums, assigned, objects)

        ctx.local_write(OBJECT_BLOCK, pack_memberships(assigned))
        ctx.dma_request(DmaRequest(OBJECT_BLOCK, params['memberships'] + block * members_wire, MEMBERSHIP_BLOCK,
                                   BANK_WRITE, outbound))

    if params.get('unlock'):
        ctx.clear_protect()
    ctx.post_result(pack_partials(delta, counts, sums))


def hashtable_search_kernel(ctx, params):
    """
    Look ``params['key']`` up in the hash table image at
    ``params['table']``. Posts ``(found, value)``; keys too long or
    too short for a slot are simply not found.
    """
    crypto = bool(params.get('crypto', 1))
    size = TABLE_LAYOUT.wire_size if crypto else TABLE_SIZE
    ctx.dma_request(DmaRequest(params['table'], 0, size, BANK_READ, DECRYPT if crypto else PLAIN))
    key = key_bytes(params['key'])
    ctx.consume_cycles(len(key) * ctx.cost('hash_byte'))

    found, value = 0, EMPTY
    for _, stored, stored_value in probe_sequence(lambda slot: ctx.local_read(slot * SLOT_SIZE, SLOT_SIZE), key):
        ctx.consume_cycles(ctx.cost('probe'))
        if stored_value != EMPTY and stored == key:
            found, value = 1, stored_value
    ctx.post_result(LOOKUP.pack(found, value))
