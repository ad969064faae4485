"""
The AES-capable DMA engine of a PIM core, and the encrypted block layout
data is stored in.

A block on the wire is ``iv || ciphertext || tag``. Plain layouts, used
by the unencrypted PIM baseline, carry the payload alone.
"""
import logging
from collections import namedtuple
from dataclasses import dataclass

from pim_enclave.clock import SimTime
from pim_enclave.clock import ZERO
from pim_enclave.crypto import HOST_ORIGIN
from pim_enclave.crypto import IV_SIZE
from pim_enclave.crypto import TAG_SIZE
from pim_enclave.crypto import aead_decrypt
from pim_enclave.crypto import aead_encrypt
from pim_enclave.crypto import device_origin
from pim_enclave.exceptions import AuthenticationFailed
from pim_enclave.exceptions import KeySlotEmpty
from pim_enclave.exceptions import LayoutError
from pim_enclave.exceptions import UnauthorizedCaller
from pim_enclave.utils import ceil_div
from pim_enclave.utils import chunks
from pim_enclave.utils import pad


logger = logging.getLogger(__name__)

BANK_READ = 'BANK_READ'
BANK_WRITE = 'BANK_WRITE'

PLAIN = 'PLAIN'
DECRYPT = 'DECRYPT'
ENCRYPT = 'ENCRYPT'

SESSION = 'SESSION'
DATA = 'DATA'
KEY_SLOTS = (SESSION, DATA)

AES_BLOCK = 16


@dataclass(frozen=True)
class BlockLayout(object):
    """
    How a dataset is cut into blocks. ``size_available`` bytes of local
    memory hold ``n_split`` blocks, each ``size_block`` payload bytes
    plus an IV and a tag. Any slack left by rounding ``size_block`` down
    is per-window padding.
    """
    size_available: int
    n_split: int
    size_block: int
    size_iv: int = IV_SIZE
    size_tag: int = TAG_SIZE

    def __post_init__(self):
        if self.n_split < 1:
            raise LayoutError("A transfer window needs at least one block")
        if self.size_block <= 0:
            raise LayoutError("%d bytes cannot hold %d blocks" % (self.size_available, self.n_split))
        if self.size_iv < 0 or self.size_tag < 0:
            raise LayoutError("IV and tag sizes cannot be negative")
        if self.n_split * self.wire_size > self.size_available:
            raise LayoutError("%d blocks of %d bytes exceed %d available" % (
                self.n_split, self.wire_size, self.size_available))

    @classmethod
    def from_available(cls, size_available, n_split, encrypted=True):
        """
        Derive the largest block size such that ``n_split`` blocks, with
        their IVs and tags, fit in ``size_available`` bytes.
        """
        size_iv, size_tag = (IV_SIZE, TAG_SIZE) if encrypted else (0, 0)
        if n_split < 1:
            raise LayoutError("A transfer window needs at least one block")
        size_block = (size_available - n_split * (size_iv + size_tag)) // n_split
        return cls(size_available, n_split, size_block, size_iv, size_tag)

    @classmethod
    def for_block_size(cls, size_block, encrypted=True, n_split=1):
        size_iv, size_tag = (IV_SIZE, TAG_SIZE) if encrypted else (0, 0)
        return cls(n_split * (size_block + size_iv + size_tag), n_split, size_block, size_iv, size_tag)

    @property
    def encrypted(self):
        return bool(self.size_iv or self.size_tag)

    @property
    def overhead(self):
        return self.size_iv + self.size_tag

    @property
    def wire_size(self):
        return self.size_block + self.overhead

    @property
    def padding(self):
        return self.size_available - self.n_split * self.wire_size

    def n_blocks(self, size_data):
        return ceil_div(size_data, self.size_block)

    def plain(self):
        """The same partitioning without IVs and tags."""
        return BlockLayout.for_block_size(self.size_block, encrypted=False, n_split=self.n_split)


class EncryptedBlock(namedtuple('EncryptedBlock', 'iv ciphertext tag')):
    __slots__ = ()

    def to_bytes(self):
        return self.iv + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, data, layout):
        data = bytes(data)
        if len(data) != layout.wire_size:
            raise LayoutError("Block of %d bytes does not match wire size %d" % (len(data), layout.wire_size))
        end = len(data) - layout.size_tag
        return cls(data[:layout.size_iv], data[layout.size_iv:end], data[end:])

    @property
    def wire_size(self):
        return len(self.iv) + len(self.ciphertext) + len(self.tag)


def encode_blocks(data, layout, key=None, origin=HOST_ORIGIN):
    """
    Partition ``data`` into ``layout.size_block`` pieces, zero-padding
    the last, and seal each under ``key`` with a fresh counter IV.
    Plain layouts need no key.
    """
    if layout.encrypted and key is None:
        raise LayoutError("An encrypted layout needs a key")
    blocks = []
    ivs = key.iv_sequence(origin) if layout.encrypted else None
    for piece in chunks(bytes(data), layout.size_block):
        piece = pad(piece, layout.size_block)
        if layout.encrypted:
            iv = ivs.next()
            ciphertext, tag = aead_encrypt(key, iv, piece)
            blocks.append(EncryptedBlock(iv, ciphertext, tag))
        else:
            blocks.append(EncryptedBlock(b'', piece, b''))
    return blocks


def decode_blocks(blocks, layout, key=None, size=None):
    """
    Inverse of ``encode_blocks()``. ``size`` trims the trailing padding;
    raises ``AuthenticationFailed`` if any block was tampered with.
    """
    out = bytearray()
    for block in blocks:
        if not isinstance(block, EncryptedBlock):
            block = EncryptedBlock.from_bytes(block, layout)
        if layout.encrypted:
            if key is None:
                raise LayoutError("An encrypted layout needs a key")
            out += aead_decrypt(key, block.iv, block.ciphertext, block.tag)
        else:
            out += block.ciphertext
    return bytes(out if size is None else out[:size])


@dataclass(frozen=True)
class DmaRequest(object):
    """
    One transfer between the bank and local memory. ``size`` counts the
    bytes on the bank side for reads and the local-memory bytes for
    writes, so an encrypted block is always described by the buffer it
    starts from.
    """
    src: int
    dst: int
    size: int
    direction: str
    crypto_mode: str = PLAIN
    key_slot: str = DATA

    def __post_init__(self):
        if self.direction not in (BANK_READ, BANK_WRITE):
            raise LayoutError("Unknown DMA direction %r" % self.direction)
        if self.crypto_mode not in (PLAIN, DECRYPT, ENCRYPT):
            raise LayoutError("Unknown crypto mode %r" % self.crypto_mode)
        if self.key_slot not in KEY_SLOTS:
            raise LayoutError("Unknown key slot %r" % self.key_slot)
        if self.crypto_mode == DECRYPT and self.direction != BANK_READ:
            raise LayoutError("DECRYPT is only valid on bank reads")
        if self.crypto_mode == ENCRYPT and self.direction != BANK_WRITE:
            raise LayoutError("ENCRYPT is only valid on bank writes")
        if self.size <= 0:
            raise LayoutError("DMA of %d bytes" % self.size)
        if self.crypto_mode == DECRYPT and self.size <= IV_SIZE + TAG_SIZE:
            raise LayoutError("A %d-byte block has no payload" % self.size)

    @property
    def bank_offset(self):
        return self.src if self.direction == BANK_READ else self.dst

    @property
    def local_offset(self):
        return self.dst if self.direction == BANK_READ else self.src

    @property
    def wire_size(self):
        """Bytes crossing between the bank and the engine."""
        if self.crypto_mode == ENCRYPT:
            return self.size + IV_SIZE + TAG_SIZE
        return self.size

    @property
    def payload_size(self):
        """Bytes landing in, or leaving, local memory."""
        if self.crypto_mode == DECRYPT:
            return self.size - IV_SIZE - TAG_SIZE
        return self.size


class DmaStats(object):
    def __init__(self):
        self.reset()

    def reset(self):
        self.transfers = 0
        self.bytes_moved = 0
        self.transfer_time = ZERO
        self.aes_time = ZERO
        self.inflation_time = ZERO

    @property
    def total_time(self):
        return self.transfer_time + self.aes_time


class AesDmaEngine(object):
    """
    The DMA engine of one bank. It holds the SESSION and DATA key slots,
    which only its owning PIM core may program, and runs AES-GCM inline
    without spending PIM core cycles.
    """
    def __init__(self, config, memory, bank, local, owner=None):
        self.config = config
        self.memory = memory
        self.bank = bank
        self.local = local
        self.owner = owner
        self.origin = device_origin(bank)
        self.slots = dict.fromkeys(KEY_SLOTS)
        self.stats = DmaStats()

    def program_key(self, slot, key, caller):
        if caller is None or caller is not self.owner:
            raise UnauthorizedCaller("Only the PIM core runtime of bank %d may program keys" % self.bank)
        if slot not in KEY_SLOTS:
            raise LayoutError("Unknown key slot %r" % slot)
        self.slots[slot] = key
        logger.debug("Bank %d %s key slot programmed" % (self.bank, slot))

    def clear_keys(self):
        for slot, key in self.slots.items():
            if key is not None:
                key.zeroize()
            self.slots[slot] = None

    def key(self, slot):
        key = self.slots.get(slot)
        if key is None or key.zeroized:
            raise KeySlotEmpty("Bank %d %s key slot is empty" % (self.bank, slot))
        return key

    def aes_time(self, wire_size):
        """
        Time spent in the AES stage: one AES clock per
        ``aes_blocks_per_cycle`` 16-byte blocks.
        """
        cycles = ceil_div(ceil_div(wire_size, AES_BLOCK), self.config.aes_blocks_per_cycle)
        return SimTime.from_cycles(cycles, self.config.aes_clock_hz)

    def inflation_time(self, req):
        """Link time spent moving IVs and tags rather than payload."""
        return SimTime.from_bytes(req.wire_size - req.payload_size, self.config.dma_raw_bandwidth_bytes_per_ns)

    def transfer_time(self, req):
        """
        The leading burst's DRAM latency is exposed; the remaining bursts
        stream alongside the link, so the slower of the two counts.
        """
        lead, rest = self.memory.stream_latency(self.bank, req.bank_offset, req.wire_size)
        link = SimTime.from_bytes(req.wire_size, self.config.dma_raw_bandwidth_bytes_per_ns)
        return lead + max(link, rest)

    def _account(self, req):
        crypto = req.crypto_mode != PLAIN
        transfer = self.transfer_time(req)
        aes = self.aes_time(req.wire_size) if crypto else ZERO
        self.stats.transfers += 1
        self.stats.bytes_moved += req.wire_size
        self.stats.transfer_time += transfer
        self.stats.aes_time += aes
        if crypto:
            self.stats.inflation_time += self.inflation_time(req)
        return transfer + aes

    def _open(self, key, raw, offset):
        try:
            return aead_decrypt(key, raw[:IV_SIZE], raw[IV_SIZE:-TAG_SIZE], raw[-TAG_SIZE:])
        except AuthenticationFailed:
            logger.warning("Bank %d block at %#x failed authentication" % (self.bank, offset))
            raise

    def dma_transfer(self, req):
        """
        Move the bytes described by ``req`` and return the latency of the
        transfer. A DECRYPT whose tag fails to verify zeroizes the
        destination buffer and raises ``AuthenticationFailed``.
        """
        crypto = req.crypto_mode != PLAIN
        key = self.key(req.key_slot) if crypto else None
        self.memory.check_range(self.bank, req.bank_offset, req.wire_size)
        self.local.check(req.local_offset, req.payload_size)

        if req.direction == BANK_READ:
            raw = self.memory.pim_read(self.bank, req.src, req.size)
            if crypto:
                try:
                    raw = self._open(key, raw, req.src)
                except AuthenticationFailed:
                    self.local.fill(req.dst, req.payload_size)
                    raise
            self.local.write(req.dst, raw)
        else:
            raw = self.local.read(req.src, req.size)
            if crypto:
                iv = key.iv_sequence(self.origin).next()
                ciphertext, tag = aead_encrypt(key, iv, raw)
                raw = iv + ciphertext + tag
            self.memory.pim_write(self.bank, req.dst, raw)
        return self._account(req)

    def fetch(self, offset, size, key_slot=SESSION):
        """
        DECRYPT one block from the bank into the engine's staging buffer
        and hand back ``(plaintext, latency)`` without touching local
        memory, so a block that fails to verify leaves it unchanged.
        """
        req = DmaRequest(offset, 0, size, BANK_READ, DECRYPT, key_slot)
        key = self.key(key_slot)
        self.memory.check_range(self.bank, offset, size)
        plaintext = self._open(key, self.memory.pim_read(self.bank, offset, size), offset)
        return plaintext, self._account(req)
