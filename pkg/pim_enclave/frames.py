"""
Fixed-size command frames.

Every frame on the control plane, in either direction and whatever its
outcome, is exactly ``FRAME_SIZE`` bytes::

    command_id (1) || sequence (8, big-endian) || payload (256) || tag (16)

Frames after session establishment are sealed with AES-GCM under the
session key, with ``sequence || command_id`` as associated data.
"""
import logging
import struct
from collections import namedtuple

from pim_enclave.crypto import TAG_SIZE
from pim_enclave.crypto import aead_decrypt
from pim_enclave.crypto import aead_encrypt
from pim_enclave.exceptions import FrameCapacityError
from pim_enclave.exceptions import MalformedFrame
from pim_enclave.utils import chunks
from pim_enclave.utils import dump_params
from pim_enclave.utils import pad


logger = logging.getLogger(__name__)

GET_TOKEN = 0x01
SET_SESSION_KEY = 0x02
SET_DATA_KEY = 0x03
OFFLOAD_KERNEL = 0x04
EXECUTE = 0x05
PROTECT = 0x06
DESTROY = 0x07
PARAMS = 0x08
RESULT = 0x09
ERROR = 0xFF

COMMAND_NAMES = {
    GET_TOKEN: 'GET_TOKEN',
    SET_SESSION_KEY: 'SET_SESSION_KEY',
    SET_DATA_KEY: 'SET_DATA_KEY',
    OFFLOAD_KERNEL: 'OFFLOAD_KERNEL',
    EXECUTE: 'EXECUTE',
    PROTECT: 'PROTECT',
    DESTROY: 'DESTROY',
    PARAMS: 'PARAMS',
    RESULT: 'RESULT',
    ERROR: 'ERROR',
}

# Commands a host may send.
HOST_COMMANDS = (GET_TOKEN, SET_SESSION_KEY, SET_DATA_KEY, OFFLOAD_KERNEL,
                 EXECUTE, PROTECT, DESTROY, PARAMS)

# Sent before a session key exists, so integrity comes from the
# signature or the key wrapping instead of the session AEAD.
BOOTSTRAP_COMMANDS = (GET_TOKEN, SET_SESSION_KEY)

PAYLOAD_SIZE = 256
HEADER = struct.Struct('>BQ')
FRAME_SIZE = HEADER.size + PAYLOAD_SIZE + TAG_SIZE

# IV prefixes of the two directions of the session channel.
HOST_TO_DEVICE = 0x10000000
DEVICE_TO_HOST = 0x20000000

STATUS = struct.Struct('>II')
STATUS_IDLE = 0
STATUS_DONE = 1
STATUS_FAULT = 2


class CommandFrame(namedtuple('CommandFrame', 'command_id sequence payload tag')):
    __slots__ = ()

    def to_bytes(self):
        return HEADER.pack(self.command_id, self.sequence) + self.payload + self.tag

    @classmethod
    def from_bytes(cls, data):
        data = bytes(data)
        if len(data) != FRAME_SIZE:
            raise MalformedFrame("Frame is %d bytes, not %d" % (len(data), FRAME_SIZE))
        command_id, sequence = HEADER.unpack_from(data)
        end = HEADER.size + PAYLOAD_SIZE
        return cls(command_id, sequence, data[HEADER.size:end], data[end:])

    @property
    def name(self):
        return COMMAND_NAMES.get(self.command_id, '0x%02X' % self.command_id)

    @property
    def is_error(self):
        return self.command_id == ERROR

    def __repr__(self):
        return '<CommandFrame %s seq=%d>' % (self.name, self.sequence)


def frame_iv(direction, sequence):
    return struct.pack('>IQ', direction, sequence)


def frame_aad(sequence, command_id):
    return struct.pack('>QB', sequence, command_id)


def seal(key, command_id, sequence, payload=b'', direction=HOST_TO_DEVICE):
    """Build an authenticated frame carrying ``payload``."""
    try:
        payload = pad(payload, PAYLOAD_SIZE)
    except ValueError:
        raise FrameCapacityError("%d bytes do not fit in one frame" % len(payload))
    ciphertext, tag = aead_encrypt(key, frame_iv(direction, sequence), payload,
                                   frame_aad(sequence, command_id))
    return CommandFrame(command_id, sequence, ciphertext, tag)


def unseal(key, frame, direction=HOST_TO_DEVICE):
    """
    Verify ``frame`` under ``key`` and return its plaintext payload.
    Raises ``AuthenticationFailed`` if anything about it was altered.
    """
    return aead_decrypt(key, frame_iv(direction, frame.sequence), frame.payload, frame.tag,
                        frame_aad(frame.sequence, frame.command_id))


def bootstrap(command_id, payload=b''):
    """An unauthenticated frame: sequence zero and an all-zero tag."""
    try:
        payload = pad(payload, PAYLOAD_SIZE)
    except ValueError:
        raise FrameCapacityError("%d bytes do not fit in one frame" % len(payload))
    return CommandFrame(command_id, 0, payload, bytes(TAG_SIZE))


def error_frame():
    """The single response every failure collapses into on the wire."""
    return CommandFrame(ERROR, 0, bytes(PAYLOAD_SIZE), bytes(TAG_SIZE))


def split_payload(content, frames=None):
    """
    Cut ``content`` into frame payloads. With ``frames`` the result is
    padded to exactly that many payloads, so the number of frames on the
    bus does not depend on the content.
    """
    content = bytes(content)
    pieces = chunks(content, PAYLOAD_SIZE) or [b'']
    if frames is not None:
        if len(content) > frames * PAYLOAD_SIZE:
            raise FrameCapacityError("%d bytes exceed %d frames of %d" % (len(content), frames, PAYLOAD_SIZE))
        pieces += [b''] * (frames - len(pieces))
    return [pad(piece, PAYLOAD_SIZE) for piece in pieces]


def params_payloads(params, frames=1):
    """Serialise a parameter record into exactly ``frames`` payloads."""
    return split_payload(dump_params(params), frames)
