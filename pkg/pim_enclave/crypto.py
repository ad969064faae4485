"""
Cryptographic primitives: AES-128-GCM, kernel measurement, endorsement
signatures and session-key wrapping.
"""
import hashlib
import logging
import os
import struct

from cryptography.exceptions import InvalidSignature
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519
from cryptography.hazmat.primitives.asymmetric import x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from pim_enclave.exceptions import AuthenticationFailed


logger = logging.getLogger(__name__)

KEY_SIZE = 16
IV_SIZE = 12
TAG_SIZE = 16
DIGEST_SIZE = 32
PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64
WRAPPED_KEY_SIZE = PUBLIC_KEY_SIZE + KEY_SIZE + TAG_SIZE

HOST_ORIGIN = 0x00000001
DEVICE_ORIGIN = 0x80000000

WRAP_INFO = b'pim-enclave session key wrap'


class SymmetricKey(object):
    """
    A 16-byte AES-128 key held in a mutable buffer so it can be
    overwritten in place with ``zeroize()``.
    """
    def __init__(self, material):
        if len(material) != KEY_SIZE:
            raise ValueError("AES-128 keys are %d bytes, not %d" % (KEY_SIZE, len(material)))
        self._material = bytearray(material)
        self._sequences = {}
        self._zeroized = False

    @classmethod
    def generate(cls):
        return cls(AESGCM.generate_key(bit_length=128))

    def iv_sequence(self, origin, start=0):
        """
        The IV counter this key uses for ``origin``, created on first
        use at ``start``.
        """
        if origin not in self._sequences:
            self._sequences[origin] = IvSequence(origin, start)
        return self._sequences[origin]

    @property
    def material(self):
        return bytes(self._material)

    @property
    def zeroized(self):
        return self._zeroized

    def zeroize(self):
        for i in range(len(self._material)):
            self._material[i] = 0
        self._zeroized = True

    def __eq__(self, other):
        if isinstance(other, SymmetricKey):
            return self._material == other._material
        return NotImplemented

    def __hash__(self):
        return id(self)

    def __repr__(self):
        return '<SymmetricKey%s>' % (' zeroized' if self.zeroized else '')


class IvSequence(object):
    """
    A monotone source of unique IVs: a 4-byte origin followed by an
    8-byte big-endian counter. The host and each bank use a distinct
    origin so IVs never collide under a key they share.
    """
    def __init__(self, origin, start=0):
        self.origin = origin
        self.counter = start

    def next(self):
        iv = struct.pack('>IQ', self.origin, self.counter)
        self.counter += 1
        return iv

    __next__ = next

    def __iter__(self):
        return self


def device_origin(bank):
    return DEVICE_ORIGIN | bank


def aead_encrypt(key, iv, plaintext, aad=b''):
    """
    AES-128-GCM encryption. Returns ``(ciphertext, tag)`` with the
    ciphertext the same length as ``plaintext``.
    """
    if len(iv) != IV_SIZE:
        raise ValueError("GCM IVs are %d bytes" % IV_SIZE)
    sealed = AESGCM(key.material).encrypt(bytes(iv), bytes(plaintext), bytes(aad) or None)
    return sealed[:-TAG_SIZE], sealed[-TAG_SIZE:]


def aead_decrypt(key, iv, ciphertext, tag, aad=b''):
    """
    AES-128-GCM decryption. Raises ``AuthenticationFailed`` unless the
    tag verifies over ``aad`` and ``ciphertext``.
    """
    if len(iv) != IV_SIZE or len(tag) != TAG_SIZE:
        raise AuthenticationFailed("Malformed IV or tag")
    try:
        return AESGCM(key.material).decrypt(bytes(iv), bytes(ciphertext) + bytes(tag), bytes(aad) or None)
    except InvalidTag:
        raise AuthenticationFailed("AEAD tag does not verify")


def measure(blob):
    """The SHA-256 digest of ``blob``."""
    return hashlib.sha256(bytes(blob)).digest()


def _raw(public_key):
    return public_key.public_bytes(encoding=serialization.Encoding.Raw,
                                   format=serialization.PublicFormat.Raw)


class EndorsementKeyPair(object):
    """
    A device's root endorsement key (Ed25519) together with the X25519
    key session keys are wrapped to. The private halves are only used by
    ``ek_sign()`` and ``unwrap_session_key()``.

    With a ``seed`` the keys are derived deterministically from the seed
    and ``device_id``; otherwise they are freshly generated.
    """
    def __init__(self, device_id, seed=None):
        self.device_id = device_id
        if seed is None:
            signing = ed25519.Ed25519PrivateKey.generate()
            agreement = x25519.X25519PrivateKey.generate()
        else:
            base = b'%d:%d' % (seed, device_id)
            signing = ed25519.Ed25519PrivateKey.from_private_bytes(hashlib.sha256(b'ek:' + base).digest())
            agreement = x25519.X25519PrivateKey.from_private_bytes(hashlib.sha256(b'kx:' + base).digest())
        self.__signing_key = signing
        self.__agreement_key = agreement
        self.public_key = _raw(signing.public_key())
        self.agreement_public_key = _raw(agreement.public_key())

    def _sign(self, message):
        return self.__signing_key.sign(bytes(message))

    def _exchange(self, peer_public):
        return self.__agreement_key.exchange(x25519.X25519PublicKey.from_public_bytes(peer_public))

    def __repr__(self):
        return '<EndorsementKeyPair device=%d>' % self.device_id


def ek_sign(ek, message):
    return ek._sign(message)


def ek_verify(public_key, message, signature):
    """
    Return ``True`` if ``signature`` is a valid Ed25519 signature of
    ``message`` under the raw 32-byte ``public_key``, ``False``
    otherwise.
    """
    try:
        ed25519.Ed25519PublicKey.from_public_bytes(bytes(public_key)).verify(bytes(signature), bytes(message))
    except (InvalidSignature, ValueError):
        return False
    return True


def _wrapping_key(shared_secret):
    hkdf = HKDF(algorithm=hashes.SHA256(), length=KEY_SIZE, salt=None, info=WRAP_INFO)
    return SymmetricKey(hkdf.derive(shared_secret))


def wrap_session_key(device_public_key, session_key):
    """
    Encrypt ``session_key`` to the device's X25519 public key. Each call
    uses a fresh ephemeral key, so wrapping the same key twice yields
    different blobs of the same fixed size.
    """
    ephemeral = x25519.X25519PrivateKey.generate()
    ephemeral_public = _raw(ephemeral.public_key())
    shared = ephemeral.exchange(x25519.X25519PublicKey.from_public_bytes(bytes(device_public_key)))
    # The wrapping key is single-use, so a fixed IV is safe.
    ciphertext, tag = aead_encrypt(_wrapping_key(shared), bytes(IV_SIZE), session_key.material, ephemeral_public)
    return ephemeral_public + ciphertext + tag


def unwrap_session_key(ek, wrapped):
    """Recover a session key wrapped to ``ek``; raises ``AuthenticationFailed``."""
    wrapped = bytes(wrapped)
    if len(wrapped) != WRAPPED_KEY_SIZE:
        raise AuthenticationFailed("Wrapped key is %d bytes" % len(wrapped))
    ephemeral_public = wrapped[:PUBLIC_KEY_SIZE]
    ciphertext = wrapped[PUBLIC_KEY_SIZE:PUBLIC_KEY_SIZE + KEY_SIZE]
    tag = wrapped[PUBLIC_KEY_SIZE + KEY_SIZE:]
    try:
        shared = ek._exchange(ephemeral_public)
    except ValueError:
        raise AuthenticationFailed("Wrapped key carries an invalid ephemeral key")
    return SymmetricKey(aead_decrypt(_wrapping_key(shared), bytes(IV_SIZE), ciphertext, tag, ephemeral_public))
