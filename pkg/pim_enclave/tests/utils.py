from pim_enclave import sdk
from pim_enclave.clock import ZERO
from pim_enclave.crypto import HOST_ORIGIN
from pim_enclave.crypto import aead_encrypt


def reference_dram_latency(config, accesses, open_row=None):
    """
    Walk ``(offset, size)`` accesses to a single bank one burst at a
    time. Returns the total latency and the row left open.
    """
    total = ZERO
    for offset, size in accesses:
        first = offset // config.burst_bytes
        last = (offset + size - 1) // config.burst_bytes
        for burst in range(first, last + 1):
            row = burst * config.burst_bytes // config.row_buffer_bytes
            if row != open_row:
                total += config.row_miss_ns
                open_row = row
            total += config.tBURST_ns
    return total, open_row


def seal_image(key, image):
    """A kernel image sealed the way the host ships it: ``iv || ciphertext || tag``."""
    iv = key.iv_sequence(HOST_ORIGIN).next()
    ciphertext, tag = aead_encrypt(key, iv, image.to_bytes())
    return iv + ciphertext + tag


def established(sim, bank=0, data_key=None):
    """A handle on ``bank`` with a verified session."""
    handle = sdk.init(sim, bank)
    sdk.attest_and_establish(handle, sim.trusted_ek(bank), data_key=data_key)
    return handle
