import json


def ceil_div(numerator, denominator):
    """Integer division rounding towards positive infinity."""
    return -(-numerator // denominator)


def round_up(value, multiple):
    """Round ``value`` up to the next multiple of ``multiple``."""
    return ceil_div(value, multiple) * multiple


def is_power_of_two(value):
    """
    Return ``True`` if the integer ``value`` is a positive power of
    two, and ``False`` otherwise.
    """
    return value > 0 and (value & (value - 1)) == 0


def next_power_of_two(value):
    """Return the smallest power of two greater than or equal to ``value``."""
    if value <= 1:
        return 1
    return 1 << (value - 1).bit_length()


def chunks(data, size):
    """Split ``data`` into consecutive pieces of at most ``size`` bytes."""
    return [data[i:i + size] for i in range(0, len(data), size)]


def pad(data, size):
    """Zero-pad ``data`` on the right to exactly ``size`` bytes."""
    if len(data) > size:
        raise ValueError("%d bytes do not fit in %d" % (len(data), size))
    return bytes(data) + bytes(size - len(data))


def dump_params(params):
    """
    Serialise a parameter record to its canonical byte form. Keys are
    sorted and separators compact so identical records always produce
    identical bytes.
    """
    return json.dumps(params, sort_keys=True, separators=(',', ':')).encode('utf-8')


def load_params(content):
    """
    Parse a parameter record produced by ``dump_params()``. Trailing
    zero padding from the parameter frames is ignored.
    """
    return json.loads(bytes(content).rstrip(b'\x00').decode('utf-8'))

