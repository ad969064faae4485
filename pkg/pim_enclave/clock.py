"""
Virtual time for the simulator.

Time is kept as an exact rational number of nanoseconds, so latencies such
as 0.01 ns or one cycle of a 300 MHz clock (10/3 ns) accumulate without
drift, and identical runs end on bit-identical clocks on every platform.
"""
from decimal import Decimal
from fractions import Fraction
from functools import total_ordering

from pim_enclave.exceptions import SimTimeOverflow


# Unsigned 64-bit nanoseconds, a little under 585 years.
MAX_NANOSECONDS = 2 ** 64 - 1

NS_PER_SECOND = 10 ** 9


def _to_fraction(value):
    if isinstance(value, SimTime):
        return value.exact
    if isinstance(value, float):
        # Go through the shortest repr so 0.01 means 1/100, not the
        # nearest binary double.
        return Fraction(repr(value))
    return Fraction(value)


@total_ordering
class SimTime(object):
    """
    An immutable, non-negative point or span of simulated time. Accepts
    integers, ``Fraction``, ``Decimal`` or decimal strings, all read as
    nanoseconds.
    """
    __slots__ = ('_ns',)

    def __init__(self, nanoseconds=0):
        value = _to_fraction(nanoseconds)
        if value < 0:
            raise ValueError("Simulated time cannot be negative (%s ns)" % value)
        if value > MAX_NANOSECONDS:
            raise SimTimeOverflow("%s ns exceeds the representable range" % value)
        self._ns = value

    @classmethod
    def from_cycles(cls, cycles, clock_hz):
        """The duration of ``cycles`` ticks of a ``clock_hz`` clock."""
        return cls(Fraction(cycles * NS_PER_SECOND, clock_hz))

    @classmethod
    def from_bytes(cls, size, bytes_per_ns):
        """The time to move ``size`` bytes at ``bytes_per_ns``."""
        return cls(Fraction(size) / _to_fraction(bytes_per_ns))

    @property
    def exact(self):
        """Nanoseconds as an exact ``Fraction``."""
        return self._ns

    @property
    def nanoseconds(self):
        """Whole elapsed nanoseconds, rounded down."""
        return self._ns.numerator // self._ns.denominator

    @property
    def picoseconds(self):
        return self._ns * 1000

    def format_ns(self, places=3):
        """
        Render as a decimal nanosecond string, rounded half-even to
        ``places`` fractional digits.
        """
        # round() on a Fraction rounds half to even, exactly.
        scaled = round(self._ns * 10 ** places)
        return str(Decimal(scaled).scaleb(-places))

    def __add__(self, other):
        if not isinstance(other, SimTime):
            return NotImplemented
        return SimTime(self._ns + other._ns)

    def __sub__(self, other):
        if not isinstance(other, SimTime):
            return NotImplemented
        return SimTime(self._ns - other._ns)

    def __mul__(self, count):
        if isinstance(count, SimTime):
            return NotImplemented
        return SimTime(self._ns * count)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, SimTime):
            return self._ns / other._ns
        return SimTime(self._ns / _to_fraction(other))

    def __eq__(self, other):
        if isinstance(other, SimTime):
            return self._ns == other._ns
        return NotImplemented

    def __lt__(self, other):
        if isinstance(other, SimTime):
            return self._ns < other._ns
        return NotImplemented

    def __hash__(self):
        return hash(self._ns)

    def __bool__(self):
        return self._ns != 0

    def __repr__(self):
        return 'SimTime(%s ns)' % self._ns

    def __str__(self):
        return '%s ns' % self.format_ns()


ZERO = SimTime(0)


def advance(clock, delta):
    """
    Return the time ``delta`` after ``clock``. Both arguments may be
    ``SimTime`` values or anything ``SimTime`` accepts as nanoseconds.
    """
    if not isinstance(clock, SimTime):
        clock = SimTime(clock)
    if not isinstance(delta, SimTime):
        delta = SimTime(delta)
    return clock + delta


def latest(*times):
    """Join point: the latest of the given times."""
    return max(times) if times else ZERO


class Clock(object):
    """
    A component's running clock. It only ever moves forward, either by a
    duration (``advance``) or by catching up with another component
    (``advance_to``).
    """
    def __init__(self, name, start=ZERO):
        self.name = name
        self.now = start

    def advance(self, delta):
        self.now = advance(self.now, delta)
        return self.now

    def advance_to(self, when):
        if when > self.now:
            self.now = when
        return self.now

    def reset(self):
        self.now = ZERO

    def __repr__(self):
        return '<Clock %s at %s>' % (self.name, self.now)
