import logging

from pim_enclave.channel import EnclaveController
from pim_enclave.clock import Clock
from pim_enclave.clock import latest
from pim_enclave.config import load_config
from pim_enclave.crypto import EndorsementKeyPair
from pim_enclave.exceptions import AddressOutOfRange
from pim_enclave.exceptions import BankBusy
from pim_enclave.memory import MemoryModule
from pim_enclave.memory import Tracer
from pim_enclave.pim import PimCore


logger = logging.getLogger(__name__)


class Bank(object):
    """A memory bank's device side: its PIM core and enclave controller."""
    def __init__(self, config, memory, index, ek):
        self.index = index
        self.core = PimCore(config, memory, index)
        self.controller = EnclaveController(config, self.core, ek)
        self.trusted_ek_public_key = ek.public_key

    @property
    def clock(self):
        return self.core.clock

    @property
    def engine(self):
        return self.core.engine


class Simulator(object):
    """
    The whole simulated system: one memory module, the host clock and one
    ``Bank`` per memory bank. Everything runs on the caller's thread;
    banks progress on their own clocks and meet the host at join points.

    Endorsement keys are derived from ``config.seed``, so two simulators
    built from the same configuration present the same device identities.
    """
    def __init__(self, config=None):
        self.config = config if config is not None else load_config()
        self.tracer = Tracer(self.config.trace_enabled)
        self.host_clock = Clock('host')
        self.memory = MemoryModule(self.config, tracer=self.tracer, clock=self.host_clock)
        self.banks = [Bank(self.config, self.memory, index, EndorsementKeyPair(index, seed=self.config.seed))
                      for index in range(self.config.n_banks)]
        self._clients = {}

    def bank(self, index):
        if not 0 <= index < self.config.n_banks:
            raise AddressOutOfRange("Bank %s does not exist" % index)
        return self.banks[index]

    def trusted_ek(self, index):
        """The EK public key of a bank, as distributed out of band."""
        return self.bank(index).trusted_ek_public_key

    def claim(self, index, client):
        """Register ``client`` as the single host enclave using a bank."""
        self.bank(index)
        if self._clients.get(index) is not None:
            raise BankBusy("Bank %d already has a client" % index)
        self._clients[index] = client
        logger.debug("Bank %d claimed" % index)

    def release(self, index, client):
        if self._clients.get(index) is client:
            del self._clients[index]

    def client(self, index):
        return self._clients.get(index)

    @property
    def now(self):
        """The latest point any component has reached."""
        return latest(self.host_clock.now, *[bank.clock.now for bank in self.banks])

    def join(self, indices=None):
        """Bring the host clock up to the completion of the given banks."""
        banks = self.banks if indices is None else [self.bank(i) for i in indices]
        return self.host_clock.advance_to(latest(*[bank.clock.now for bank in banks]))
