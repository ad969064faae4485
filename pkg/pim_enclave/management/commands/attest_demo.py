from pim_enclave import sdk
from pim_enclave.engine import Simulator
from pim_enclave.exceptions import TokenVerificationError
from pim_enclave.management.base import SimulationCommand


class Command(SimulationCommand):
    """
    Attest a bank, establish a session and tear it down again, then show
    that a host trusting the wrong endorsement key refuses to send keys.
    """
    help = "Walk through attestation and session establishment with a bank"

    def add_arguments(self, parser):
        super(Command, self).add_arguments(parser)
        parser.add_argument('--bank', type=int, default=0)

    def run(self, config, **options):
        sim = Simulator(config)
        bank = options['bank']
        handle = sdk.init(sim, bank)
        try:
            token = sdk.attest_and_establish(handle, sim.trusted_ek(bank))
            self.stdout.write("bank=%d device_id=%d version=%d verified=yes" % (bank, token.device_id, token.version))
            self.stdout.write("phase=%s" % sim.bank(bank).controller.phase)
            sdk.destroy(handle)
            self.stdout.write("phase=%s" % sim.bank(bank).controller.phase)
        finally:
            sdk.release(handle)

        impostor = (bank + 1) % config.n_banks
        if impostor == bank:
            return
        handle = sdk.init(sim, bank)
        try:
            sdk.attest_and_establish(handle, sim.trusted_ek(impostor))
        except TokenVerificationError as e:
            self.stdout.write("bank=%d with the EK of bank %d verified=no (%s)" % (bank, impostor, e.code))
        finally:
            sdk.release(handle)
