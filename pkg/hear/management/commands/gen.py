from ...container import DatasetContainer
from ...synthetic_data import bandpower_oracle
from ...training_service import run_dictionary, run_generate
from ..base import HearCommand


class Command(HearCommand):
    help = "Generate the synthetic hemisphere-planted corpus into --data-dir"

    def add_command_arguments(self, parser):
        parser.add_argument('--oracle', action='store_true', help="also report the band-power oracle accuracy")

    def run(self, config, options):
        subsets = run_generate(config)
        for info in subsets:
            self.stdout.write(info.manifest_line())
        if options.get('oracle'):
            result = bandpower_oracle(DatasetContainer(config.data_dir), run_dictionary(config), config.classes)
            self.stdout.write(f"oracle accuracy {result.accuracy:.4f}")
