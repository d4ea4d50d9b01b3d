from ...training_service import RESULTS_FILE, TRANSFER_FILE, output_path, run_evaluation, run_transfer
from ..base import HearCommand


class Command(HearCommand):
    help = "Run the split/fine-tune/test protocol over --seeds and write the results table"

    def add_command_arguments(self, parser):
        parser.add_argument('--transfer', action='store_true',
                            help="also fine-tune on one layout group and test on another, both directions")

    def run(self, config, options):
        summaries = run_evaluation(config)
        for name, summary in summaries.items():
            self.stdout.write(f"{name} {summary.mean:.4f} +/- {summary.std:.4f}")
        self.stdout.write(f"results {output_path(config, RESULTS_FILE)}")

        if options.get('transfer'):
            for direction, metrics in run_transfer(config).items():
                self.stdout.write(f"{direction} balanced_accuracy {metrics['balanced_accuracy']:.4f}")
            self.stdout.write(f"transfer {output_path(config, TRANSFER_FILE)}")
