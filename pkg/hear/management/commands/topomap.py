from ...training_service import run_topomap
from ..base import HearCommand


class Command(HearCommand):
    help = "Export per-channel activation scores as CSV and an SVG scalp map"

    def add_command_arguments(self, parser):
        parser.add_argument('--signature', default=None, help="layout group to export (default: first)")
        parser.add_argument('--history', action='store_true',
                            help="fine-tune and record the scores after every epoch")

    def run(self, config, options):
        result = run_topomap(config, options.get('signature'), with_history=options.get('history', False))
        for name, score in zip(result.channel_names, result.scores):
            self.stdout.write(f"{name},{score:.6f}")
        self.stdout.write(f"csv {result.csv_path}")
        self.stdout.write(f"svg {result.svg_path}")
        if result.history_path is not None:
            self.stdout.write(f"history {result.history_path}")
