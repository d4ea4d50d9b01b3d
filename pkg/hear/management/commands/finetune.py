from ...training_service import run_finetune
from ..base import HearCommand


class Command(HearCommand):
    help = "Fine-tune a classifier with --seed (optionally from --checkpoint) and report test metrics"

    def run(self, config, options):
        result = run_finetune(config)
        for name, value in result.metrics.items():
            self.stdout.write(f"{name} {value:.6f}")
        self.stdout.write(f"checkpoint {result.checkpoint_path}")
