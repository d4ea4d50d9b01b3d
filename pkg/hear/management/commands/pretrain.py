from ...training_service import run_pretraining
from ..base import HearCommand


class Command(HearCommand):
    help = "Self-supervised pretraining; writes pretrain.ckpt and pretrain_log.txt to --output-dir"

    def run(self, config, options):
        result = run_pretraining(config)
        if result.history:
            self.stdout.write(result.history[-1].log_line())
        self.stdout.write(f"checkpoint {result.checkpoint_path}")
