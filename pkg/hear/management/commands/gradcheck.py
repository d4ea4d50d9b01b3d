from django.core.management.base import CommandError

from ...gradcheck import run_standard_checks, summarize_reports
from ..base import EXIT_GRADCHECK, HearCommand


class Command(HearCommand):
    help = "Compare analytic gradients with central finite differences at float64"

    def run(self, config, options):
        reports = run_standard_checks(seed=config.seed)
        for report in reports:
            status = 'ok' if report.passed else 'FAIL'
            self.stdout.write(f"{report.name} {report.max_relative_error:.3e} {status}")
        worst, passed = summarize_reports(reports)
        self.stdout.write(f"max relative error {worst:.3e}")
        if not passed:
            raise CommandError(f"gradient check failed: {worst:.3e} >= {reports[0].tolerance:g}",
                               returncode=EXIT_GRADCHECK)
