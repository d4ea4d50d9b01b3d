"""
Shared plumbing for the HEAR management commands.

Every command accepts ``--config FILE`` plus one flag per RunConfig key;
flags override file values. HEAR errors become CommandError with the exit
codes 1 (runtime failure), 2 (configuration, parse or lookup failure) and
3 (gradient check failure).
"""
import logging

from django.core.management.base import BaseCommand, CommandError

from ..config import RunConfig
from ..exceptions import ConfigError, DictionaryParseError, DuplicateNameError, HearError, ManifestError

logger = logging.getLogger(__name__)

EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_GRADCHECK = 3

CONFIG_ERRORS = (ConfigError, DictionaryParseError, DuplicateNameError, ManifestError)


class HearCommand(BaseCommand):
    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument('--config', default=None, help="flat 'key = value' run configuration file")
        group = parser.add_argument_group('run configuration (overrides --config)')
        for key, default, help_text in RunConfig.describe():
            group.add_argument(
                f"--{key.replace('_', '-')}",
                dest=key,
                default=None,
                metavar=key.upper(),
                help=f"{help_text} (default: {default})",
            )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def load_run_config(self, options) -> RunConfig:
        overrides = {key: options.get(key) for key in RunConfig.keys()}
        try:
            return RunConfig.from_sources(options.get('config'), overrides)
        except ConfigError as e:
            raise CommandError(str(e), returncode=EXIT_CONFIG)

    def handle(self, *args, **options):
        config = self.load_run_config(options)
        try:
            self.run(config, options)
        except CommandError:
            raise
        except CONFIG_ERRORS as e:
            logger.error(f"{self.__module__.rsplit('.', 1)[-1]}: {e}")
            raise CommandError(str(e), returncode=EXIT_CONFIG)
        except (HearError, OSError) as e:
            logger.error(f"{self.__module__.rsplit('.', 1)[-1]}: {e}")
            raise CommandError(str(e), returncode=EXIT_RUNTIME)
        except Exception as e:
            logger.exception(f"{self.__module__.rsplit('.', 1)[-1]} failed unexpectedly")
            raise CommandError(f"{type(e).__name__}: {e}", returncode=EXIT_RUNTIME)

    def run(self, config: RunConfig, options) -> None:
        raise NotImplementedError
