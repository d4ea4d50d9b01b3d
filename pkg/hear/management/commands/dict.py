from pathlib import Path

from django.core.management.base import CommandError

from ...channel_dictionary import load_dictionary, lookup, validate_dictionary_file
from ..base import EXIT_CONFIG, HearCommand


class Command(HearCommand):
    help = "Validate the global electrode dictionary or resolve a channel label against it"

    def add_command_arguments(self, parser):
        parser.add_argument('--lookup', metavar='NAME', default=None, help="raw channel label to resolve")
        parser.add_argument('--validate', metavar='FILE', default=None, help="dictionary file to check line by line")

    def run(self, config, options):
        if options.get('validate'):
            self.validate(Path(options['validate']))
            return

        path = Path(config.dictionary_path)
        if not path.exists():
            raise CommandError(f"dictionary {path} does not exist", returncode=EXIT_CONFIG)
        dictionary = load_dictionary(path)

        name = options.get('lookup')
        if name is None:
            self.stdout.write(f"{len(dictionary)} electrodes in {path}")
            return
        entry = lookup(dictionary, name)
        if entry is None:
            raise CommandError(f"{name}: not found", returncode=EXIT_CONFIG)
        self.stdout.write(entry.describe())

    def validate(self, path: Path):
        if not path.exists():
            raise CommandError(f"dictionary {path} does not exist", returncode=EXIT_CONFIG)
        problems = validate_dictionary_file(path)
        for problem in problems:
            self.stderr.write(f"{path}: {problem}")
        if problems:
            raise CommandError(f"{path}: {len(problems)} problem(s)", returncode=EXIT_CONFIG)
        self.stdout.write(f"{path}: ok")
