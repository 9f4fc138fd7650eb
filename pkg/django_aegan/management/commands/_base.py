import hashlib
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, Optional

import torch
from django.core.management.base import BaseCommand, CommandError
from django.utils import timezone

from django_aegan.conf import aegan_settings
from django_aegan.exceptions import AeganError, DataError
from django_aegan.models import ExperimentRun
from django_aegan.serializers import (
    ExperimentConfig,
    ExperimentRunSerializer,
    load_config,
    validate_config,
)


logger = logging.getLogger(__name__)

CONFIG_FILENAME = 'config.json'
RUN_FILENAME = 'run.json'


def _dump(data, path: Path) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str), encoding='utf-8')
    return path


def config_digest(echo: Dict) -> str:
    return hashlib.sha256(json.dumps(echo, sort_keys=True).encode('utf-8')).hexdigest()


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class ExperimentCommand(BaseCommand):
    """
    Shared surface of the experiment commands: loads and validates the
    config, prepares the run directory with its frozen config echo, keeps
    the run registry up to date and maps app errors to exit codes.
    """
    command_name = ''
    config_required = True
    path_keys = ('manifest', 'checkpoint')

    def add_arguments(self, parser):
        parser.add_argument(
            '--config',
            required=self.config_required,
            help='Path of the JSON experiment config.'
        )
        parser.add_argument('--seed', type=int, help='Overrides the top-level seed of the config.')
        parser.add_argument('--out', help='Run directory; defaults to a config-derived folder in the cache.')
        parser.add_argument(
            '--deterministic',
            action='store_true',
            help='Requests deterministic torch kernels.'
        )

    def overrides(self, options) -> Dict:
        data = {}
        if options.get('seed') is not None:
            data['seed'] = options['seed']
        return data

    def load(self, options) -> ExperimentConfig:
        overrides = self.overrides(options)
        if options.get('config'):
            config = load_config(options['config'], self.command_name, overrides)
        else:
            config = validate_config(dict({'schema_version': 1}, **overrides), self.command_name)

        if options.get('deterministic') and config.train is not None:
            config.train = replace(config.train, deterministic=True)

        # the echo must point at the same files from any working directory
        blocks = [(config, self.path_keys), (config.eval, ('compare_with', 'folds', 'baseline_folds'))]
        if config.train is not None:
            blocks.append((config.train, ('pretrained_encoder',)))
        for block, keys in blocks:
            for key in keys:
                if getattr(block, key, None):
                    setattr(block, key, str(Path(getattr(block, key)).resolve()))
        return config

    def run_dir(self, config: ExperimentConfig, options) -> Path:
        out = options.get('out') or config.out
        if out:
            return Path(out)
        digest = config_digest(config.to_dict())[:12]
        return aegan_settings.CACHE_DIR / self.command_name / digest

    def start(self, config: ExperimentConfig, run_dir: Path) -> Optional[ExperimentRun]:
        if not aegan_settings.RECORD_RUNS:
            return None
        return ExperimentRun.objects.create(
            command=self.command_name,
            seed=config.seed,
            run_dir=str(run_dir),
            config=config.to_dict()
        )

    def finish(self, record: Optional[ExperimentRun], config: ExperimentConfig, run_dir: Path,
               summary: Dict, error: str = '') -> None:
        status = ExperimentRun.STATUS_FAILED if error else ExperimentRun.STATUS_FINISHED
        if record is not None:
            record.status = status
            record.summary = summary
            record.error = error
            record.finished_at = timezone.now()
            record.save()
            echo = ExperimentRunSerializer(record).data
        else:
            echo = {
                'command': self.command_name,
                'status': status,
                'seed': config.seed,
                'run_dir': str(run_dir),
                'config': config.to_dict(),
                'summary': summary,
                'error': error,
            }
        _dump(echo, run_dir / RUN_FILENAME)

    def handle(self, *args, **options):
        try:
            config = self.load(options)
            run_dir = self.run_dir(config, options)
            run_dir.mkdir(parents=True, exist_ok=True)
            _dump(config.to_dict(), run_dir / CONFIG_FILENAME)

            deterministic = torch.are_deterministic_algorithms_enabled()
            if options.get('deterministic'):
                torch.use_deterministic_algorithms(True, warn_only=True)
            torch.manual_seed(config.seed)

            record = self.start(config, run_dir)
            try:
                summary = self.run(config, run_dir, options)
            except (AeganError, OSError) as e:
                self.finish(record, config, run_dir, {}, error=str(e))
                raise
            finally:
                torch.use_deterministic_algorithms(deterministic)
            self.finish(record, config, run_dir, summary)
        except AeganError as e:
            raise CommandError(str(e), returncode=e.exit_code)
        except OSError as e:
            # unreadable or unwritable files count as data errors
            raise CommandError(str(e), returncode=DataError.exit_code)

        logger.debug('%s finished in %s', self.command_name, run_dir)

    def run(self, config: ExperimentConfig, run_dir: Path, options) -> Dict:
        raise NotImplementedError

    def success(self, message: str) -> None:
        self.stdout.write(self.style.SUCCESS(message))
