from pathlib import Path
from typing import Dict

from django_aegan.management.commands._base import ExperimentCommand
from django_aegan.pretraining import LOG_COLUMNS, pretrain_encoder
from django_aegan.serializers import COMMAND_PRETRAIN, ExperimentConfig
from django_aegan.volumes import DatasetManifest, write_csv


CHECKPOINT_FILENAME = 'encoder.pt'
LOG_FILENAME = 'ssp_log.csv'


class Command(ExperimentCommand):
    help = 'Pre-trains the Pixel-Net encoder with the self-supervised tasks.'
    command_name = COMMAND_PRETRAIN

    def run(self, config: ExperimentConfig, run_dir: Path, options) -> Dict:
        cfg = config.ssp
        manifest = DatasetManifest.load(config.manifest)
        result = pretrain_encoder(manifest, cfg, run_dir / CHECKPOINT_FILENAME)

        columns = ['step'] + [LOG_COLUMNS[task] for task in cfg.tasks] + ['total']
        write_csv(result.log, run_dir / LOG_FILENAME, columns)

        summary = {
            'checkpoint': str(result.checkpoint),
            'samples': result.samples,
            'steps': len(result.log),
            'tasks': list(cfg.tasks),
            'final_loss': result.log[-1]['total'] if result.log else None,
        }
        self.success('Pre-trained {} steps on {} patches; encoder saved to {}'.format(
            summary['steps'], result.samples, result.checkpoint
        ))
        return summary
