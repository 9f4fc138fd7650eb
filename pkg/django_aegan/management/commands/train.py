from pathlib import Path
from typing import Dict

from django_aegan.management.commands._base import ExperimentCommand
from django_aegan.serializers import COMMAND_TRAIN, ExperimentConfig
from django_aegan.training import TrainingResult, train, train_cross_validation
from django_aegan.volumes import DatasetManifest, write_csv


CHECKPOINT_FILENAME = 'model.pt'


def write_logs(result: TrainingResult, run_dir: Path, suffix: str = '') -> None:
    """
    Epoch log in `train_log*.csv`, per-step losses in `steps*.csv`.
    """
    trainer = result.trainer
    write_csv(result.log, run_dir / 'train_log{}.csv'.format(suffix), trainer.log_columns())
    write_csv(trainer.step_log, run_dir / 'steps{}.csv'.format(suffix), trainer.step_columns())


class Command(ExperimentCommand):
    help = 'Trains the residual GAN on a phantom dataset.'
    command_name = COMMAND_TRAIN

    def run(self, config: ExperimentConfig, run_dir: Path, options) -> Dict:
        cfg = config.train
        manifest = DatasetManifest.load(config.manifest)

        if cfg.cv_folds:
            results = train_cross_validation(manifest, cfg, run_dir)
            for number, result in enumerate(results, start=1):
                write_logs(result, run_dir, '_fold{}'.format(number))
            self.success('Trained {} folds in {}'.format(len(results), run_dir))
            return {
                'folds': len(results),
                'checkpoints': [str(r.checkpoint) for r in results],
                'drfs': results[0].drfs,
                'ablation': config.ablation,
            }

        result = train(manifest, cfg, run_dir / CHECKPOINT_FILENAME)
        write_logs(result, run_dir)
        summary = {
            'checkpoint': str(result.checkpoint),
            'epochs': len(result.log),
            'steps': result.trainer.step,
            'drfs': result.drfs,
            'ablation': config.ablation,
            'final': result.log[-1] if result.log else {},
        }
        self.success('Trained {} steps over {} epochs on DRFs {}; checkpoint {}'.format(
            summary['steps'], summary['epochs'], result.drfs, result.checkpoint
        ))
        return summary
