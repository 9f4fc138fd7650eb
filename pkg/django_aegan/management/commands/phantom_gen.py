from pathlib import Path
from typing import Dict

from django_aegan.management.commands._base import ExperimentCommand, file_digest
from django_aegan.phantoms import build_dataset
from django_aegan.serializers import COMMAND_PHANTOM_GEN, ExperimentConfig
from django_aegan.volumes import DatasetManifest


class Command(ExperimentCommand):
    help = 'Generates a phantom dataset with its low-dose volumes and manifest.'
    command_name = COMMAND_PHANTOM_GEN

    def run(self, config: ExperimentConfig, run_dir: Path, options) -> Dict:
        dataset = config.dataset
        manifest = build_dataset(
            n_subjects=dataset['n_subjects'],
            drfs=dataset['drfs'],
            template=config.phantom,
            seed=dataset['seed'],
            out_dir=run_dir,
            volume_format=dataset['volume_format'],
            ratios=dataset['ratios'],
            workers=dataset['workers']
        )

        manifest_path = run_dir / DatasetManifest.FILENAME
        size = sum(
            path.stat().st_size
            for entry in manifest.entries
            for path in (run_dir / entry.subject).iterdir()
        )
        summary = {
            'subjects': len(manifest.entries),
            'drfs': manifest.drfs(),
            'bytes': size,
            'manifest': str(manifest_path),
            'manifest_sha256': file_digest(manifest_path),
        }
        self.success('Generated {} subjects x DRFs {} ({} bytes) in {}'.format(
            summary['subjects'], summary['drfs'], size, run_dir
        ))
        return summary
