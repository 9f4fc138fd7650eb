from pathlib import Path
from typing import Dict

from django_aegan.evaluation import MetricsReport
from django_aegan.exceptions import ResolutionError
from django_aegan.management.commands._base import ExperimentCommand
from django_aegan.plotting import plot_reports
from django_aegan.serializers import COMMAND_PLOT, ExperimentConfig


class Command(ExperimentCommand):
    help = 'Renders PNG charts from one or more metrics reports.'
    command_name = COMMAND_PLOT
    config_required = False

    def add_arguments(self, parser):
        parser.add_argument('reports', nargs='*', help='metrics.json files written by eval.')
        super().add_arguments(parser)

    def run(self, config: ExperimentConfig, run_dir: Path, options) -> Dict:
        reports = []
        for name in options.get('reports') or []:
            path = Path(name)
            if path.is_dir():
                path = path / 'metrics.json'
            if not path.exists():
                raise ResolutionError('Report {} does not exist.'.format(path))
            reports.append(MetricsReport.load(path))

        written = plot_reports(reports, run_dir)
        for path in written:
            self.stdout.write(str(path))
        self.success('Wrote {} charts to {}'.format(len(written), run_dir))
        return {'reports': list(options.get('reports') or []), 'charts': [p.name for p in written]}
