from typing import Dict

from django_aegan.management.commands.train import Command as TrainCommand
from django_aegan.serializers import COMMAND_ABLATE
from django_aegan.training import ABLATIONS


class Command(TrainCommand):
    help = 'Trains with a named ablation applied on top of the train block.'
    command_name = COMMAND_ABLATE

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--ablation',
            choices=sorted(ABLATIONS),
            help='Overrides the ablation named in the config.'
        )

    def overrides(self, options) -> Dict:
        data = super().overrides(options)
        if options.get('ablation'):
            data['ablation'] = options['ablation']
        return data
