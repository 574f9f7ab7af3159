from occlab.cli import LabCommand


class Command(LabCommand):
    help = 'Train a goal-conditioned actor-critic and evaluate goal reaching'
    subcommand = 'gcrl'
