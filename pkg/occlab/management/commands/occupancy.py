from occlab.cli import LabCommand


class Command(LabCommand):
    help = 'Occupancy-error curves of every estimator on one shared dataset per seed'
    subcommand = 'occupancy'
