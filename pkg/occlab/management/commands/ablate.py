from occlab.cli import LabCommand


class Command(LabCommand):
    help = 'Loss family / weight scheme / negatives ablation of the TD estimator'
    subcommand = 'ablate'
