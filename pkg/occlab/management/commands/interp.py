from occlab.cli import LabCommand


class Command(LabCommand):
    help = 'Interpolate learned representations between a start state and a goal'
    subcommand = 'interp'
