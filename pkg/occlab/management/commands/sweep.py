from occlab.cli import LabCommand


class Command(LabCommand):
    help = 'Final occupancy error against dataset size'
    subcommand = 'sweep'
