from occlab.cli import LabCommand


class Command(LabCommand):
    help = 'Stitching study: held-out (start, goal) pairs on Z-path data'
    subcommand = 'stitch'
