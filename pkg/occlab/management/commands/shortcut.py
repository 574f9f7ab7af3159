from occlab.cli import LabCommand


class Command(LabCommand):
    help = 'Shortcut study: greedy path length on long/short skewed data'
    subcommand = 'shortcut'
