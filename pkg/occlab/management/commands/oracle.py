from occlab.cli import LabCommand


class Command(LabCommand):
    help = 'Exact occupancy under the uniform policy and known-model Bellman iteration'
    subcommand = 'oracle'
