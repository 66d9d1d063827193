"""
UWB variational estimation toolkit - command-line entry point.
Batch ESGVI and robust MAP estimation on SE(2) with non-Gaussian UWB ranges.
"""
from cli.commands import cli

# Main entry point
if __name__ == '__main__':
    cli()
