#!/usr/bin/env python
"""Entry point for the occupancy laboratory: `python manage.py <subcommand> --config ...`."""
import os
import sys


def main():
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'core.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Install the lab's requirements "
            "(pip install -r requirements.txt) into the active environment."
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == '__main__':
    main()
