# click command groups

import click

from library.manifest import atomic_write, canonical_json


def emit(text, out=None):
    """Write a result to `out` atomically, or to stdout when no path is given."""
    if out:
        atomic_write(out, text)
    else:
        click.echo(text, nl=False)


def emit_json(document, out=None):
    emit(canonical_json(document), out)
