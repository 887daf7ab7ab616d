import click

from library.chart import build_chart, save_chart
from library.tables import read_csv


@click.command()
@click.option("--in", "in_path", required=True, type=click.Path(dir_okay=False), help="CSV written by this toolkit")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help=".svg or .png")
@click.option("--kind", type=click.Choice(["line", "histogram"]), default=None,
              help="Override the chart hint stored in the CSV")
@click.option("--title", default=None)
def plot(in_path, out_path, kind, title):
    """Render a result CSV as a line chart or histogram."""
    save_chart(build_chart(read_csv(in_path), kind, title), out_path)
