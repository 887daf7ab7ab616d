import click

from command import emit, emit_json
from library.config import HISTOGRAM_BINS
from service import experiment_system

log_option = click.option("--log", "log_path", required=True, type=click.Path(dir_okay=False),
                          help="LogFile or JSON prediction log")
labels_option = click.option("--labels", "labels_path", required=True, type=click.Path(dir_okay=False),
                             help="JSON labels file for the logged examples")
out_option = click.option("--out", type=click.Path(dir_okay=False), default=None,
                          help="Write here instead of stdout")
networks_option = click.option("--networks", type=click.IntRange(min=1), default=None,
                               help="Use only the first n networks")


@click.group()
def analyze():
    """Post-hoc analysis of a prediction log."""


@analyze.command("map")
@log_option
@labels_option
@click.option("--epochs", default="all", show_default=True,
              help="'all', 'last', or k equally spaced checkpoints")
@networks_option
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json", show_default=True)
@out_option
def map_command(log_path, labels_path, epochs, networks, fmt, out):
    """Max Agreement Prediction and its accuracy."""
    inputs = experiment_system.load_inputs(log_path, labels_path, networks)
    if fmt == "csv":
        emit(experiment_system.map_predictions_table(inputs, epochs).to_csv(), out)
    else:
        emit_json(experiment_system.analyze_map(inputs, epochs), out)


@analyze.command()
@log_option
@labels_option
@networks_option
@click.option("--rules", default="auto", show_default=True,
              help="comma list of majority, prob_average, map_prefix, map_full; 'auto' picks what the log supports")
@out_option
def baselines(log_path, labels_path, networks, rules, out):
    """Single-network, majority-vote, probability-average and running-MAP accuracy per checkpoint."""
    inputs = experiment_system.load_inputs(log_path, labels_path, networks)
    emit(experiment_system.analyze_baselines(inputs, rules).to_csv(), out)


@analyze.command()
@log_option
@labels_option
@click.option("--checkpoint", default="last", show_default=True, help="'last' or a checkpoint position")
@networks_option
@out_option
def ecs(log_path, labels_path, checkpoint, networks, out):
    """Error Consensus Score histogram."""
    inputs = experiment_system.load_inputs(log_path, labels_path, networks)
    emit(experiment_system.analyze_ecs(inputs, checkpoint).to_csv(), out)


@analyze.command()
@log_option
@labels_option
@click.option("--epochs", default="all", show_default=True)
@click.option("--bins", type=click.IntRange(min=1), default=HISTOGRAM_BINS, show_default=True)
@click.option("--raw", is_flag=True, help="One row per example instead of a histogram")
@networks_option
@out_option
def margin(log_path, labels_path, epochs, bins, raw, networks, out):
    """Agreement margins split by correct and incorrect final votes."""
    inputs = experiment_system.load_inputs(log_path, labels_path, networks)
    emit(experiment_system.analyze_margin(inputs, epochs, bins, raw).to_csv(), out)


@analyze.command()
@log_option
@labels_option
@click.option("--axis", type=click.Choice(["networks", "epochs"]), required=True)
@click.option("--epochs", default="all", show_default=True, help="Checkpoint subset for --axis networks")
@out_option
def sweep(log_path, labels_path, axis, epochs, out):
    """Accuracy against ensemble size or against the number of checkpoints."""
    inputs = experiment_system.load_inputs(log_path, labels_path)
    emit(experiment_system.analyze_sweep(inputs, axis, epochs).to_csv(), out)
