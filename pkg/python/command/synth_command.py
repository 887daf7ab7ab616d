import click

from command import emit_json
from service.experiment_system import synth_gen


@click.group()
def synth():
    """Synthetic data and toy ensemble training."""


@synth.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
              help="Toy run manifest (JSON)")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Output directory for the log, labels and manifest")
@click.option("--workers", type=int, default=1, show_default=True,
              help="Training threads; results do not depend on it")
def gen(config_path, out_dir, workers):
    """Generate the dataset, train the ensemble and log its test predictions."""
    manifest, result = synth_gen(config_path, out_dir, workers)
    log = result.log
    emit_json({
        "command": "synth gen",
        "manifest_digest": manifest.digest,
        "num_networks": log.num_networks,
        "num_checkpoints": log.num_checkpoints,
        "num_examples": log.num_examples,
        "outputs": manifest.outputs,
    })
