import click

from command import emit_json
from service import experiment_system

config_option = click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                             help="Theory config or theory manifest (JSON)")


@click.group()
def theory():
    """Linear-regression ensemble simulator."""


@theory.command()
@config_option
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def run(config_path, out_dir):
    """Track disagreement and its decomposition over a full run."""
    report = experiment_system.theory_run(config_path, out_dir)
    emit_json({
        "command": "theory run",
        "holds": report.holds,
        "certified_steps": len(report.certified_steps),
        "regime_steps": len(report.regime_steps),
        "violations": list(report.violations),
        "quadratic_exponent": report.quadratic_exponent,
    })


@theory.command()
@config_option
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def lemma1(config_path, out):
    """Sign of the one-step test-error change against the gradient correlation."""
    emit_json(experiment_system.theory_lemma1(config_path), out)


@theory.command()
@config_option
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def lemma2(config_path, out):
    """Ensemble-mean convergence to the closed-form solution."""
    emit_json(experiment_system.theory_lemma2(config_path), out)
