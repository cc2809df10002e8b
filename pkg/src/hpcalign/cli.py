"""Command line: simulate, train, infer, metrics, report.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import yaml

from . import pipeline as pl
from .config import ConfigError, load_config
from .gridhome import LABEL_MODES, UnknownTaskError, default_world
from .hpcc import STAGES, TrainingDivergedError, load_checkpoint, save_checkpoint
from .logio import LogFormatError, emit_log, parse_log
from .metrics import UndefinedMetricError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(click.ClickException):
    exit_code = EXIT_DATA


class NumericError(click.ClickException):
    exit_code = EXIT_NUMERIC


def _config(ctx: click.Context, flags: dict):
    flags = {sec: {k: v for k, v in vals.items() if v is not None} if isinstance(vals, dict) else vals
             for sec, vals in flags.items()}
    try:
        return load_config(ctx.obj.get("config"), flags)
    except ConfigError as e:
        raise click.UsageError(str(e), ctx) from None


def _write_text(path: str | None, text: str) -> None:
    if path in (None, "-"):
        click.echo(text, nl=False)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def _read_log(path: str):
    try:
        return parse_log(path, pl.prompts_for())
    except OSError as e:
        raise DataError(f"cannot read log {path}: {e.strerror}") from None
    except LogFormatError as e:
        raise DataError(f"{path}: {e}") from None


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              help="YAML run config (default: $HPCALIGN_CONFIG).")
@click.pass_context
def main(ctx, config_path):
    """Hierarchical alignment toolkit for GridHome agents."""
    ctx.ensure_object(dict)
    ctx.obj["config"] = config_path


@main.command()
@click.option("--task", "tasks", multiple=True, help="Task id; repeat for several (default: benchmark set).")
@click.option("--episodes", type=int)
@click.option("--seed", type=int)
@click.option("--noise-rate", type=float)
@click.option("--persistence", type=float)
@click.option("--label-mode", type=click.Choice(LABEL_MODES))
@click.option("--out", "out", default="-", show_default=True, help="Log path, '-' for stdout.")
@click.pass_context
def simulate(ctx, tasks, episodes, seed, noise_rate, persistence, label_mode, out):
    """Roll out the noisy oracle and write a trajectory log."""
    cfg = _config(ctx, {"seed": seed, "simulate": {"tasks": list(tasks) or None, "episodes": episodes,
                                                   "noise_rate": noise_rate, "persistence": persistence,
                                                   "label_mode": label_mode}})
    try:
        results = pl.simulate(cfg)
    except UnknownTaskError as e:
        raise DataError(str(e)) from None
    if out == "-":
        emit_log([r.trajectory for r in results], sys.stdout)
    else:
        emit_log([r.trajectory for r in results], out)
        click.echo(f"wrote {len(results)} episodes to {out}; success rate {pl.success_rate(results):.3f}", err=True)


@main.command("train")
@click.option("--data", required=True, type=click.Path(dir_okay=False), help="Trajectory log to learn from.")
@click.option("--steps", type=int)
@click.option("--stage", type=click.Choice(STAGES))
@click.option("--seed", type=int)
@click.option("--lr", type=float)
@click.option("--batch-size", type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Checkpoint path (.npz).")
@click.option("--history", type=click.Path(dir_okay=False), help="Optional per-step loss log (JSONL).")
@click.pass_context
def train_cmd(ctx, data, steps, stage, seed, lr, batch_size, out, history):
    """Train the hierarchical encoders on a trajectory log."""
    cfg = _config(ctx, {"seed": seed, "train": {"steps": steps, "stage": stage, "lr": lr, "batch_size": batch_size}})
    trajs = _read_log(data)
    try:
        state, hist = pl.train_model(cfg, trajs)
    except pl.NoDataError as e:
        raise DataError(str(e)) from None
    except TrainingDivergedError as e:
        raise NumericError(str(e)) from None
    save_checkpoint(state, out)
    if history:
        import json

        _write_text(history, "".join(json.dumps(h, sort_keys=True) + "\n" for h in hist))
    if hist:
        click.echo(f"trained {state.step} steps; final loss {hist[-1]['loss']:.4f}", err=True)


@main.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Model checkpoint (not needed with --ablation).")
@click.option("--task", "tasks", multiple=True)
@click.option("--episodes", type=int)
@click.option("--seed", type=int)
@click.option("--noise-rate", type=float)
@click.option("--label-mode", type=click.Choice(LABEL_MODES))
@click.option("--ablation", is_flag=True, help="Fallback-only controller: every tier off.")
@click.option("--out", default="-", show_default=True)
@click.pass_context
def infer(ctx, checkpoint, tasks, episodes, seed, noise_rate, label_mode, ablation, out):
    """Run the controller on noisy-policy logits and write a trajectory log."""
    cfg = _config(ctx, {"seed": seed, "simulate": {"tasks": list(tasks) or None, "episodes": episodes,
                                                   "noise_rate": noise_rate, "label_mode": label_mode}})
    ctl = cfg.controller_config()
    if ablation:
        ctl = ctl.fallback_only()
    state = None
    if not ablation:
        if not checkpoint:
            raise click.UsageError("--checkpoint is required unless --ablation is given", ctx)
        try:
            state = load_checkpoint(checkpoint)
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"cannot load checkpoint {checkpoint}: {e}") from None
        if state.config.vocab_size != len(default_world().vocab):
            raise DataError("checkpoint vocabulary does not match the GridHome vocabulary")
    try:
        results = pl.infer(cfg, state, controller=ctl)
    except UnknownTaskError as e:
        raise DataError(str(e)) from None
    if out == "-":
        emit_log([r.trajectory for r in results], sys.stdout)
    else:
        emit_log([r.trajectory for r in results], out)
    click.echo(f"{len(results)} episodes; success rate {pl.success_rate(results):.3f}", err=True)


@main.command()
@click.argument("kind", type=click.Choice(["epr", "pac"]))
@click.option("--log", "log_path", required=True, type=click.Path(dir_okay=False))
@click.option("--K", "K", type=int, help="Largest lag.")
@click.option("--boot", type=int, help="Bootstrap replicates.")
@click.option("--n-match", type=int, help="Independent 1:1 control matchings to pool (EPR).")
@click.option("--seed", type=int)
@click.option("--ipcw", is_flag=True, default=None, help="Inverse-probability-of-censoring weights (EPR).")
@click.option("--out", type=click.Path(dir_okay=False), help="Metrics file (JSON).")
@click.option("--plot-data", type=click.Path(dir_okay=False), help="CSV of lag, value, ci_low, ci_high.")
@click.pass_context
def metrics(ctx, kind, log_path, K, boot, n_match, seed, ipcw, out, plot_data):
    """EPR or PAC tables with bootstrap CIs."""
    cfg = _config(ctx, {"seed": seed, "metrics": {"K": K, "n_boot": boot, "n_match": n_match, "ipcw": ipcw}})
    trajs = _read_log(log_path)
    try:
        rep = (pl.epr_report if kind == "epr" else pl.pac_report)(trajs, cfg)
    except (pl.NoDataError, UndefinedMetricError) as e:
        raise DataError(f"no data: {e}") from None
    click.echo(pl.format_table(rep), nl=False)
    if out:
        _write_text(out, pl.dumps_metrics(rep))
    if plot_data:
        _write_text(plot_data, pl.dumps_plot_data(rep))


@main.command()
@click.option("--metrics", "metrics_paths", multiple=True, required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
def report(metrics_paths, out):
    """Write curve data (values plus CI band) for plotting."""
    reps = []
    for p in metrics_paths:
        try:
            reps.append(pl.load_metrics(p))
        except OSError as e:
            raise DataError(f"cannot read {p}: {e.strerror}") from None
        except pl.NoDataError:
            continue
        except ValueError as e:
            raise DataError(str(e)) from None
    try:
        written = pl.render_report(reps, out)
    except pl.NoDataError:
        raise DataError("no data") from None
    for w in written:
        click.echo(str(w))


def run(argv=None) -> int:
    """Entry point with the documented exit codes (click uses 2 for usage errors)."""
    try:
        main.main(args=argv, prog_name="hpcalign", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except (LogFormatError, UnknownTaskError, UndefinedMetricError, pl.NoDataError, yaml.YAMLError) as e:
        click.echo(f"Error: {e}", err=True)
        return EXIT_DATA
    except (TrainingDivergedError, FloatingPointError, ArithmeticError) as e:
        click.echo(f"Error: numeric failure: {e}", err=True)
        return EXIT_NUMERIC
    return EXIT_OK


def console_main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    console_main()
