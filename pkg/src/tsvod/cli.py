"""Command line entry point: ``tsvod gen-data | train | eval | infer | featmap | gradcheck``.

Exit codes: 0 ok, 1 usage error, 2 I/O error, 3 numeric failure.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .aggregation import STAGES, heatmap, write_pgm
from .config import RunConfig
from .errors import ConfigError, ContractError, NumericError
from .encoder import STRIDE
from .evaluation import eval_samples, evaluate, model_predictor
from .gradcheck import format_report, run_gradcheck
from .model import load_model
from .synthvid import SceneSpec, generate_dataset, load_dataset, nearest_context, save_dataset

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("tsvod")


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Map package errors onto exit codes."""

    def run(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, ContractError, json.JSONDecodeError) as exc:
            _fail(EXIT_USAGE, str(exc))
        except NumericError as exc:
            _fail(EXIT_NUMERIC, f"numeric failure: {exc}")
        except OSError as exc:
            _fail(EXIT_IO, str(exc))

    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


class _Group(click.Group):
    """Click reports usage errors with exit code 2; ours is 1."""

    def main(self, *args, **kwargs):
        kwargs["standalone_mode"] = False
        try:
            rv = super().main(*args, **kwargs)
        except click.exceptions.Exit as exc:
            sys.exit(exc.exit_code)
        except click.UsageError as exc:
            exc.show()
            sys.exit(EXIT_USAGE)
        except click.Abort:
            sys.exit(EXIT_USAGE)
        sys.exit(rv if isinstance(rv, int) else EXIT_OK)


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool):
    """Spatio-temporal video object detection on synthetic data."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-data")
@click.option("--spec", "spec_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_guarded
def gen_data(spec_path, out_dir):
    """Render a synthetic dataset described by a JSON scene spec."""
    spec = SceneSpec.from_dict(json.loads(Path(spec_path).read_text()))
    seqs = generate_dataset(spec)
    save_dataset(seqs, out_dir, spec)
    click.echo(f"wrote {len(seqs)} sequences to {out_dir}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_guarded
def train(config_path, out_dir):
    """Train a model; writes checkpoint.ptse, config.json and train_log.csv."""
    from .train import train as run_train

    cfg = RunConfig.load(config_path)
    if not cfg.train_data:
        raise ConfigError("config.train_data is empty")
    train_seqs = load_dataset(cfg.train_data)
    val_seqs = load_dataset(cfg.val_data) if cfg.val_data else None
    result = run_train(cfg, train_seqs, val_seqs, out_dir=out_dir, progress=True)
    last = result.history[-1]
    click.echo(f"trained {cfg.epochs} epochs, final loss {last['loss']:.4f}, checkpoint in {out_dir}")


def _samples(model, data_dir):
    return eval_samples(load_dataset(data_dir), model.cfg.num_context)


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False))
@click.option("--report", "report_path", required=True, type=click.Path(dir_okay=False))
@_guarded
def eval_cmd(checkpoint, data_dir, report_path):
    """Compute per-class AP@0.5, mAP and occluded/clean splits."""
    model = load_model(checkpoint)
    report, _ = evaluate(model_predictor(model, model.cfg.score_threshold),
                         _samples(model, data_dir), model.cfg.num_classes)
    Path(report_path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    click.echo(f"mAP@0.5 {report.mAP:.4f} (occluded {report.splits['occluded'].mAP:.4f})")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@_guarded
def infer(checkpoint, data_dir, out_path):
    """Write detections as JSON lines ``{frame_id, class_id, score, box}``."""
    model = load_model(checkpoint)
    _, dets = evaluate(model_predictor(model, model.cfg.score_threshold),
                       _samples(model, data_dir), model.cfg.num_classes)
    with open(out_path, "w") as fh:
        for d in dets:
            fh.write(d.to_json() + "\n")
    click.echo(f"wrote {len(dets)} detections to {out_path}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--sample", required=True, help="SEQ:T, sequence index within the dataset and frame.")
@click.option("--data", "data_dir", type=click.Path(file_okay=False),
              help="Dataset directory (defaults to the config's val_data).")
@click.option("--stage", required=True, type=click.Choice(STAGES))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_guarded
def featmap(checkpoint, sample, data_dir, stage, out_dir):
    """Dump per-token feature norms of one aggregation stage as PGM heatmaps."""
    try:
        seq_idx, t = (int(p) for p in sample.split(":"))
    except ValueError:
        raise click.UsageError(f"--sample must be SEQ:T, got {sample!r}") from None
    model = load_model(checkpoint)
    data_dir = data_dir or model.cfg.val_data or model.cfg.train_data
    if not data_dir:
        raise click.UsageError("no --data given and the config names no dataset")
    seqs = load_dataset(data_dir)
    if not 0 <= seq_idx < len(seqs) or not 0 <= t < len(seqs[seq_idx]):
        raise click.UsageError(f"sample {sample} out of range")
    s = nearest_context(seqs[seq_idx], t, model.cfg.num_context)
    _, trace = model(s.target, s.context)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = model.cfg.image_size // STRIDE
    maps = trace.stage(stage)
    for i, tokens in enumerate(maps):
        write_pgm(out / f"{stage}_{i}.pgm", heatmap(tokens, grid, grid))
    click.echo(f"wrote {len(maps)} heatmap(s) to {out_dir}")


@main.command()
@click.option("--seed", type=int, default=None, help="Probe seed (random when omitted).")
@click.option("--probes", type=int, default=10, show_default=True)
def gradcheck(seed, probes):
    """Finite-difference check of every differentiable op."""
    results = run_gradcheck(seed, probes)
    click.echo(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


if __name__ == "__main__":
    main()
