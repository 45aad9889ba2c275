"""Command-line interface for sinc-speaker."""

import csv
import sys
from pathlib import Path
from typing import Dict, Optional, Tuple

import click
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, Progress, TextColumn, TimeRemainingColumn
from rich.table import Table

from . import __version__
from .checkpoint import load_checkpoint
from .config import ConfigManager
from .data import MANIFEST_FILE, DatasetManifest, build_manifest, synth_corpus
from .errors import ConfigError, DataError, NumericError
from .evaluation import evaluate_inter, evaluate_intra
from .gradcheck import run_gradcheck
from .logger import RunLogger
from .sinc import frequency_response, mel_init
from .training import FINAL_CHECKPOINT, LOG_FILE, train

console = Console()

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
REPORT_FILE = "report.json"
FILTER_COLUMNS = ["filter", "freq_normalized", "magnitude_db", "freq_hz", "low_hz", "high_hz", "silent"]


def exit_code_for(error: BaseException) -> int:
    """Map an exception onto the documented exit codes."""
    if isinstance(error, NumericError):
        return EXIT_NUMERIC
    if isinstance(error, (DataError, FileNotFoundError, NotADirectoryError)):
        return EXIT_DATA
    return EXIT_USAGE


class SpeakerGroup(click.Group):
    """Click group whose usage errors exit with code 1 instead of click's 2."""

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise


def _fail(error: BaseException, logger: Optional[RunLogger] = None) -> None:
    if logger is not None:
        logger.log_error(error)
        logger.end_run()
    console.print(f"[red]Error:[/red] {error}")
    sys.exit(exit_code_for(error))


def _parse_sets(pairs: Tuple[str, ...]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got '{pair}'")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _load_config(config_path: Optional[str], sets: Tuple[str, ...], **flags) -> ConfigManager:
    """Defaults, then the config file, then ``--set`` pairs, then dedicated flags."""
    manager = ConfigManager()
    if config_path:
        manager.load(config_path)
    manager.apply_overrides(_parse_sets(sets))
    manager.apply_overrides(flags)
    manager.validate()
    return manager


def _make_logger(manager: ConfigManager, out_dir: Path, log_events: bool, command: str) -> RunLogger:
    logger = RunLogger(out_dir, enabled=log_events or manager.is_logging_enabled())
    logger.start_run(command, {"config_fingerprint": manager.fingerprint()})
    return logger


config_option = click.option(
    "--config",
    "config_path",
    type=click.Path(),
    default=None,
    help="Config file of 'key = value' lines",
)
set_option = click.option(
    "--set",
    "sets",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override any config key (repeatable), e.g. --set loss.m=0.35",
)
log_events_option = click.option(
    "--log-events", is_flag=True, default=False, help="Write events.jsonl into the output directory"
)


@click.group(cls=SpeakerGroup)
@click.version_option(version=__version__)
@click.pass_context
def main(ctx):
    """sinc-speaker - speaker recognition from raw waveforms with a learnable sinc filterbank.

    Exit codes: 0 success, 1 usage or configuration error, 2 data error,
    3 numeric failure.
    """
    ctx.ensure_object(dict)


@main.command()
@click.option("--speakers", type=int, required=True, help="Number of synthetic speakers (>= 2)")
@click.option("--utts", type=int, default=8, show_default=True, help="Utterances per speaker")
@click.option("--seconds", type=float, default=3.0, show_default=True, help="Seconds per utterance")
@click.option("--seed", type=int, default=0, show_default=True, help="Random seed")
@click.option("--sample-rate", type=int, default=None, help="Sample rate in Hz (config data.sample_rate)")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Corpus directory")
@config_option
@set_option
def synth(speakers, utts, seconds, seed, sample_rate, out_dir, config_path, sets):
    """Generate a synthetic corpus of harmonic speakers and its manifest."""
    try:
        manager = _load_config(config_path, sets, **{"data.sample_rate": sample_rate})
        out = Path(out_dir)
        split = manager.split_policy()
        with console.status("[cyan]Synthesizing corpus...[/cyan]"):
            manifest = synth_corpus(
                out,
                speakers,
                utts,
                seconds,
                sample_rate=manager.get("data.sample_rate"),
                seed=seed,
                chunk_ms=manager.get("data.chunk_ms"),
                train_target_s=split["train_target_s"],
                test_target_s=split["test_target_s"],
            )
        manager.save(out)
        _print_manifest_summary(manifest, out / MANIFEST_FILE)
    except Exception as e:
        _fail(e)


@main.command("manifest")
@click.option("--root", type=click.Path(), required=True, help="Directory with one subdirectory per speaker")
@click.option("--out", "out_path", type=click.Path(), default=None, help="Manifest path (default: <root>/manifest.tsv)")
@config_option
@set_option
def manifest_cmd(root, out_path, config_path, sets):
    """Index a directory-per-speaker WAV corpus into a manifest."""
    try:
        manager = _load_config(config_path, sets)
        split = manager.split_policy()
        manifest = build_manifest(
            root,
            manager.get("data.chunk_ms"),
            split["train_target_s"],
            split["test_target_s"],
            split["seed"],
        )
        path = Path(out_path) if out_path else Path(root) / MANIFEST_FILE
        manifest = manifest.relocate(path.parent)
        manifest.save(path)
        manager.save(path.parent)
        _print_manifest_summary(manifest, path)
    except Exception as e:
        _fail(e)


def _print_manifest_summary(manifest: DatasetManifest, path: Path) -> None:
    table = Table(title="Manifest")
    table.add_column("Split", style="cyan")
    table.add_column("Utterances", justify="right")
    table.add_column("Seconds", justify="right")
    for split in ("train", "test", "spare"):
        records = manifest.split(split)
        table.add_row(split, str(len(records)), f"{sum(r.duration_s for r in records):.1f}")
    console.print(table)
    console.print(f"[green]✓[/green] {manifest.class_count} speakers written to {path}")
    for note in manifest.notes:
        console.print(f"[yellow]{note.kind}:[/yellow] {note.subject} ({note.reason})")


@main.command("train")
@click.option("--manifest", "manifest_path", type=click.Path(), required=True, help="Manifest file")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Run directory")
@click.option("--loss", type=click.Choice(ConfigManager.LOSS_KINDS), default=None, help="Loss head")
@click.option("--m", type=float, default=None, help="Margin")
@click.option("--s", type=float, default=None, help="Scale")
@click.option("--alpha", type=float, default=None, help="Curriculum momentum")
@click.option("--lr", type=float, default=None, help="Learning rate")
@click.option("--batch-size", type=int, default=None, help="Chunks per batch")
@click.option("--epochs", type=int, default=None, help="Number of epochs")
@click.option("--batches-per-epoch", type=int, default=None, help="Batches per epoch")
@click.option("--seed", type=int, default=None, help="Initialization and sampling seed")
@click.option("--optimizer", type=click.Choice(ConfigManager.OPTIMIZERS), default=None)
@click.option("--prefetch", type=int, default=None, help="Batches sampled ahead in a background thread")
@click.option("--resume", type=click.Path(), default=None, help="Checkpoint to continue from")
@config_option
@set_option
@log_events_option
def train_cmd(
    manifest_path, out_dir, loss, m, s, alpha, lr, batch_size, epochs, batches_per_epoch,
    seed, optimizer, prefetch, resume, config_path, sets, log_events,
):
    """Train the trunk and a loss head on a manifest's train split."""
    logger = None
    try:
        manager = _load_config(
            config_path,
            sets,
            **{
                "loss.kind": loss,
                "loss.m": m,
                "loss.s": s,
                "loss.alpha": alpha,
                "train.learning_rate": lr,
                "train.batch_size": batch_size,
                "train.epochs": epochs,
                "train.batches_per_epoch": batches_per_epoch,
                "train.seed": seed,
                "train.optimizer": optimizer,
                "train.prefetch": prefetch,
            },
        )
        manifest = DatasetManifest.load(manifest_path)
        model_config = manager.to_model_config(sample_rate=manifest.sample_rate)
        train_config = manager.to_train_config()
        weights = load_checkpoint(resume, manifest.class_count) if resume else None

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manager.save(out)
        logger = _make_logger(manager, out, log_events, "train")

        with Progress(
            TextColumn("[cyan]Training[/cyan]"),
            BarColumn(),
            TextColumn("{task.completed}/{task.total} batches"),
            TextColumn("loss {task.fields[loss]:.4f}  t {task.fields[t]:.4f}"),
            TimeRemainingColumn(),
            console=console,
        ) as progress:
            task = progress.add_task("train", total=train_config.total_batches, loss=float("nan"), t=0.0)
            result = train(
                manifest,
                model_config,
                train_config,
                out_dir=out,
                logger=logger,
                weights=weights,
                on_batch=lambda row: progress.update(task, advance=1, loss=row["loss"], t=row["t"]),
            )

        final = result.log[-1]
        console.print(
            Panel.fit(
                f"[bold]final loss[/bold] {final['loss']:.4f}   [bold]t[/bold] {final['t']:.4f}\n"
                f"checkpoint: {out / FINAL_CHECKPOINT}\nlog: {out / LOG_FILE}",
                title=f"{train_config.loss.kind} head",
                border_style="green",
            )
        )
        logger.end_run()
    except Exception as e:
        _fail(e, logger)


@main.command("eval")
@click.option("--protocol", type=click.Choice(["intra", "inter"]), required=True)
@click.option("--ckpt", type=click.Path(), required=True, help="Trained checkpoint")
@click.option("--manifest", "manifest_path", type=click.Path(), required=True, help="Manifest to evaluate on")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Report directory (default: <ckpt dir>/eval_<protocol>)")
@click.option("--eval-logits", type=click.Choice(ConfigManager.EVAL_LOGITS), default=None)
@click.option("--overlap", type=float, default=None, help="Frame overlap fraction in [0, 1)")
@click.option("--enroll-chunks", type=int, default=None, help="Enrollment frames per speaker (inter)")
@click.option("--threads", type=int, default=None, help="Worker threads (1 is deterministic)")
@click.option("--dump-posteriors", is_flag=True, default=False, help="Write posteriors.npz (intra)")
@config_option
@set_option
@log_events_option
def eval_cmd(
    protocol, ckpt, manifest_path, out_dir, eval_logits, overlap, enroll_chunks, threads,
    dump_posteriors, config_path, sets, log_events,
):
    """Evaluate a checkpoint: FER/CER (intra) or gallery identification CER (inter)."""
    logger = None
    try:
        manager = _load_config(
            config_path,
            sets,
            **{
                "eval.eval_logits": eval_logits,
                "eval.frame_overlap": overlap,
                "eval.enroll_chunks": enroll_chunks,
                "eval.threads": threads,
            },
        )
        manifest = DatasetManifest.load(manifest_path)
        expected = manifest.class_count if protocol == "intra" else None
        weights = load_checkpoint(ckpt, expected)

        out = Path(out_dir) if out_dir else Path(ckpt).parent / f"eval_{protocol}"
        out.mkdir(parents=True, exist_ok=True)
        manager.save(out)
        logger = _make_logger(manager, out, log_events, "eval")
        settings = dict(
            overlap=manager.get("eval.frame_overlap"),
            threads=manager.get("eval.threads"),
            fingerprint=manager.fingerprint(),
        )

        with console.status(f"[cyan]Evaluating ({protocol})...[/cyan]"):
            if protocol == "intra":
                result = evaluate_intra(weights, manifest, mode=manager.get("eval.eval_logits"), **settings)
                if dump_posteriors:
                    result.dump_posteriors(out / "posteriors.npz")
            else:
                result = evaluate_inter(
                    weights, manifest, manager.get("eval.enroll_chunks"), logger=logger, **settings
                )

        report = result.report
        path = report.save(out / REPORT_FILE)
        logger.log_evaluation(report.to_dict())

        table = Table(title=f"Evaluation ({protocol})")
        table.add_column("Metric", style="cyan")
        table.add_column("Value", justify="right")
        if report.fer_percent is not None:
            table.add_row("FER %", f"{report.fer_percent:.2f}")
        table.add_row("CER %", f"{report.cer_percent:.2f}")
        table.add_row("frames", str(report.frames_evaluated))
        table.add_row("utterances", str(report.sentences_evaluated))
        if report.gallery_size is not None:
            table.add_row("gallery size", str(report.gallery_size))
        for key, value in sorted(report.counts.items()):
            table.add_row(key.replace("_", " "), str(value))
        console.print(table)
        console.print(f"[green]✓[/green] Report written to {path}")
        logger.end_run()
    except Exception as e:
        _fail(e, logger)


@main.command()
@click.option("--seeds", type=int, default=None, help="Independent random draws")
@click.option("--step", type=float, default=None, help="Finite-difference step")
@click.option("--tolerance", type=float, default=None, help="Maximum relative error")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Directory for config echo and events")
@config_option
@set_option
@log_events_option
def gradcheck(seeds, step, tolerance, out_dir, config_path, sets, log_events):
    """Verify analytic gradients of every weight group and loss head."""
    logger = None
    try:
        manager = _load_config(
            config_path,
            sets,
            **{"gradcheck.seeds": seeds, "gradcheck.step": step, "gradcheck.tolerance": tolerance},
        )
        if out_dir:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            manager.save(out)
            logger = _make_logger(manager, out, log_events, "gradcheck")
        n_seeds = manager.get("gradcheck.seeds")
        with Progress(console=console) as progress:
            task = progress.add_task("[cyan]Checking gradients[/cyan]", total=n_seeds)
            results = run_gradcheck(
                n_seeds,
                manager.get("gradcheck.step"),
                manager.get("gradcheck.tolerance"),
                logger=logger,
                on_seed=lambda _: progress.advance(task),
            )
    except Exception as e:
        _fail(e, logger)
        return

    table = Table(title=f"Gradient check ({n_seeds} seeds)")
    table.add_column("Group", style="cyan")
    table.add_column("Family")
    table.add_column("Max rel. error", justify="right")
    table.add_column("Checked", justify="right")
    table.add_column("Skipped", justify="right")
    table.add_column("Status")
    for r in results:
        status = "[green]pass[/green]" if r.passed else "[red]FAIL[/red]"
        table.add_row(r.name, r.family, f"{r.max_rel_error:.2e}", str(r.checked), str(r.skipped), status)
    console.print(table)

    failed = [r.name for r in results if not r.passed]
    if logger is not None:
        logger.end_run()
    if failed:
        console.print(f"[red]Gradient check failed:[/red] {', '.join(failed)}")
        sys.exit(EXIT_NUMERIC)
    console.print("[green]✓ All gradients match finite differences[/green]")


@main.command()
@click.option("--ckpt", type=click.Path(), default=None, help="Checkpoint (default: fresh mel-initialized bank)")
@click.option("--out", "out_path", type=click.Path(), required=True, help="CSV file to write")
@click.option("--filter", "filter_index", type=int, default=None, help="Export a single filter")
@click.option("--points", type=int, default=512, show_default=True, help="Frequency points per filter")
@config_option
@set_option
def filters(ckpt, out_path, filter_index, points, config_path, sets):
    """Export the magnitude responses of the sinc filterbank as CSV."""
    try:
        manager = _load_config(config_path, sets)
        if ckpt:
            params = load_checkpoint(ckpt).sinc_params()
        else:
            config = manager.to_model_config()
            params = mel_init(
                config.sinc_filters,
                config.sample_rate,
                config.f_min,
                config.f_max_hz,
                config.sinc_kernel_len,
                config.min_low_hz,
                config.window,
            )
        indices = [filter_index] if filter_index is not None else range(params.count)

        path = Path(out_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rate = params.sample_rate
        silent = []
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(FILTER_COLUMNS)
            for index in indices:
                response = frequency_response(params, index, points)
                if response.is_silent:
                    silent.append(index)
                for freq, level in zip(response.freqs, response.magnitude_db):
                    writer.writerow(
                        [
                            index,
                            repr(float(freq)),
                            repr(float(level)),
                            repr(float(freq * rate)),
                            repr(response.low * rate),
                            repr(response.high * rate),
                            int(response.is_silent),
                        ]
                    )
        manager.save(path.parent)
        console.print(f"[green]✓[/green] {len(indices)} filter response(s) written to {path}")
        if silent:
            console.print(
                f"[yellow]Warning:[/yellow] {len(silent)} filter(s) have an all-zero kernel "
                f"(silent column = 1): {silent}"
            )
    except Exception as e:
        _fail(e)
