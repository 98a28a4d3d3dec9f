"""
uncertainty-localizer 命令列介面
資料生成、訓練、偵測、評估、消融實驗與診斷工具的統一入口
"""

import json
import logging
from pathlib import Path
from typing import List, Optional

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn
from rich.table import Table

from . import __version__
from .data.datakit import generate, load_dataset, read_manifest
from .evaluation.ablation import AblationReport, AblationRow, AblationRunner
from .evaluation.evalkit import EvalReport, evaluate, magnitude_histogram, write_histogram_csv
from .inference.detector import detect_all, write_detections
from .nn.model import init_params, load_params
from .training.trainer import StepRecord, Trainer, gradcheck_instance, gradient_check
from .utils.config import M_SWEEP, RunConfig, ScoreMode, Settings, SyntheticSpec, resolve_thresholds
from .utils.errors import ConfigError, LocalizerError, NumericalError


app = typer.Typer(
    name="um-localize",
    help="Weakly-supervised temporal action localization by uncertainty modeling",
    add_completion=False
)

console = Console()

RESOLVED_CONFIG = "resolved_config.json"


def setup_logging(log_level: str, log_file: Optional[str] = None) -> None:
    """設定日誌配置"""
    level = getattr(logging, log_level.upper(), logging.INFO)

    handlers: List[logging.Handler] = [RichHandler(console=console, show_path=False)]
    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
        handlers.append(file_handler)

    logging.basicConfig(level=level, format="%(message)s", handlers=handlers, force=True)


def _prepare(verbose: bool) -> Settings:
    settings = Settings.from_env()
    if verbose:
        settings.log_level = "DEBUG"
    setup_logging(settings.log_level, settings.log_file)
    return settings


def _exit_code(error: Exception) -> int:
    if isinstance(error, NumericalError):
        return 3
    if isinstance(error, (LocalizerError, ValidationError, FileNotFoundError)):
        return 2
    return 1


def _fail(error: Exception) -> None:
    console.print(f"❌ Error: {error}", style="red")
    raise typer.Exit(_exit_code(error))


def _run_config(path: Optional[Path]) -> RunConfig:
    return RunConfig.from_file(path) if path is not None else RunConfig()


def _parse_thresholds(value: str) -> List[float]:
    if value.lower() in ("thumos", "activitynet"):
        return resolve_thresholds(value)
    try:
        return resolve_thresholds([float(t) for t in value.split(",") if t.strip()])
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Invalid threshold list '{value}': {e}") from e


@app.command("gen-data")
def gen_data(
    out_dir: Path = typer.Option(..., "--out", "-o", help="Output dataset directory"),
    spec_file: Optional[Path] = typer.Option(None, "--spec", "-s", help="Synthetic spec JSON (defaults if omitted)"),
    seed: int = typer.Option(0, "--seed", help="Generation seed"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output")
):
    """Generate a synthetic dataset with planted action intervals"""
    try:
        _prepare(verbose)
        spec = SyntheticSpec.from_file(spec_file) if spec_file is not None else SyntheticSpec()

        dataset = generate(spec, seed)
        manifest_path = dataset.write(out_dir)
        (out_dir / RESOLVED_CONFIG).write_text(
            json.dumps({"seed": seed, "spec": spec.model_dump(mode="json")}, indent=2, sort_keys=True)
        )

        manifest = read_manifest(manifest_path)
        console.print(f"✅ {len(dataset.records)} videos, {len(dataset.class_names)} classes → {manifest_path}")
        console.print(f"   dataset hash: {manifest.dataset_hash}")

    except typer.Exit:
        raise
    except Exception as e:
        _fail(e)


@app.command()
def train(
    data: Path = typer.Option(..., "--data", "-d", help="Dataset manifest"),
    out_dir: Path = typer.Option(..., "--out", "-o", help="Run output directory"),
    config_file: Optional[Path] = typer.Option(None, "--config", "-c", help="Run configuration JSON"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Training state (.npz) to resume from"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output")
):
    """Train the segment model from video-level labels"""
    try:
        _prepare(verbose)
        config = _run_config(config_file)
        manifest = read_manifest(data)
        records = load_dataset(data, subset=config.train_subset)

        out_dir.mkdir(parents=True, exist_ok=True)
        config.write(out_dir / RESOLVED_CONFIG)

        train_config = config.train_config()
        trainer = Trainer(train_config, kernel_size=config.kernel_size, out_dir=out_dir)

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TextColumn("{task.completed}/{task.total}"),
            console=console
        ) as progress:
            task = progress.add_task("Training...", total=train_config.steps)

            def on_step(record: StepRecord) -> None:
                progress.update(task, completed=record.step)

            result = trainer.train(
                [record.to_training_sample() for record in records],
                resume_from=resume,
                dataset_hash=manifest.dataset_hash,
                config_hash=config.config_hash(),
                on_step=on_step,
            )

        table = Table(title="📉 Training Summary")
        table.add_column("Item", style="cyan")
        table.add_column("Value", style="green")
        table.add_row("Steps", str(result.state.step))
        if result.history:
            final = result.history[-1]
            table.add_row("L_cls", f"{final.cls:.4f}")
            table.add_row("L_um", f"{final.um:.4f}")
            table.add_row("L_be", f"{final.be:.4f}")
            table.add_row("Total", f"{final.total:.4f}")
        table.add_row("Checkpoint", str(out_dir / Trainer.MODEL_FILE))
        console.print(table)

    except typer.Exit:
        raise
    except Exception as e:
        _fail(e)


@app.command()
def detect(
    checkpoint: Path = typer.Option(..., "--checkpoint", "-k", help="Model checkpoint (.umck)"),
    data: Path = typer.Option(..., "--data", "-d", help="Dataset manifest"),
    out: Path = typer.Option(..., "--out", "-o", help="Detections JSON to write"),
    config_file: Optional[Path] = typer.Option(None, "--config", "-c", help="Run configuration JSON"),
    score_mode: Optional[ScoreMode] = typer.Option(None, "--score-mode", help="Override the scoring mode"),
    subset: Optional[str] = typer.Option(None, "--subset", help="Dataset subset (default: config test subset)"),
    threads: Optional[int] = typer.Option(None, "--threads", "-t", help="Worker threads (default: UMLOC_THREADS)"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output")
):
    """Localize actions in every video of a dataset subset"""
    try:
        settings = _prepare(verbose)
        config = _run_config(config_file)
        if score_mode is not None:
            config = config.model_copy(update={"detect": config.detect.model_copy(update={"score_mode": score_mode})})

        params = load_params(checkpoint)
        manifest = read_manifest(data)
        records = load_dataset(data, subset=subset or config.test_subset)

        results = detect_all(params, records, config.detect, config.mil, threads or settings.threads)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_detections(results, manifest.class_names, out)
        config.write(out.with_name(f"{out.stem}.{RESOLVED_CONFIG}"))

        total = sum(len(proposals) for proposals in results.values())
        console.print(f"✅ {total} detections in {len(records)} videos ({config.detect.score_mode.value}) → {out}")

    except typer.Exit:
        raise
    except Exception as e:
        _fail(e)


@app.command("eval")
def eval_command(
    detections: Path = typer.Option(..., "--detections", help="Detections JSON"),
    gt: Path = typer.Option(..., "--gt", help="Ground-truth JSON"),
    thresholds: str = typer.Option("thumos", "--thresholds", help="thumos, activitynet or a comma-separated list"),
    subset: Optional[str] = typer.Option(None, "--subset", help="Only evaluate this GT subset"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Report JSON (default: next to the detections)"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output")
):
    """Compute mAP at each tIoU threshold"""
    try:
        _prepare(verbose)
        report = evaluate(detections, gt, _parse_thresholds(thresholds), subset=subset)

        report_path = out or detections.with_name("eval_report.json")
        report.write(report_path)
        _print_report(report)
        console.print(f"Average mAP: {report.average_map:.4f}")
        console.print(f"📄 Report written to {report_path}")

    except typer.Exit:
        raise
    except Exception as e:
        _fail(e)


@app.command()
def ablate(
    data: Path = typer.Option(..., "--data", "-d", help="Dataset manifest"),
    out_dir: Path = typer.Option(..., "--out", "-o", help="Ablation output directory"),
    config_file: Optional[Path] = typer.Option(None, "--config", "-c", help="Run configuration JSON"),
    m_sweep: bool = typer.Option(True, "--m-sweep/--no-m-sweep", help="Also sweep the maximum feature magnitude"),
    threads: Optional[int] = typer.Option(None, "--threads", "-t", help="Worker threads for detection"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output")
):
    """Score-mode ablation and max-magnitude sweep"""
    try:
        settings = _prepare(verbose)
        config = _run_config(config_file)
        manifest = read_manifest(data)
        train_records = load_dataset(data, subset=config.train_subset)
        test_records = load_dataset(data, subset=config.test_subset)

        out_dir.mkdir(parents=True, exist_ok=True)
        config.write(out_dir / RESOLVED_CONFIG)

        runner = AblationRunner(config, out_dir, threads=threads or settings.threads)
        report = runner.run(
            train_records,
            test_records,
            data.parent / manifest.gt_path,
            manifest.class_names,
            m_values=M_SWEEP if m_sweep else (),
        )
        _print_ablation(report)

    except typer.Exit:
        raise
    except Exception as e:
        _fail(e)


@app.command("grad-check")
def grad_check(
    seeds: int = typer.Option(20, "--seeds", help="Number of random instances"),
    tolerance: float = typer.Option(1e-5, "--tolerance", help="Maximum relative error"),
    config_file: Optional[Path] = typer.Option(None, "--config", "-c", help="Run configuration JSON (loss settings)"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output")
):
    """Compare analytic gradients with central finite differences"""
    try:
        _prepare(verbose)
        config = _run_config(config_file)

        per_block = {}
        floored = {}
        entries = 0
        for seed in range(seeds):
            params, batch = gradcheck_instance(seed, kernel_size=config.kernel_size)
            report = gradient_check(params, batch, config.mil)
            entries += report.entries_checked
            for name, value in report.per_block.items():
                per_block[name] = max(per_block.get(name, 0.0), value)
            for name, count in report.floored.items():
                floored[name] = floored.get(name, 0) + count

        table = Table(title=f"🧮 Gradient Check ({seeds} seeds, {entries} entries)")
        table.add_column("Block", style="cyan")
        table.add_column("Max rel. error", style="green")
        table.add_column("Floored", justify="right")
        table.add_column("Status")
        for name, value in per_block.items():
            table.add_row(name, f"{value:.3e}", str(floored.get(name, 0)), "✅" if value <= tolerance else "❌")
        console.print(table)

        worst = max(per_block.values()) if per_block else 0.0
        if worst > tolerance:
            console.print(f"❌ Max relative error {worst:.3e} exceeds {tolerance:g}", style="red")
            raise typer.Exit(3)
        console.print(f"✅ Max relative error {worst:.3e}")

    except typer.Exit:
        raise
    except Exception as e:
        _fail(e)


@app.command()
def hist(
    data: Path = typer.Option(..., "--data", "-d", help="Dataset manifest"),
    out: Path = typer.Option(..., "--out", "-o", help="Histogram CSV to write"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", "-k", help="Model checkpoint (untrained init if omitted)"),
    config_file: Optional[Path] = typer.Option(None, "--config", "-c", help="Run configuration JSON"),
    subset: Optional[str] = typer.Option(None, "--subset", help="Dataset subset (default: config test subset)"),
    bins: int = typer.Option(30, "--bins", help="Number of histogram bins"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose output")
):
    """Feature-magnitude histograms of action vs background segments"""
    try:
        _prepare(verbose)
        config = _run_config(config_file)
        records = load_dataset(data, subset=subset or config.test_subset)
        if not records:
            raise ConfigError(f"no videos in subset '{subset or config.test_subset}'")

        if checkpoint is not None:
            params = load_params(checkpoint)
        else:
            params = init_params(
                records[0].features.shape[1], records[0].label.shape[0], config.kernel_size, config.seed
            )

        histogram = magnitude_histogram(params, records, bins=bins)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_histogram_csv(histogram, out)
        console.print(f"📊 Overlap coefficient: {histogram.overlap:.4f}")
        console.print(f"📄 Histogram written to {out}")

    except typer.Exit:
        raise
    except Exception as e:
        _fail(e)


def _print_report(report: EvalReport) -> None:
    header, row = report.table_rows()
    table = Table(title=f"🎯 Detection mAP (%), {report.num_detections} detections, {report.num_ground_truth} GT")
    for name in header:
        table.add_column(name, style="cyan" if name != "AVG" else "bold green", justify="right")
    table.add_row(*row)
    console.print(table)


def _print_ablation(report: AblationReport) -> None:
    def rows_table(title: str, rows: List[AblationRow]) -> Table:
        table = Table(title=title)
        table.add_column("Setting", style="cyan")
        table.add_column("Checkpoint")
        for t in report.thresholds:
            table.add_column(f"mAP@{t:g}", justify="right")
        table.add_column("AVG", style="bold green", justify="right")
        for row in rows:
            table.add_row(
                row.name,
                row.checkpoint,
                *[f"{100 * v:.1f}" for v in row.map_per_threshold],
                f"{100 * row.average_map:.1f}",
            )
        return table

    console.print(rows_table("🔬 Score Calculation Ablation", report.modes))
    if report.m_sweep:
        console.print(rows_table("📈 Maximum Feature Magnitude Sweep", report.m_sweep))


@app.command()
def version():
    """Show version information"""
    console.print(Panel.fit(
        f"""🎬 uncertainty-localizer v{__version__}

Built with:
• NumPy (analytic gradients, no autodiff framework)
• Pydantic configuration models
• Rich CLI Interface
        """,
        title="Version Information",
        border_style="blue"
    ))


def main():
    """主程式入口"""
    app()


if __name__ == "__main__":
    main()
